import json

import numpy as np
import pytest

from ssa_tta import artifacts
from ssa_tta.engine import METRIC_FIELDS, MetricsRecord
from ssa_tta.selection import EntropyBank


def sample_metrics():
    m = MetricsRecord()
    m.append(iter=3, stage="stage1", loss_cacl=0.1 + 0.2, loss_dis=0.0, loss_mix=0.0,
             metric=0.873, n_ps=0, n_rt=0, tau_neg_eff=0.9, lr=0.05)
    m.append(iter=6, stage="stage2", loss_cacl=0.0, loss_dis=1e-17, loss_mix=0.4,
             metric=float("nan"), n_ps=10, n_rt=20, tau_neg_eff=0.9, lr=0.01)
    return m


class TestMetricsCsv:
    def test_header_and_round_trip(self, tmp_path):
        p = artifacts.write_metrics_csv(tmp_path / "m.csv", sample_metrics())
        assert p.read_text().splitlines()[0] == ",".join(METRIC_FIELDS)
        rows = artifacts.read_metrics_csv(p)
        assert rows[0]["loss_cacl"] == 0.1 + 0.2  # repr keeps every bit
        assert rows[1]["loss_dis"] == 1e-17 and np.isnan(rows[1]["metric"])
        assert rows[1]["n_rt"] == 20 and rows[1]["stage"] == "stage2"

    def test_byte_identical(self, tmp_path):
        a = artifacts.write_metrics_csv(tmp_path / "a.csv", sample_metrics()).read_bytes()
        b = artifacts.write_metrics_csv(tmp_path / "b.csv", sample_metrics()).read_bytes()
        assert a == b

    def test_rejects_foreign_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            artifacts.read_metrics_csv(p)

    def test_decreasing_iter_rejected(self):
        m = sample_metrics()
        with pytest.raises(ValueError):
            m.append(iter=1, stage="stage2")


class TestTensor:
    def test_round_trip(self, tmp_path, rng):
        a = rng.normal(size=(3, 4, 2))
        bin_path, hdr_path = artifacts.dump_tensor(tmp_path / "t", a, "feats", seed=5)
        assert bin_path.stat().st_size == a.size * 8
        back, header = artifacts.load_tensor(tmp_path / "t")
        np.testing.assert_array_equal(back, a)
        assert header == {"name": "feats", "shape": [3, 4, 2], "dtype": "float64-le", "seed": 5}

    def test_little_endian_layout(self, tmp_path):
        artifacts.dump_tensor(tmp_path / "t", [[1.0, 2.0]], "x")
        raw = (tmp_path / "t.bin").read_bytes()
        assert raw == np.array([1.0, 2.0], dtype="<f8").tobytes()

    def test_shape_mismatch(self, tmp_path):
        artifacts.dump_tensor(tmp_path / "t", np.zeros(4), "x")
        hdr = json.loads((tmp_path / "t.json").read_text())
        hdr["shape"] = [5]
        (tmp_path / "t.json").write_text(json.dumps(hdr))
        with pytest.raises(ValueError, match="shape"):
            artifacts.load_tensor(tmp_path / "t")

    def test_bank_dump(self, tmp_path):
        bank = EntropyBank(alpha=0.8, entries={5: 0.3, 2: 0.1})
        artifacts.dump_bank(tmp_path / "bank", bank, seed=1)
        table, header = artifacts.load_tensor(tmp_path / "bank")
        np.testing.assert_array_equal(table, [[2.0, 0.1], [5.0, 0.3]])
        assert "0.8" in header["name"]

    def test_empty_bank(self, tmp_path):
        artifacts.dump_bank(tmp_path / "bank", EntropyBank())
        table, _ = artifacts.load_tensor(tmp_path / "bank")
        assert table.shape == (0, 2)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = artifacts.RunManifest(command="adapt", config_digest="abc", seeds=[0],
                                  started=artifacts.now_iso(), extra={"mode": "online"})
        m.add(tmp_path / "a", tmp_path / "b")
        m.write(tmp_path / "m.json")
        back = artifacts.RunManifest.read(tmp_path / "m.json")
        assert back == m and back.finished

    def test_duplicate_output(self, tmp_path):
        m = artifacts.RunManifest(command="x", config_digest="", seeds=[], started="")
        m.add(tmp_path / "a")
        with pytest.raises(ValueError, match="already"):
            m.add(tmp_path / "a")
