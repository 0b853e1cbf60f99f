"""On-disk formats: metrics CSV, raw tensor dumps, bank snapshots, run manifests.

Tensor dumps are row-major little-endian float64 in ``<stem>.bin`` with a
JSON sidecar ``<stem>.json`` holding shape, dtype tag, seed and name.
Floats in CSV files are written with ``repr`` so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import METRIC_FIELDS, MetricsRecord
from .selection import EntropyBank

DTYPE_TAG = "float64-le"


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_metrics_csv(path, metrics: MetricsRecord | list[dict]) -> Path:
    path = Path(path)
    rows = metrics.rows if isinstance(metrics, MetricsRecord) else metrics
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k == "stage":
                    row[k] = v
                elif k in ("iter", "n_ps", "n_rt"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def dump_tensor(path, array, name: str, seed: int | None = None) -> tuple[Path, Path]:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64)).astype("<f8", copy=False)
    bin_path, hdr_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(arr.tobytes(order="C"))
    header = {"name": name, "shape": list(arr.shape), "dtype": DTYPE_TAG, "seed": seed}
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return bin_path, hdr_path


def load_tensor(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("dtype") != DTYPE_TAG:
        raise ValueError(f"{path}: unsupported dtype tag {header.get('dtype')!r}")
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    shape = tuple(header["shape"])
    if raw.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: {raw.size} values do not fit shape {shape}")
    return raw.reshape(shape).astype(np.float64), header


def dump_bank(path, bank: EntropyBank, seed: int | None = None) -> tuple[Path, Path]:
    """Bank as a ``(n, 2)`` tensor of (id, value) rows in ascending id order."""
    snap = bank.snapshot()
    table = np.array([[float(i), h] for i, h in snap]).reshape(len(snap), 2)
    return dump_tensor(path, table, name=f"entropy_bank(alpha={bank.alpha!r})", seed=seed)


def now_iso() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seeds: list[int]
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    version: str = ""
    extra: dict = field(default_factory=dict)

    def add(self, *paths) -> None:
        for p in paths:
            s = str(p)
            if s in self.outputs:
                raise ValueError(f"{s} already listed in this manifest")
            self.outputs.append(s)

    def write(self, path) -> Path:
        path = Path(path)
        self.finished = self.finished or now_iso()
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
