from dataclasses import replace

import numpy as np
import pytest

from ssa_tta import engine, hfa, netcore
from ssa_tta.synthdata import (DomainConfig, GenericRange, ShiftSpec, gen_domains,
                               gen_generic_distribution)

OFF = hfa.HfaConfig(enabled=False)
DENSE = DomainConfig(task="dense", n_classes=4, dims=4, samples_per_class=4, height=8, width=8)


class TestDeterminism:
    @pytest.mark.parametrize("cfg", [DomainConfig(), DENSE])
    def test_same_seed_same_data(self, cfg):
        a, b = gen_domains(cfg, 3), gen_domains(cfg, 3)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.x, db.x)
            np.testing.assert_array_equal(da.y, db.y)
        c = gen_domains(cfg, 4)
        assert not np.array_equal(a[0].x, c[0].x)

    def test_samples_independent_of_set_size(self):
        small = gen_domains(DomainConfig(samples_per_class=10), 0)[1]
        big = gen_domains(DomainConfig(samples_per_class=20), 0)[1]
        np.testing.assert_array_equal(small.x, big.x[:30])

    def test_ids_and_shapes(self):
        src, tgt = gen_domains(DENSE, 0)
        np.testing.assert_array_equal(src.ids, np.arange(16))
        assert src.x.shape == (16, 4, 8, 8) and src.y.shape == (16, 8, 8)
        assert src.name == "source" and tgt.name == "target"


class TestShift:
    def test_null_shift_equal_in_law(self):
        cfg = DomainConfig(samples_per_class=2000, target_shift=ShiftSpec())
        src, tgt = gen_domains(cfg, 0)
        assert not np.array_equal(src.x, tgt.x)
        for c in range(cfg.n_classes):
            ms, mt = src.x[src.y == c].mean(0), tgt.x[tgt.y == c].mean(0)
            np.testing.assert_allclose(ms, mt, atol=0.1)
            assert src.x[src.y == c].std() == pytest.approx(tgt.x[tgt.y == c].std(), rel=0.05)

    def test_rotation_moves_class_means(self):
        cfg = DomainConfig(samples_per_class=2000, sigma=0.1,
                           target_shift=ShiftSpec(angle_deg=90.0))
        _, tgt = gen_domains(cfg, 0)
        mean0 = tgt.x[tgt.y == 0].mean(0)
        np.testing.assert_allclose(mean0, [0.0, 4.0], atol=0.02)

    def test_half_turn_flips_two_classes(self):
        cfg = DomainConfig(n_classes=2, samples_per_class=200, sigma=0.5,
                           target_shift=ShiftSpec(angle_deg=180.0))
        src, tgt = gen_domains(cfg, 0)
        params = engine.train_supervised(netcore.init_params(2, 2, seed=0), src,
                                         engine.TrainConfig(epochs=20), seed=0)
        assert engine.evaluate(params, src, OFF) > 0.99
        assert engine.evaluate(params, tgt, OFF) < 0.01

    def test_dense_style_shift(self):
        cfg = replace(DENSE, samples_per_class=50, sigma=0.0,
                      target_shift=ShiftSpec(gain=2.0, bias=1.0))
        src, tgt = gen_domains(cfg, 0)
        # noise-free background sites: x_t = 2 x_s + 1 per channel
        site = np.moveaxis(src.x, 1, -1)[src.y == 0][0]
        tsite = np.moveaxis(tgt.x, 1, -1)[tgt.y == 0][0]
        np.testing.assert_allclose(tsite, 2.0 * site + 1.0)


class TestLabels:
    def test_background_only(self):
        src, _ = gen_domains(replace(DENSE, blobs_per_sample=0), 0)
        assert not src.y.any()

    def test_balanced_classification(self):
        src, _ = gen_domains(DomainConfig(n_classes=5, samples_per_class=7), 0)
        np.testing.assert_array_equal(np.bincount(src.y), np.full(5, 7))

    def test_unlabeled_view_hides_labels(self):
        src, _ = gen_domains(DomainConfig(), 0)
        view = src.unlabeled()
        assert not hasattr(view, "y")
        view.x[0, 0] += 1.0
        assert src.x[0, 0] != view.x[0, 0]


class TestValidation:
    @pytest.mark.parametrize("cfg", [
        DomainConfig(n_classes=1),
        DomainConfig(dims=1),
        DomainConfig(sigma=0.0),
        DomainConfig(target_shift=ShiftSpec(sigma_scale=0.0)),
        replace(DENSE, height=4),
        replace(DENSE, n_classes=2),
        DomainConfig(task="audio"),
    ])
    def test_rejects(self, cfg):
        with pytest.raises(ValueError):
            gen_domains(cfg, 0)


class TestGeneric:
    def test_degenerate_range_matches_fixed_shift(self):
        shift = ShiftSpec(angle_deg=30.0, sigma_scale=1.5)
        cfg = DomainConfig(samples_per_class=3000, target_shift=shift,
                           generic=GenericRange(angle_deg=(30.0, 30.0), sigma_scale=(1.5, 1.5)))
        gen = gen_generic_distribution(cfg, 0)
        _, tgt = gen_domains(cfg, 0)
        for c in range(cfg.n_classes):
            np.testing.assert_allclose(gen.x[gen.y == c].mean(0), tgt.x[tgt.y == c].mean(0),
                                       atol=0.12)

    def test_dense_generic(self):
        gen = gen_generic_distribution(DENSE, 0)
        assert gen.name == "generic" and gen.x.shape == (16, 4, 8, 8)
