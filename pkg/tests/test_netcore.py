import math

import numpy as np
import pytest

from ssa_tta import netcore
from ssa_tta.netcore import (OptimState, backward, forward, grad_check, init_params, load_params,
                             save_params, sgd_step)


@pytest.fixture
def params():
    return init_params(3, 4, width=5, feat_dim=6, seed=11)


def zero_params(in_dim=2, n_classes=3):
    p = init_params(in_dim, n_classes, width=2, feat_dim=2)
    for v in p.arrays.values():
        v[:] = 0.0
    return p


class TestForward:
    def test_zero_weights_uniform(self):
        _, logits, probs, _ = forward(zero_params(), np.ones((4, 2)))
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_allclose(probs, 1 / 3)

    def test_hand_checked_scalar_net(self):
        p = init_params(1, 2, width=1, feat_dim=1)
        a = p.arrays
        a["W1"][:] = 0.5
        a["b1"][:] = 0.1
        a["W2"][:] = 2.0
        a["b2"][:] = -0.3
        a["Wc"][:] = [[1.0], [-1.0]]
        a["bc"][:] = [0.0, 0.2]
        f, logits, probs, _ = forward(p, np.array([[2.0]]))
        h = math.tanh(0.5 * 2.0 + 0.1)
        ff = math.tanh(2.0 * h - 0.3)
        assert f[0, 0] == pytest.approx(ff, rel=1e-15)
        np.testing.assert_allclose(logits[0], [ff, -ff + 0.2], rtol=1e-15)
        e = np.exp([ff, -ff + 0.2])
        np.testing.assert_allclose(probs[0], e / e.sum(), rtol=1e-14)

    def test_rejects_bad_width(self, params):
        with pytest.raises(ValueError):
            forward(params, np.zeros((2, 4)))

    def test_field_layout(self, params, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        f, logits, probs, _ = netcore.forward_any(params, x)
        assert probs.shape == (2, 4, 4, 5) and f.shape == (2, 6, 4, 5)
        _, _, p_site, _ = forward(params, x[1, :, 2, 3][None])
        np.testing.assert_allclose(probs[1, :, 2, 3], p_site[0], rtol=1e-14)


class TestBackward:
    def test_zero_upstream(self, params, rng):
        _, logits, _, cache = forward(params, rng.normal(size=(4, 3)))
        grads = backward(params, cache, np.zeros_like(logits))
        assert all(not g.any() for g in grads.values())

    def test_frozen_classifier(self, params, rng):
        params.freeze("classifier")
        _, logits, _, cache = forward(params, rng.normal(size=(4, 3)))
        grads = backward(params, cache, rng.normal(size=logits.shape))
        assert not grads["Wc"].any() and not grads["bc"].any()
        assert grads["W1"].any()

    def test_stale_cache(self, params, rng):
        _, logits, _, cache = forward(params, rng.normal(size=(2, 3)))
        sgd_step(params, params.zeros_like(), OptimState())
        with pytest.raises(RuntimeError, match="stale"):
            backward(params, cache, np.ones_like(logits))

    def test_linear_loss_grad_check(self, params, rng):
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 6))

        def loss_fn(p):
            f, logits, _, cache = forward(p, x)
            return float(np.sum(w * logits) + np.sum(v * f)), backward(p, cache, w, v)

        assert grad_check(loss_fn, params, max_entries=None) < 1e-6

    def test_grad_check_detects_error(self, params, rng):
        x = rng.normal(size=(5, 3))

        def loss_fn(p):
            _, logits, _, cache = forward(p, x)
            g = backward(p, cache, np.ones_like(logits))
            g["W1"] = g["W1"] * 1.1
            return float(logits.sum()), g

        assert grad_check(loss_fn, params) > 1e-2


class TestSgd:
    def test_quadratic_bowl_with_momentum(self):
        p = zero_params(1, 2)
        p.arrays["bc"][:] = [1.0, -2.0]
        opt = OptimState(lr={"extractor": 0.0, "classifier": 0.1, "gate": 0.0},
                         momentum=0.9, weight_decay=0.0, power=1.0, max_iter=10**9)
        w = np.array([1.0, -2.0])
        v = np.zeros(2)
        for _ in range(5):
            g = {k: np.zeros_like(a) for k, a in p.arrays.items()}
            g["bc"] = p.arrays["bc"].copy()  # grad of 0.5 |b|^2
            v = 0.9 * v + w
            lr = 0.1 * (1 - opt.iter / opt.max_iter)
            w = w - lr * v
            sgd_step(p, g, opt)
            np.testing.assert_allclose(p.arrays["bc"], w, rtol=1e-12)
        assert np.linalg.norm(w) < math.sqrt(5)

    def test_weight_decay(self):
        p = zero_params(1, 2)
        p.arrays["bc"][:] = [1.0, 1.0]
        opt = OptimState(lr={"extractor": 0.0, "classifier": 0.5, "gate": 0.0},
                         weight_decay=0.1, max_iter=10**9)
        sgd_step(p, p.zeros_like(), opt)
        np.testing.assert_allclose(p.arrays["bc"], 1.0 - 0.5 * 0.1, rtol=1e-8)

    def test_poly_schedule(self):
        opt = OptimState(max_iter=100, power=0.9)
        for it in (0, 10, 50, 99):
            assert opt.lr_factor(it) == pytest.approx((1 - it / 100) ** 0.9)
        assert opt.lr_factor(100) == 0.0
        assert opt.effective_lr("classifier", 100) == 0.0

    def test_frozen_group_untouched(self, params, rng):
        params.freeze("extractor")
        before = params.clone()
        grads = {k: rng.normal(size=v.shape) for k, v in params.arrays.items()}
        opt = OptimState()
        sgd_step(params, grads, opt)
        for name in netcore.GROUPS["extractor"]:
            np.testing.assert_array_equal(params.arrays[name], before.arrays[name])
            assert name not in opt.velocity
        assert not np.array_equal(params.arrays["Wc"], before.arrays["Wc"])


class TestStorage:
    def test_clone_independent(self, params):
        c = params.clone()
        c.arrays["W1"][0, 0] += 1.0
        c.freeze("gate")
        assert not params.equal(c)
        assert not params.frozen["gate"]

    def test_round_trip(self, params, tmp_path):
        params.freeze("classifier")
        params.iter = 17
        bin_path, hdr_path = save_params(params, tmp_path / "m")
        assert bin_path.stat().st_size == 8 * sum(v.size for v in params.arrays.values())
        back = load_params(tmp_path / "m")
        assert back.equal(params)
        assert back.frozen == params.frozen and back.iter == 17 and back.seed == 11

    def test_trailing_bytes_rejected(self, params, tmp_path):
        bin_path, _ = save_params(params, tmp_path / "m")
        bin_path.write_bytes(bin_path.read_bytes() + b"\0" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_params(tmp_path / "m")

    def test_init_deterministic(self):
        assert init_params(3, 4, seed=5).equal(init_params(3, 4, seed=5))
        assert not init_params(3, 4, seed=5).equal(init_params(3, 4, seed=6))
