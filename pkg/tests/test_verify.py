import numpy as np
import pytest

from ssa_tta import hfa, verify
from ssa_tta.config import VerifyConfig
from ssa_tta.numerics import entropy

QUICK = VerifyConfig(n_theorem=300, n_grad=4, n_hfa=25)


@pytest.fixture(scope="module")
def clean():
    return {r.name: r for r in verify.run_all(QUICK)}


class TestChecks:
    def test_all_pass(self, clean):
        assert [n for n, r in clean.items() if not r.passed] == []
        assert set(clean) == set(verify.FAULTS)

    def test_low_entropy_sampler(self, rng):
        for p in verify.sample_low_entropy(rng, 50, 0.3, (3, 6)):
            assert entropy(p) <= 0.3 and 3 <= p.size <= 6

    def test_theorem_reports_kappa_rate(self, clean):
        info = clean["theorem"].info
        assert info["violations"] == {"tail": 0, "pos": 0, "neg": 0}
        assert 0.0 <= info["kappa_violation_rate"] <= 1.0

    def test_brute_force_oracle(self):
        spec = hfa.make_grid((1, 3), (1, 2), (1, 1))
        patches = [np.array([[[1.0, 3.0]]]), np.array([[[5.0, 7.0]]])]
        np.testing.assert_array_equal(verify.brute_force_aggregate(patches, spec),
                                      [[[1.0, 4.0, 7.0]]])

    def test_line_format(self, clean):
        assert clean["hfa-oracle"].line().startswith("[PASS] hfa-oracle:")

    def test_unknown_fault(self):
        with pytest.raises(ValueError):
            verify.run_all(QUICK, fault="nothing")


@pytest.mark.parametrize("fault", verify.FAULTS)
def test_fault_trips_only_its_check(fault):
    results = {r.name: r for r in verify.run_all(QUICK, fault=fault)}
    failed = [n for n, r in results.items() if not r.passed]
    assert failed == [fault]
    assert results[fault].failing_case is not None
