import numpy as np
import pytest

import nnilqr.verify as verify
from nnilqr.tracking import gamma_step


@pytest.mark.parametrize("name", list(verify.SUITES))
def test_each_suite_passes(name):
    (res,) = verify.run_suites([name])
    assert res.passed, verify.format_results([res])
    assert res.checks


def test_unknown_suite_raises():
    with pytest.raises(KeyError, match="nope"):
        verify.run_suites(["riccati", "nope"])


def test_crashing_suite_is_reported_as_failed(monkeypatch):
    def boom():
        raise RuntimeError("kaput")

    monkeypatch.setitem(verify.SUITES, "metrics", boom)
    (res,) = verify.run_suites(["metrics"])
    assert not res.passed and "kaput" in res.error
    text = verify.format_results([res])
    assert "[FAIL] metrics" in text and text.endswith("failed suites: metrics")


def test_gamma_oracle_catches_a_sign_error(monkeypatch):
    def wrong(psi, u, model, params, v_p):
        out = gamma_step(psi, u, model, params, v_p)
        out[3] = -out[3]
        return out

    monkeypatch.setattr(verify, "gamma_step", wrong)
    assert not verify.suite_gamma().passed


def test_gradient_suite_rejects_missing_model(tmp_path):
    res = verify.suite_gradient(model_path=tmp_path / "none.json")
    assert not res.passed


def test_riccati_helper_matches_closed_form_scalar():
    # scalar x' = x + u, Q = R = Qf = 1, two controls: P1 = 1 + 1 - 1/2, K1 = -1/2
    gains, P0 = verify.riccati_lqr(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1), 2)
    assert gains[0][0, 0] == pytest.approx(-0.5)
    assert P0[0, 0] == pytest.approx(1.5)


def test_grad_rel_error_uses_floor():
    assert verify.grad_rel_error(np.array([1e-9]), np.array([0.0])) < 1e-2
    assert verify.grad_rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_format_results_all_passed():
    r = verify.SuiteResult("x")
    r.check("fine", True, "0")
    assert verify.format_results([r]).endswith("all suites passed")
