import numpy as np
import pytest

from rbdm import gradsuite
from rbdm import tensor as tn
from rbdm.cli import main
from rbdm.gradcheck import check_parameters, relative_error
from rbdm.tensor import Tensor


@pytest.fixture(scope="module")
def suite():
    return gradsuite.run_suite()


def test_every_check_passes(suite):
    failed = [(r.name, r.max_rel_error) for r in suite if not r.passed]
    assert not failed


def test_suite_covers_primitives_and_every_parameter(suite):
    names = {r.name for r in suite}
    for prim in ("conv2d/input", "conv2d/kernel", "tanh", "relu", "silu", "ssim", "ms_ssim",
                 "loss_route/xbar0"):
        assert prim in names
    model, _ = gradsuite._composed_case()
    assert {f"rbdm_loss/{k}" for k in model.params} <= names



def test_composed_case_has_all_terms_active():
    from rbdm.losses import total_loss

    model, _ = gradsuite._composed_case()
    rng = np.random.default_rng(100)
    x0 = np.tanh(rng.standard_normal((2, 3, 24, 24)))
    y0 = np.tanh(rng.standard_normal((2, 16, 24, 24)))
    for t0 in range(1, 10):
        lb = total_loss(model, x0, y0, np.array([t0, t0 + 2]), np.random.default_rng(0))
        if lb.l3 > 0:
            break
    assert lb.l1 > 0 and lb.l2 > 0 and lb.l3 > 0
    assert lb.graph.dtype == np.float64


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 3.0) == pytest.approx(0.5)


def test_check_parameters_reports_per_name():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="w")
    x = rng.standard_normal((4, 3))
    report = check_parameters(lambda: tn.mean(tn.tanh(tn.linear(x, w)) ** 2), {"w": w})
    assert set(report) == {"w"} and report["w"] < 1e-6


def test_corrupted_conv_gradient_is_named(monkeypatch, capsys):
    orig = tn._conv2d_backward

    def corrupted(*args, **kwargs):
        gx, gw, gb = orig(*args, **kwargs)
        if gw is not None:
            gw = gw * 1.05
        return gx, gw, gb

    monkeypatch.setattr(tn, "_conv2d_backward", corrupted)
    results = gradsuite.run_suite(composed=False)
    failed = {r.name for r in results if not r.passed}
    assert "conv2d/kernel" in failed
    assert "conv2d/input" not in failed

    text = gradsuite.format_report(results)
    assert "FAIL  conv2d/kernel" in text


def test_cli_gradcheck_exit_codes(monkeypatch, capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out and "FAIL" not in out

    orig = tn._conv2d_backward

    def corrupted(*args, **kwargs):
        gx, gw, gb = orig(*args, **kwargs)
        return (None if gx is None else -gx), gw, gb

    monkeypatch.setattr(tn, "_conv2d_backward", corrupted)
    assert main(["gradcheck"]) == 3
    assert "FAIL  conv2d/input" in capsys.readouterr().out
