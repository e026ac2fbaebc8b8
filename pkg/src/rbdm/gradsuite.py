"""The 64-bit finite-difference suite behind ``rbdm gradcheck``."""
import time
from dataclasses import dataclass

import numpy as np

from rbdm import tensor as tn
from rbdm.bridge import make_schedule
from rbdm.gradcheck import check_parameters, finite_diff_check
from rbdm.losses import loss_route, total_loss
from rbdm.metrics import ms_ssim, ssim
from rbdm.model import RBDM

TOLERANCE = 1e-3
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self):
        return np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE


def _primitive_cases(rng):
    f64 = np.float64

    def r(*shape):
        return rng.standard_normal(shape).astype(f64)

    other = r(2, 3, 6, 6)
    kern = r(4, 3, 3, 3)
    bias = r(4)
    img = r(2, 3, 6, 6)
    pos = rng.uniform(0.5, 2.0, size=(2, 3, 6, 6))
    vec = r(5, 7)
    wlin = r(4, 7)
    win = np.array([0.25, 0.5, 0.25])
    a24 = np.tanh(r(3, 24, 24))
    b24 = np.tanh(a24 + 0.3 * r(3, 24, 24))

    def sq(t):
        return tn.mean(t * t)

    return [
        ("conv2d/input", img, lambda x: sq(tn.conv2d(x, kern, bias, padding=1))),
        ("conv2d/kernel", kern, lambda k: sq(tn.conv2d(img, k, bias, padding=1))),
        ("conv2d/bias", bias, lambda b: sq(tn.conv2d(img, kern, b, padding=1))),
        ("conv2d/stride2", img[:, :, :5, :5], lambda x: sq(tn.conv2d(x, kern, stride=2))),
        ("tanh", img, lambda x: tn.mean(tn.tanh(x) ** 2)),
        ("relu", img, lambda x: sq(tn.relu(x))),
        ("silu", img, lambda x: sq(tn.silu(x))),
        ("add", img, lambda x: sq(x + other)),
        ("sub", img, lambda x: sq(other - x)),
        ("mul", img, lambda x: sq(x * other)),
        ("scale", img, lambda x: sq(tn.scale(x, -1.7))),
        ("div", pos, lambda x: sq(other / x)),
        ("power", pos, lambda x: tn.mean(x ** 1.3)),
        ("clamp_min", img, lambda x: sq(tn.clamp_min(x, 0.1))),
        ("sum", img, lambda x: tn.tsum(x * x)),
        ("mean_axis", img, lambda x: sq(tn.mean(x, axis=(-2, -1)))),
        ("l2norm", img, lambda x: tn.l2norm(x)),
        ("reshape", img, lambda x: sq(tn.reshape(x, (6, 36)) * other.reshape(6, 36))),
        ("getitem", img, lambda x: sq(x[1, :, 1:4])),
        ("concat", img, lambda x: sq(tn.concat([x, x * other], axis=1))),
        ("stack", img, lambda x: sq(tn.stack([x[0], x[1] * other[1]]))),
        ("bias_add", r(2, 4), lambda b: sq(tn.bias_add(tn.conv2d(img, kern, padding=1), b))),
        ("linear", vec, lambda x: sq(tn.tanh(tn.linear(x, wlin, bias)))),
        ("avg_pool2d", img, lambda x: sq(tn.avg_pool2d(x) * 2.0)),
        ("upsample2d", img, lambda x: sq(tn.upsample2d(x) * np.repeat(np.repeat(other, 2, -1), 2, -2))),
        ("filter1d", img, lambda x: sq(tn.filter1d(tn.filter1d(x, win, -1), win, -2))),
        ("ssim", a24, lambda x: ssim(x, tn.Tensor(b24))),
        ("ms_ssim", a24, lambda x: ms_ssim(x, tn.Tensor(b24), n_scales=2)),
    ]


def _composed_case(seed=0, size=24):
    """Tiny float64 model and a batch where all three loss terms are active."""
    model = RBDM(T=20, channels=(4, 6, 8), encoder_hidden=8, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    x0 = np.tanh(rng.standard_normal((2, 3, size, size)))
    y0 = np.tanh(rng.standard_normal((2, 16, size, size)))
    for t0 in range(1, 10):
        t = np.array([t0, t0 + 2])
        lb = total_loss(model, x0, y0, t, np.random.default_rng(seed))
        if lb.l3 > 0:
            break

    def loss_fn():
        return total_loss(model, x0, y0, t, np.random.default_rng(seed)).graph

    return model, loss_fn


def run_suite(rng_seed=0, composed=True):
    """Run every check; returns a list of CheckResult."""
    rng = np.random.default_rng(rng_seed)
    results = []
    for name, x, f in _primitive_cases(rng):
        err = finite_diff_check(f, x, eps=EPS, max_coords=60, rng=rng)
        results.append(CheckResult(name, err))

    # route regulation alone, w.r.t. the x0 estimate; the estimate sits near
    # ybar0 so the hinge is active at small t
    schedule = make_schedule(20)
    x0 = np.tanh(rng.standard_normal((3, 24, 24)))
    ybar = np.tanh(rng.standard_normal((3, 24, 24)))
    xbar = ybar + 0.3 * rng.standard_normal((3, 24, 24))
    results.append(CheckResult(
        "loss_route/xbar0",
        finite_diff_check(lambda xb: loss_route(xb, tn.Tensor(ybar), x0, 3, schedule) +
                          loss_route(xb, tn.Tensor(ybar), x0, 5, schedule),
                          xbar, eps=EPS, max_coords=60, rng=rng)))

    if composed:
        model, loss_fn = _composed_case()
        report = check_parameters(loss_fn, model.params, eps=EPS, max_coords=3, rng=rng)
        for name, err in report.items():
            results.append(CheckResult(f"rbdm_loss/{name}", err))
    return results


def format_report(results, elapsed=None):
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<40s} max rel err {r.max_rel_error:.3e}")
    failed = [r for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if elapsed is not None:
        summary += f" in {elapsed:.1f}s"
    lines.append(summary)
    return "\n".join(lines)


def main_report():
    start = time.perf_counter()
    results = run_suite()
    return results, format_report(results, time.perf_counter() - start)
