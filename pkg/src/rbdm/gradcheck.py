"""Central finite-difference verification of reverse-mode gradients."""
import numpy as np

from rbdm.errors import NumericsError
from rbdm.tensor import Tensor, no_grad


def _scalar(value, what):
    v = float(value.data if isinstance(value, Tensor) else value)
    if not np.isfinite(v):
        raise NumericsError(f"non-finite value in {what}")
    return v


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return np.abs(analytic - numeric) / denom


def numeric_grad(evaluate, array, flat_indices, eps):
    """Central differences of ``evaluate()`` w.r.t. ``array`` (mutated in place
    and restored) at the given flat coordinates."""
    flat = array.reshape(-1)
    out = np.empty(len(flat_indices))
    for n, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + eps
        up = _scalar(evaluate(), "perturbed evaluation")
        flat[i] = orig - eps
        down = _scalar(evaluate(), "perturbed evaluation")
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def _pick(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_diff_check(f, x, eps=1e-4, max_coords=None, rng=None):
    """Max relative error between the analytic gradient of scalar ``f`` at
    ``x`` and its central-difference estimate.

    Raises NumericsError if the function value or any gradient is not finite.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    leaf = Tensor(data.copy(), requires_grad=True)
    loss = f(leaf)
    _scalar(loss, "function value")
    loss.backward()
    analytic = np.zeros_like(data) if leaf.grad is None else leaf.grad
    if not np.all(np.isfinite(analytic)):
        raise NumericsError("non-finite analytic gradient")

    probe = Tensor(data)
    idx = _pick(data.size, max_coords, rng)

    def evaluate():
        with no_grad():
            return f(probe)

    numeric = numeric_grad(evaluate, probe.data, idx, eps)
    return float(relative_error(analytic.reshape(-1)[idx], numeric).max())


def check_parameters(loss_fn, params, eps=1e-4, max_coords=4, rng=None):
    """Finite-difference check of every named parameter tensor.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    Returns {name: max relative error} over up to ``max_coords`` coordinates
    per tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    _scalar(loss, "loss")
    loss.backward()

    def evaluate():
        with no_grad():
            return loss_fn()

    report = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite analytic gradient for {name}")
        idx = _pick(p.data.size, max_coords, rng)
        numeric = numeric_grad(evaluate, p.data, idx, eps)
        report[name] = float(relative_error(g.reshape(-1)[idx], numeric).max())
    return report
