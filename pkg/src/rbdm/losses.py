"""Training objective: bridge regression, starting-state regulation (feature
loss on the x0 estimate) and route regulation (MS-SSIM hinge)."""
from dataclasses import dataclass, field

import numpy as np

from rbdm import tensor as tn
from rbdm.bridge import estimate_x0, forward_sample
from rbdm.errors import NumericsError
from rbdm.metrics import ms_ssim
from rbdm.tensor import Tensor


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float
    t: np.ndarray
    graph: Tensor = field(default=None, repr=False, compare=False)


@dataclass
class L1Cache:
    x_t: Tensor
    target: Tensor
    epsilon: np.ndarray
    eps_pred: Tensor
    ybar0: Tensor


def _finite(value, what, t):
    if not np.isfinite(float(value.data)):
        raise NumericsError(f"non-finite {what} at t={np.asarray(t).tolist()}")
    return value


def loss_l1(model, x0, y0, t, rng):
    """Mean squared error between the denoiser output and the bridge target
    m_t (ybar0 - x0) + sqrt(delta_t) eps. ``x0`` is N x 3 x H x W, ``y0`` is
    N x 16 x H x W and ``t`` holds one step per sample."""
    x0 = np.asarray(x0, dtype=model.dtype)
    t = np.asarray(t).reshape(-1)
    ybar0 = model.encoder(np.asarray(y0, dtype=model.dtype))
    samples = [forward_sample(x0[i], ybar0[i], int(t[i]), model.schedule, rng)
               for i in range(len(x0))]
    x_t = tn.stack([s.x_t for s in samples])
    target = tn.stack([s.target for s in samples])
    eps_pred = model.denoiser(x_t, ybar0, t)
    l1 = _finite(tn.mse(eps_pred, target), "L1", t)
    cache = L1Cache(x_t=x_t, target=target, epsilon=np.stack([s.epsilon for s in samples]),
                    eps_pred=eps_pred, ybar0=ybar0)
    return l1, cache


def loss_ssr(x_t, eps_pred, x0, extractor):
    """Feature-space MSE between x0 and its estimate x_t - eps_pred, averaged
    over the extractor stages. Returns (loss, x0_estimate)."""
    xbar0 = estimate_x0(x_t, eps_pred)
    xbar0 = tn.as_tensor(xbar0)
    target = np.asarray(x0, dtype=xbar0.dtype)
    with tn.no_grad():
        ref = [f.data for f in extractor(target)]
    est = extractor(xbar0)
    terms = [tn.mse(e, r) for e, r in zip(est, ref)]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    loss = total * (1.0 / len(terms))
    if not np.isfinite(float(loss.data)):
        raise NumericsError("non-finite L2")
    return loss, xbar0


def route_coefficient(t, T):
    return (T - 2 * t) / T


def loss_route(xbar0, ybar0, x0, t, schedule):
    """Hinge max(0, (T-2t)/T [M(xbar_t, ybar0) - M(xbar_t, x0)]) with
    xbar_t = (1 - t/T) xbar0 + (t/T) ybar0 and M = MS-SSIM, averaged over the
    batch. Accepts a single image (3-D) or a batch (4-D)."""
    xbar0, ybar0 = tn.as_tensor(xbar0), tn.as_tensor(ybar0)
    x0 = np.asarray(x0, dtype=xbar0.dtype)
    single = xbar0.ndim == 3
    t = np.atleast_1d(np.asarray(t)).reshape(-1)
    n = 1 if single else xbar0.shape[0]
    if len(t) == 1 and n > 1:
        t = np.repeat(t, n)
    T = schedule.T
    terms = []
    for i in range(n):
        ti = int(t[i])
        coef = route_coefficient(ti, T)
        if coef == 0:
            continue
        xb = xbar0 if single else xbar0[i]
        yb = ybar0 if single else ybar0[i]
        xi = x0 if single else x0[i]
        m = float(schedule.m[ti])
        xbar_t = (1.0 - m) * xb + m * yb
        bracket = ms_ssim(xbar_t, yb) - ms_ssim(xbar_t, Tensor(xi))
        terms.append(tn.relu(bracket * coef))
    if not terms:
        return Tensor(np.zeros((), dtype=xbar0.dtype))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    loss = total * (1.0 / n)
    if not np.isfinite(float(loss.data)):
        raise NumericsError("non-finite L3")
    return loss


def total_loss(model, x0, y0, t, rng, ssr=True, rr=True, w2=1.0, w3=1.0):
    """L1 + w2 L2 + w3 L3 with disabled terms reported as 0."""
    l1, cache = loss_l1(model, x0, y0, t, rng)
    total = l1
    l2_val = l3_val = 0.0
    if ssr:
        l2, xbar0 = loss_ssr(cache.x_t, cache.eps_pred, x0, model.features)
        total = total + w2 * l2
        l2_val = float(l2.data)
    elif rr:
        xbar0 = tn.as_tensor(estimate_x0(cache.x_t, cache.eps_pred))
    if rr:
        l3 = loss_route(xbar0, cache.ybar0, x0, t, model.schedule)
        total = total + w3 * l3
        l3_val = float(l3.data)
    total = _finite(total, "total loss", t)
    return LossBreakdown(l1=float(l1.data), l2=l2_val, l3=l3_val, total=float(total.data),
                         t=np.asarray(t).reshape(-1), graph=total)
