"""Image similarity measures: PSNR, SSIM, MS-SSIM and a Fréchet distance
over frozen random-convolution features.

SSIM and MS-SSIM are built from :mod:`rbdm.tensor` primitives so the same
code serves as an evaluation metric (numpy in, float out) and as a
differentiable loss term (Tensor in, scalar Tensor out).
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from rbdm import tensor as tn
from rbdm.errors import ConfigError, ShapeError
from rbdm.tensor import Tensor

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0
_CS_FLOOR = 1e-6


def gaussian_window(size=WIN_SIZE, sigma=WIN_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def psnr(a, b, data_range=2.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ ({a.shape} vs {b.shape})")
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / err))


def _blur(x, win):
    return tn.filter1d(tn.filter1d(x, win, -1), win, -2)


def _ssim_terms(x, y, data_range, win):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = _blur(x, win)
    mu_y = _blur(y, win)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = _blur(x * x, win) - mu_xx
    s_yy = _blur(y * y, win) - mu_yy
    s_xy = _blur(x * y, win) - mu_xy
    cs_map = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    return lum * cs_map, cs_map


def _prepare(a, b, min_size, what):
    grad_path = isinstance(a, Tensor) or isinstance(b, Tensor)
    if not grad_path:
        a = Tensor(np.asarray(a, dtype=np.float64))
        b = Tensor(np.asarray(b, dtype=np.float64))
    else:
        a, b = tn.as_tensor(a), tn.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ ({a.shape} vs {b.shape})")
    if a.ndim < 2:
        raise ShapeError(f"{what}: need at least 2-D images, got {a.shape}")
    if min(a.shape[-2:]) < min_size:
        raise ShapeError(f"{what}: image {a.shape[-2]}x{a.shape[-1]} smaller than the "
                         f"{min_size}-pixel minimum")
    return a, b, grad_path


def _finish(value, grad_path):
    return value if grad_path else float(value.data)


def ssim(a, b, data_range=2.0):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
    channels and any leading axes. Valid filtering (no padding)."""
    a, b, grad_path = _prepare(a, b, WIN_SIZE, "ssim")
    ssim_map, _ = _ssim_terms(a, b, data_range, gaussian_window())
    return _finish(tn.mean(ssim_map), grad_path)


def max_scales(height, width):
    """Largest number of MS-SSIM scales (<= 5) whose coarsest level still
    fits the 11-pixel window."""
    n = 0
    h, w = height, width
    while n < len(MS_WEIGHTS) and min(h, w) >= WIN_SIZE:
        n += 1
        h, w = h // 2, w // 2
    return n


def ms_ssim(a, b, data_range=2.0, n_scales=None):
    """Multi-scale SSIM.

    Contrast-structure terms at the finer scales, full SSIM at the coarsest,
    combined with the standard exponents renormalised to ``n_scales``.
    Per-channel values are floored at a tiny positive constant before
    exponentiation and then averaged over channels / leading axes.
    """
    a, b, grad_path = _prepare(a, b, WIN_SIZE, "ms_ssim")
    feasible = max_scales(*a.shape[-2:])
    if n_scales is None:
        n_scales = feasible
    if n_scales < 1 or n_scales > feasible:
        raise ShapeError(
            f"ms_ssim: {n_scales} scales need at least {WIN_SIZE * 2 ** (max(n_scales, 1) - 1)} "
            f"pixels per side; image is {a.shape[-2]}x{a.shape[-1]}, use n_scales <= {feasible}")
    weights = np.asarray(MS_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    win = gaussian_window()
    value = None
    for i in range(n_scales):
        ssim_map, cs_map = _ssim_terms(a, b, data_range, win)
        term_map = ssim_map if i == n_scales - 1 else cs_map
        term = tn.clamp_min(tn.mean(term_map, axis=(-2, -1)), _CS_FLOOR) ** float(weights[i])
        value = term if value is None else value * term
        if i < n_scales - 1:
            a, b = tn.avg_pool2d(a), tn.avg_pool2d(b)
    return _finish(tn.mean(value), grad_path)


# --------------------------------------------------------------- Fréchet
def _sqrt_psd(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the cross term is computed from the eigenvalues of the
    symmetric matrix S_a^{1/2} S_b S_a^{1/2}, negative ones clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    eig = np.clip(np.linalg.eigvalsh(middle), 0.0, None)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(eig).sum()
    return float(max(value, 0.0))


def frechet_from_features(feats_a, feats_b):
    """Fréchet distance between Gaussian fits of two (n, d) feature sets."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    d = feats_a.shape[1]
    if feats_b.shape[1] != d:
        raise ShapeError(f"feature widths differ ({d} vs {feats_b.shape[1]})")
    for name, f in (("first", feats_a), ("second", feats_b)):
        if f.shape[0] < d + 1:
            raise ConfigError(f"{name} set has {f.shape[0]} samples; need at least {d + 1} "
                              f"for {d}-dimensional features")
    return frechet_distance(feats_a.mean(0), np.cov(feats_a, rowvar=False),
                            feats_b.mean(0), np.cov(feats_b, rowvar=False))


def frechet_feature_distance(set_a, set_b, extractor):
    """Fréchet distance between two image sets in the frozen extractor's
    pooled feature space (an FID-style statistic, not comparable to FID)."""
    return frechet_from_features(extractor.pooled_features(np.asarray(set_a)),
                                 extractor.pooled_features(np.asarray(set_b)))


# --------------------------------------------------------------- reports
@dataclass
class MetricReport:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    ms_ssim_mean: float
    ms_ssim_std: float
    ffd: float = math.nan
    n: int = 0

    @classmethod
    def from_rows(cls, rows, ffd=math.nan):
        p = np.array([min(r["psnr"], PSNR_CAP) for r in rows])
        s = np.array([r["ssim"] for r in rows])
        m = np.array([r["ms_ssim"] for r in rows])
        return cls(p.mean(), p.std(), s.mean(), s.std(), m.mean(), m.std(), ffd, len(rows))

    def formatted(self):
        return {
            "psnr": f"{self.psnr_mean:.2f}±{self.psnr_std:.2f}",
            "ssim": f"{self.ssim_mean:.4f}±{self.ssim_std:.4f}",
            "ms_ssim": f"{self.ms_ssim_mean:.4f}±{self.ms_ssim_std:.4f}",
            "ffd": "" if math.isnan(self.ffd) else f"{self.ffd:.6f}",
        }


def image_metrics(pred, target, data_range=2.0):
    return {
        "psnr": psnr(pred, target, data_range),
        "ssim": ssim(pred, target, data_range),
        "ms_ssim": ms_ssim(pred, target, data_range),
    }


CSV_FIELDS = ("sample_id", "psnr", "ssim", "ms_ssim", "ffd")


def write_report_csv(path, rows, report):
    """Per-sample rows followed by one aggregate ``mean±std`` row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r["sample_id"], repr(float(r["psnr"])), repr(float(r["ssim"])),
                        repr(float(r["ms_ssim"])), ""])
        agg = report.formatted()
        w.writerow(["aggregate", agg["psnr"], agg["ssim"], agg["ms_ssim"], agg["ffd"]])
