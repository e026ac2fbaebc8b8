"""
How the image metrics respond to damage
=======================================

PSNR, SSIM and MS-SSIM on one synthetic stain patch under growing noise
and blur, then the Frechet feature distance between image sets.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from rbdm.data import generate_synthetic_pair, synthetic_dataset
from rbdm.metrics import frechet_feature_distance, ms_ssim, psnr, ssim
from rbdm.model import FeatureExtractor

_, clean = generate_synthetic_pair(7, 64, 64)
rng = np.random.default_rng(0)

print("noise   psnr    ssim   ms-ssim")
for sigma in (0.0, 0.02, 0.05, 0.1, 0.2, 0.4):
    noisy = np.clip(clean + sigma * rng.standard_normal(clean.shape), -1, 1)
    p = psnr(noisy, clean)
    print(f"{sigma:5.2f}  {p:6.2f}  {ssim(noisy, clean):.4f}  {ms_ssim(noisy, clean):.4f}")

# Blur keeps the pixel error small but flattens structure, which SSIM
# notices earlier than PSNR does.
print("\nblur    psnr    ssim   ms-ssim")
for width in (0.5, 1.0, 2.0, 4.0):
    soft = gaussian_filter(clean, sigma=(0, width, width))
    print(f"{width:5.1f}  {psnr(soft, clean):6.2f}  {ssim(soft, clean):.4f}  "
          f"{ms_ssim(soft, clean):.4f}")

###############################################################################
# Set-level distance
# ------------------
# The Frechet distance compares feature statistics of two image sets. It
# needs more images than the 56-wide pooled feature vector has entries.

ext = FeatureExtractor()
a = synthetic_dataset(80, 32, seed=1).targets
b = synthetic_dataset(80, 32, seed=2).targets
print("\nffd same set        ", round(frechet_feature_distance(a, a, ext), 6))
print("ffd fresh draws     ", round(frechet_feature_distance(a, b, ext), 6))
print("ffd fresh, blurred  ", round(frechet_feature_distance(
    a, gaussian_filter(b, sigma=(0, 0, 2, 2)), ext), 6))
