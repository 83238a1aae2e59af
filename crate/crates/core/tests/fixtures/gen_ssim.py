"""Reference SSIM values from scikit-image for the Rust implementation.

Gaussian window (sigma 1.5, truncated at radius 5), population statistics,
data range 1.0, mean over the valid region. Run from this directory:

    python3 gen_ssim.py > ssim_reference.json
"""

import json

import numpy as np
from skimage.metrics import structural_similarity

rng = np.random.default_rng(20240611)
pairs = []
for i in range(20):
    h, w = int(rng.integers(11, 33)), int(rng.integers(11, 33))
    a = rng.random((h, w))
    # Mix in a correlated copy so values cover the whole range.
    mix = i / 19.0
    b = np.clip(mix * a + (1.0 - mix) * rng.random((h, w)) + rng.normal(0.0, 0.05, (h, w)), 0.0, 1.0)
    s = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
    )
    pairs.append({"height": h, "width": w, "a": a.ravel().tolist(), "b": b.ravel().tolist(), "ssim": float(s)})

print(json.dumps({"pairs": pairs}))
