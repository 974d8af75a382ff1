"""Reference SSIM values for formula-defined image pairs (skimage)."""
import numpy as np
from skimage.metrics import structural_similarity

H, W = 32, 40
y, x = np.mgrid[0:H, 0:W].astype(np.float64)

def pairs():
    a = 0.5 + 0.4 * np.sin(0.3 * x + 0.2 * y)
    yield "smooth_affine", a, 0.8 * a + 0.1 + 0.05 * np.cos(1.3 * x - 0.7 * y)
    ramp = (x + W * y) / (H * W - 1)
    yield "inverted_ramp", ramp, 1.0 - ramp
    t1 = 0.5 + 0.5 * np.sin(0.37 * x * x + 1.1 * y)
    t2 = 0.5 + 0.5 * np.sin(0.37 * x * x + 1.1 * y + 0.3 * np.cos(0.9 * y * x / 7.0))
    yield "texture", t1, t2
    yield "identical", t1, t1.copy()

for name, a, b in pairs():
    s = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False)
    print(f"{name} {s:.15f}")
