"""Independent brute-force oracles used across the test suite.

Everything here is written as plain nested loops / direct formula evaluation,
deliberately kept separate from the library's vectorized implementations.
"""

import math

import numpy as np

from selfsvd.core import Clip, Frame


def bilinear_warp_reference(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel bilinear sampling at (x+u, y+v) with zero padding."""
    h, w = image.shape[:2]
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    nc = img.shape[2]
    out = np.zeros_like(img, dtype=np.float64)

    def sample(yy, xx, c):
        if 0 <= yy < h and 0 <= xx < w:
            return float(img[yy, xx, c])
        return 0.0

    for y in range(h):
        for x in range(w):
            sx = x + float(u[y, x])
            sy = y + float(v[y, x])
            x0 = math.floor(sx)
            y0 = math.floor(sy)
            wx = sx - x0
            wy = sy - y0
            for c in range(nc):
                out[y, x, c] = (
                    (1 - wy) * (1 - wx) * sample(y0, x0, c)
                    + (1 - wy) * wx * sample(y0, x0 + 1, c)
                    + wy * (1 - wx) * sample(y0 + 1, x0, c)
                    + wy * wx * sample(y0 + 1, x0 + 1, c)
                )
    return out[..., 0] if squeeze else out


def validity_reference(u: np.ndarray, v: np.ndarray, tau: float) -> np.ndarray:
    """Definitional validity mask: sgn(max(0, warp(1, flow) - tau)) per pixel."""
    warped = bilinear_warp_reference(np.ones(u.shape), u, v)
    out = np.zeros(u.shape, dtype=np.uint8)
    for y in range(u.shape[0]):
        for x in range(u.shape[1]):
            out[y, x] = 1 if max(0.0, warped[y, x] - tau) > 0.0 else 0
    return out


def dark_channel_reference(image: np.ndarray, window: int) -> np.ndarray:
    """Nested-loop min over channels and an edge-replicated window."""
    h, w = image.shape[:2]
    half = window // 2
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            lo = math.inf
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    lo = min(lo, float(image[yy, xx].min()))
            out[y, x] = lo
    return out


def gaussian_kernel_2d(kernel: int, sigma: float) -> np.ndarray:
    offs = np.arange(kernel) - kernel // 2
    w1 = np.exp(-0.5 * (offs / sigma) ** 2)
    w1 /= w1.sum()
    return np.outer(w1, w1)


def gaussian_blur_reference(map2d: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    """Dense 2D convolution with edge-replicated padding."""
    k2d = gaussian_kernel_2d(kernel, sigma)
    h, w = map2d.shape
    half = kernel // 2
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += k2d[dy + half, dx + half] * float(map2d[yy, xx])
            out[y, x] = acc
    return out


def patch_ssim_reference(a: np.ndarray, b: np.ndarray, patch: int) -> np.ndarray:
    """Whole-patch SSIM per non-overlapping patch of two preprocessed maps,
    population statistics, standard constants on [0, 1]."""
    c1 = 0.01**2
    c2 = 0.03**2
    gh = math.ceil(a.shape[0] / patch)
    gw = math.ceil(a.shape[1] / patch)
    ap = np.pad(a, ((0, gh * patch - a.shape[0]), (0, gw * patch - a.shape[1])), mode="edge")
    bp = np.pad(b, ((0, gh * patch - b.shape[0]), (0, gw * patch - b.shape[1])), mode="edge")
    out = np.empty((gh, gw), dtype=np.float64)
    for gy in range(gh):
        for gx in range(gw):
            pa = ap[gy * patch : (gy + 1) * patch, gx * patch : (gx + 1) * patch].astype(np.float64)
            pb = bp[gy * patch : (gy + 1) * patch, gx * patch : (gx + 1) * patch].astype(np.float64)
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a = (pa * pa).mean() - mu_a * mu_a
            var_b = (pb * pb).mean() - mu_b * mu_b
            cov = (pa * pb).mean() - mu_a * mu_b
            out[gy, gx] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            )
    return out


def sad_flow_reference(src: np.ndarray, dst: np.ndarray, block: int, radius: int):
    """Triple-loop exhaustive block matching with the documented tie-break:
    min SAD, then min displacement magnitude, then search row-major order."""
    h, w = src.shape[:2]
    src3 = src[..., None] if src.ndim == 2 else src
    dst3 = dst[..., None] if dst.ndim == 2 else dst
    nby = math.ceil(h / block)
    nbx = math.ceil(w / block)
    u = np.zeros((h, w), dtype=np.float32)
    v = np.zeros((h, w), dtype=np.float32)
    for by in range(nby):
        for bx in range(nbx):
            best = None
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    sad = 0.0
                    for y in range(by * block, min((by + 1) * block, h)):
                        for x in range(bx * block, min((bx + 1) * block, w)):
                            yy, xx = y + dy, x + dx
                            for c in range(src3.shape[2]):
                                val = (
                                    float(dst3[yy, xx, c])
                                    if 0 <= yy < h and 0 <= xx < w
                                    else 0.0
                                )
                                sad += abs(float(src3[y, x, c]) - val)
                    cand = (sad, dy * dy + dx * dx)
                    if best is None or cand < (best[0], best[1]):
                        best = (sad, dy * dy + dx * dx, dy, dx)
            _, _, dy, dx = best
            u[by * block : (by + 1) * block, bx * block : (bx + 1) * block] = dx
            v[by * block : (by + 1) * block, bx * block : (bx + 1) * block] = dy
    return u, v


def random_frame(rng: np.random.Generator, h: int = 32, w: int = 32) -> Frame:
    return Frame(rng.random((h, w, 3)).astype(np.float32))


def random_clip(rng: np.random.Generator, n: int = 3, h: int = 32, w: int = 32, clip_id="clip"):
    frames = tuple(random_frame(rng, h, w) for _ in range(n))
    return Clip(frames=frames, ps_frame=random_frame(rng, h, w), id=clip_id)
