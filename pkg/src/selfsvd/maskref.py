"""Masked-reference generation: detect where the warped reference disagrees
with the smoky frame and gate those reference features out.

Pipeline: align the reference to the smoky frame, take the dark channel of
both, blur with a large Gaussian kernel to suppress smoke texture, then score
non-overlapping patches with whole-patch SSIM. Patches scoring at or below the
threshold are masked (0) and their reference features excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .core import Frame, ImageLike, PatchMask, image_array
from .errors import InvalidConfig, ShapeMismatch
from .flow import FlowBackend, warp_array

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MaskGenConfig:
    """Knobs of the mask generator.

    patch_size and epsilon follow the method defaults (8 px, 0.92); the dark
    channel window and blur kernel only need to be "large" relative to the
    patch scale and are configurable.
    """

    patch_size: int = 8
    epsilon: float = 0.92
    dcp_window: int = 15
    blur_kernel: int = 21
    blur_sigma: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidConfig(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.patch_size < 1:
            raise InvalidConfig("patch_size must be >= 1")
        if self.blur_sigma <= 0:
            raise InvalidConfig("blur_sigma must be > 0")


def dark_channel(image: ImageLike, window: int) -> np.ndarray:
    """Min over channels and a window x window neighborhood (edge-replicated)."""
    if window < 1 or window % 2 == 0:
        raise InvalidConfig(f"dark channel window must be odd and >= 1, got {window}")
    data = np.asarray(image_array(image), dtype=np.float64)
    channel_min = data.min(axis=2) if data.ndim == 3 else data
    if window == 1:
        return channel_min.copy()
    return ndimage.minimum_filter(channel_min, size=window, mode="nearest")


def gaussian_blur(map2d: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication; weights sum to 1."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidConfig(f"blur kernel must be odd and >= 1, got {kernel}")
    if sigma <= 0:
        raise InvalidConfig(f"blur sigma must be > 0, got {sigma}")
    offsets = np.arange(kernel) - kernel // 2
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    weights /= weights.sum()
    data = np.asarray(map2d, dtype=np.float64)
    out = ndimage.correlate1d(data, weights, axis=0, mode="nearest")
    return ndimage.correlate1d(out, weights, axis=1, mode="nearest")


def _pad_to_multiple(map2d: np.ndarray, p: int) -> np.ndarray:
    h, w = map2d.shape
    return np.pad(map2d, ((0, -h % p), (0, -w % p)), mode="edge")


def _patch_stats(map2d: np.ndarray, p: int):
    gh, gw = map2d.shape[0] // p, map2d.shape[1] // p
    patches = map2d.reshape(gh, p, gw, p)
    mean = patches.mean(axis=(1, 3))
    sq_mean = (patches**2).mean(axis=(1, 3))
    return patches, mean, sq_mean


def patch_ssim_mask(ref_warped: ImageLike, smoky: ImageLike, cfg: MaskGenConfig) -> PatchMask:
    """Per-patch binary mask: 1 where whole-patch SSIM of the preprocessed
    (dark channel + blur) inputs strictly exceeds cfg.epsilon.

    Patch statistics use population (1/N) normalization with the standard
    constants on the [0, 1] range.
    """
    a = image_array(ref_warped)
    b = image_array(smoky)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ref {a.shape} vs smoky {b.shape}")

    def prep(x):
        dc = dark_channel(x, cfg.dcp_window) if x.ndim == 3 else np.asarray(x, np.float64)
        return _pad_to_multiple(gaussian_blur(dc, cfg.blur_kernel, cfg.blur_sigma), cfg.patch_size)

    pa = prep(a)
    pb = prep(b)
    patches_a, mu_a, sq_a = _patch_stats(pa, cfg.patch_size)
    patches_b, mu_b, sq_b = _patch_stats(pb, cfg.patch_size)
    var_a = sq_a - mu_a**2
    var_b = sq_b - mu_b**2
    cov = (patches_a * patches_b).mean(axis=(1, 3)) - mu_a * mu_b

    ssim = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return PatchMask((ssim > cfg.epsilon).astype(np.uint8), patch_size=cfg.patch_size)


def generate_mask(
    ref: ImageLike, smoky: ImageLike, flow_backend: FlowBackend, cfg: MaskGenConfig
):
    """Align ref to the smoky frame, then mask patches that still disagree.

    Returns the patch mask together with the warped reference image.
    """
    ref_data = image_array(ref)
    smoky_data = image_array(smoky)
    if ref_data.shape != smoky_data.shape:
        raise ShapeMismatch(f"ref {ref_data.shape} vs smoky {smoky_data.shape}")
    flow = flow_backend.estimate(smoky_data, ref_data)
    warped = warp_array(ref_data, flow).astype(np.float32)
    mask = patch_ssim_mask(warped, smoky_data, cfg)
    return mask, Frame(np.clip(warped, 0.0, 1.0))


def expand_patch_mask(mask: PatchMask, feature_hw: tuple) -> np.ndarray:
    """Nearest-neighbor expansion of a patch mask to a quarter-resolution
    feature grid (one P-pixel patch covers P/4 x P/4 feature cells)."""
    fh, fw = feature_hw
    gh, gw = mask.grid
    if (-(-4 * fh // mask.patch_size), -(-4 * fw // mask.patch_size)) != (gh, gw):
        raise ShapeMismatch(
            f"patch grid {mask.grid} (patch {mask.patch_size}) does not cover a "
            f"{fh}x{fw} quarter-resolution feature grid"
        )
    rows = np.minimum(np.arange(fh) * 4 // mask.patch_size, gh - 1)
    cols = np.minimum(np.arange(fw) * 4 // mask.patch_size, gw - 1)
    return mask.data[np.ix_(rows, cols)]


def mask_features(features, mask: PatchMask):
    """Gate reference features: zero all channels of feature cells whose patch
    is masked. Accepts (B,C,h,w)/(C,h,w) tensors or (h,w,C) arrays."""
    if isinstance(features, torch.Tensor):
        fh, fw = features.shape[-2], features.shape[-1]
        m = torch.from_numpy(expand_patch_mask(mask, (fh, fw)).astype(np.float32))
        return features * m.to(device=features.device, dtype=features.dtype)
    arr = np.asarray(features)
    m = expand_patch_mask(mask, arr.shape[:2]).astype(arr.dtype)
    return arr * m[..., None]
