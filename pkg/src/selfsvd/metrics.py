"""Aligned PSNR/SSIM against a pre-smoke-derived target, plus a dark-channel
smoke-density proxy.

Both fidelity metrics first warp the result onto the (misaligned) target with
an estimated flow and restrict the comparison to flow-valid pixels. PSNR is
capped at 100 dB so identical inputs stay finite; SSIM uses the standard
11-tap Gaussian window on luminance and only windows fully inside the valid
region.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import Frame, ImageLike, image_array
from .errors import InvalidConfig, ShapeMismatch
from .flow import FlowBackend, validity_mask, warp_array
from .maskref import SSIM_C1, SSIM_C2, dark_channel

PSNR_CAP_DB = 100.0
_LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _aligned_pair(result: np.ndarray, target: np.ndarray, flow_backend: FlowBackend, tau: float):
    if result.shape != target.shape:
        raise ShapeMismatch(f"result {result.shape} vs target {target.shape}")
    flow = flow_backend.estimate(target, result)
    warped = warp_array(result, flow)
    valid = validity_mask(flow, tau).data.astype(bool)
    return warped, valid


def aligned_psnr(
    result: ImageLike, target: ImageLike, flow_backend: FlowBackend, tau: float = 0.999
) -> float:
    """PSNR (dB) of the flow-aligned result on valid pixels; NaN if none valid."""
    a = np.asarray(image_array(result), dtype=np.float64)
    b = np.asarray(image_array(target), dtype=np.float64)
    warped, valid = _aligned_pair(a, b, flow_backend, tau)
    if not valid.any():
        return math.nan
    mse = float(((warped - b) ** 2)[valid].mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - size // 2
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    w /= w.sum()
    return np.outer(w, w)


def _ssim_map(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> np.ndarray:
    pad = window.shape[0] // 2

    def filt(z):
        return ndimage.correlate(z, window, mode="constant")[pad:-pad, pad:-pad]

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    return ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    )


def aligned_ssim(
    result: ImageLike, target: ImageLike, flow_backend: FlowBackend, tau: float = 0.999
) -> float:
    """Mean luminance SSIM over windows fully inside the flow-valid region."""
    a = np.asarray(image_array(result), dtype=np.float64)
    b = np.asarray(image_array(target), dtype=np.float64)
    warped, valid = _aligned_pair(a, b, flow_backend, tau)
    luma_r = warped @ _LUMA
    luma_t = b @ _LUMA

    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    pad = SSIM_WINDOW // 2
    ssim = _ssim_map(luma_r, luma_t, window)
    window_valid = (
        ndimage.minimum_filter(valid.astype(np.uint8), size=SSIM_WINDOW, mode="constant")[
            pad:-pad, pad:-pad
        ]
        == 1
    )
    if not window_valid.any():
        return math.nan
    return float(ssim[window_valid].mean())


def smoke_density_proxy(frame: ImageLike, window: int = 15) -> float:
    """Mean dark channel: smoke lifts the per-window channel minimum toward
    the airlight, so higher means smokier."""
    return float(dark_channel(frame, window).mean())


def make_eval_target(
    ps: Frame,
    mode: str,
    model=None,
    flow_backend: Optional[FlowBackend] = None,
    mask_cfg=None,
    clean: Optional[Frame] = None,
) -> Frame:
    """Build the clean target: the raw PS frame, a model-enhanced PS frame, or
    the stored synthetic ground truth."""
    if mode == "original-ps":
        return ps
    if mode == "enhanced-ps":
        if model is None or flow_backend is None:
            raise InvalidConfig("enhanced-ps target needs a model and flow backend")
        from .network import step

        out, _, _ = step(model, ps, ps, None, flow_backend, mask_cfg)
        return out
    if mode == "synthetic-gt":
        if clean is None:
            raise InvalidConfig("synthetic-gt target needs the stored clean frame")
        return clean
    raise InvalidConfig(f"unknown target mode '{mode}'")


@dataclass
class FrameScore:
    clip_id: str
    frame: int
    psnr: float
    ssim: float
    density: float


@dataclass
class EvalReport:
    """Per-frame scores plus per-clip and aggregate means."""

    target_mode: str
    rows: list = field(default_factory=list)

    def add(self, clip_id: str, frame: int, psnr: float, ssim: float, density: float):
        self.rows.append(FrameScore(clip_id, frame, psnr, ssim, density))

    def per_clip(self) -> dict:
        clips: dict = {}
        for row in self.rows:
            clips.setdefault(row.clip_id, []).append(row)
        out = {}
        for clip_id in sorted(clips):
            rows = clips[clip_id]
            out[clip_id] = {
                "psnr": _nanmean([r.psnr for r in rows]),
                "ssim": _nanmean([r.ssim for r in rows]),
                "density": _nanmean([r.density for r in rows]),
                "frames": len(rows),
                "undefined_frames": sum(1 for r in rows if math.isnan(r.psnr)),
            }
        return out

    def aggregate(self) -> dict:
        per_clip = self.per_clip()
        if not per_clip:
            return {"target_mode": self.target_mode, "clips": 0}
        return {
            "target_mode": self.target_mode,
            "clips": len(per_clip),
            "psnr": _nanmean([c["psnr"] for c in per_clip.values()]),
            "ssim": _nanmean([c["ssim"] for c in per_clip.values()]),
            "density": _nanmean([c["density"] for c in per_clip.values()]),
            "undefined_frames": sum(c["undefined_frames"] for c in per_clip.values()),
        }

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip_id", "frame", "psnr", "ssim", "density"])
            for row in self.rows:
                writer.writerow(
                    [row.clip_id, row.frame, f"{row.psnr:.4f}", f"{row.ssim:.6f}", f"{row.density:.6f}"]
                )

    def write_summary(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        summary = {"aggregate": self.aggregate(), "per_clip": self.per_clip()}
        path.write_text(json.dumps(summary, indent=2, sort_keys=True))


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan
