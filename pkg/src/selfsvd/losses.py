"""Training objectives: flow-aligned reconstruction, reference-feature
regularization, and least-squares adversarial losses.

Reductions are means (per valid pixel / per element) rather than raw sums so
the loss weights stay scale-free across crop sizes; the per-frame terms are
then summed over the clip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .core import Frame, PatchMask
from .errors import InvalidConfig, InvalidInput, NumericalError, ShapeMismatch
from .flow import FlowBackend, FlowField, flow_to_tensor, validity_mask, warp_tensor
from .maskref import expand_patch_mask


@dataclass
class LossWeights:
    lambda_reg: float = 0.05
    lambda_gan: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_gan < 0:
            raise InvalidConfig("loss weights must be >= 0")


def _image_tensor(image) -> torch.Tensor:
    """Frame / HxWx3 array / (1,3,H,W)-ish tensor -> (1,3,H,W), grads preserved."""
    if isinstance(image, torch.Tensor):
        t = image
    elif isinstance(image, Frame):
        t = torch.from_numpy(np.asarray(image.data))
    else:
        t = torch.as_tensor(np.asarray(image))
    if t.dim() == 3 and t.shape[-1] == 3 and t.shape[0] != 3:
        t = t.permute(2, 0, 1)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 3:
        raise InvalidInput(f"expected an RGB image, got shape {tuple(t.shape)}")
    return t


def _image_hwc(image) -> np.ndarray:
    """Image-like -> HxWx3 numpy view for (non-differentiable) flow estimation."""
    t = _image_tensor(image)
    return t.detach().cpu().numpy()[0].transpose(1, 2, 0)


def masked_l1(
    output: torch.Tensor, target: torch.Tensor, flow: FlowField, tau: float = 0.999
):
    """One reconstruction term: warp output toward the target by the given
    flow, mask by flow validity, mean |difference| over valid pixels.

    Returns (term, n_valid); term is 0 when the mask is empty.
    """
    v = validity_mask(flow, tau).data
    n_valid = int(v.sum())
    if n_valid == 0:
        return output.sum() * 0.0, 0
    warped = warp_tensor(output, flow_to_tensor(flow, dtype=output.dtype))
    vt = torch.from_numpy(v.astype(np.float64)).to(dtype=output.dtype)
    diff = (warped - target).abs() * vt
    return diff.sum() / (n_valid * output.shape[1]), n_valid


def rec_loss(
    outputs: Sequence,
    target,
    flow_backend: Optional[FlowBackend] = None,
    tau: float = 0.999,
    flows: Optional[Sequence[FlowField]] = None,
    counters: Optional[dict] = None,
) -> torch.Tensor:
    """Misaligned-supervision reconstruction loss, summed over frames.

    For each restored frame, flow is estimated from the target to the frame,
    the frame is backward-warped onto the target, and the masked mean absolute
    error accumulates. Pass precomputed ``flows`` to freeze alignment (the
    estimation step is treated as non-differentiable either way); frames whose
    validity mask is empty contribute 0 and bump ``counters``.
    """
    if len(outputs) == 0:
        raise InvalidInput("rec_loss needs at least one output frame")
    if flows is None:
        if flow_backend is None:
            raise InvalidInput("rec_loss needs a flow backend or precomputed flows")
        target_np = _image_hwc(target)
        flows = [flow_backend.estimate(target_np, _image_hwc(out)) for out in outputs]
    elif len(flows) != len(outputs):
        raise InvalidInput("one flow per output frame required")

    target_t = _image_tensor(target)
    total = None
    n_empty = 0
    for out, flow in zip(outputs, flows):
        out_t = _image_tensor(out)
        if out_t.shape != target_t.shape:
            raise ShapeMismatch(
                f"output {tuple(out_t.shape)} vs target {tuple(target_t.shape)}"
            )
        term, n_valid = masked_l1(out_t, target_t.to(out_t.dtype), flow, tau)
        if n_valid == 0:
            n_empty += 1
        total = term if total is None else total + term
    if counters is not None and n_empty:
        counters["all_invalid_frames"] = counters.get("all_invalid_frames", 0) + n_empty
    return total


def reg_loss(mask: Optional[PatchMask], features) -> torch.Tensor:
    """Mean |M * F| over all feature elements; mask=None means all-ones.

    Features are (B,C,h,w)/(C,h,w) tensors or (h,w,C) arrays; the patch mask
    is nearest-neighbor-expanded to the feature grid.
    """
    if not isinstance(features, torch.Tensor):
        arr = np.asarray(features)
        if arr.ndim != 3:
            raise InvalidInput(f"expected an (h,w,C) feature array, got {arr.shape}")
        features = torch.from_numpy(arr.transpose(2, 0, 1).copy())
    if mask is None:
        return features.abs().mean()
    hw = (features.shape[-2], features.shape[-1])
    m = torch.from_numpy(expand_patch_mask(mask, hw).astype(np.float64)).to(features.dtype)
    return (features * m).abs().mean()


def gan_g_loss(disc_scores) -> torch.Tensor:
    """Least-squares generator loss: 0.5 * mean((scores - 1)^2)."""
    scores = disc_scores if isinstance(disc_scores, torch.Tensor) else torch.as_tensor(disc_scores)
    return 0.5 * ((scores - 1.0) ** 2).mean()


def gan_d_loss(real_scores, fake_scores) -> torch.Tensor:
    """Least-squares discriminator loss: push real scores to 1, fake to 0."""
    real = real_scores if isinstance(real_scores, torch.Tensor) else torch.as_tensor(real_scores)
    fake = fake_scores if isinstance(fake_scores, torch.Tensor) else torch.as_tensor(fake_scores)
    return 0.5 * ((real - 1.0) ** 2).mean() + 0.5 * (fake**2).mean()


def total_loss(rec, reg, gan_g, weights: LossWeights):
    """Weighted sum of the three objectives."""
    for name, value in (("rec", rec), ("reg", reg), ("gan_g", gan_g)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if math.isnan(scalar) or math.isinf(scalar):
            raise NumericalError(f"{name} loss is {scalar}")
    return rec + weights.lambda_reg * reg + weights.lambda_gan * gan_g
