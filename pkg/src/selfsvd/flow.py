"""Optical-flow estimation, backward warping, and flow-validity masking.

Sign convention: the flow stored at output pixel p gives the source sampling
location ``p + flow(p)`` in the image being warped. Out-of-domain samples use
zero padding, which is what makes the validity mask meaningful (a clamped
border would always look valid).

Two backends implement the same interface: an exhaustive block-matching
estimator that needs no pretrained weights, and an adapter around an external
flow model.
"""

from __future__ import annotations

import hashlib
import importlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .core import FlowField, Frame, ImageLike, ValidityMask, image_array
from .errors import InvalidConfig, InvalidFlow, ShapeMismatch

try:
    import numba

    @numba.njit(cache=True, parallel=True)
    def _sad_costs(a, bz, bs, r):  # pragma: no cover - exercised via estimate()
        side = 2 * r + 1
        hp, wp, nc = a.shape
        nby, nbx = hp // bs, wp // bs
        costs = np.zeros((side * side, nby, nbx), np.float32)
        for by in numba.prange(nby):
            for bx in range(nbx):
                y0, x0 = by * bs, bx * bs
                for k in range(side * side):
                    dy = k // side
                    dx = k % side
                    s = np.float32(0.0)
                    for yy in range(bs):
                        for xx in range(bs):
                            for c in range(nc):
                                s += abs(
                                    a[y0 + yy, x0 + xx, c]
                                    - bz[y0 + yy + dy, x0 + xx + dx, c]
                                )
                    costs[k, by, bx] = s
        return costs

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


class FlowBackend:
    """Estimates dense flow between two same-shape frames."""

    def estimate(self, src: ImageLike, dst: ImageLike) -> FlowField:
        raise NotImplementedError


@dataclass
class BlockMatchingBackend(FlowBackend):
    """Exhaustive SAD block matching over a square search window.

    Per block, the displacement minimizing the sum of absolute differences
    wins; ties break toward the smallest displacement magnitude, then search
    row-major order. The per-block displacement is replicated to pixels.
    """

    search_radius: int = 8
    block_size: int = 8

    def __post_init__(self):
        if self.search_radius < 1 or self.block_size < 1:
            raise InvalidConfig("search_radius and block_size must be >= 1")
        # displacement list in row-major order, stable-sorted by magnitude so that
        # argmin picks the tie-break winner first
        r = self.search_radius
        dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        dy, dx = dy.ravel(), dx.ravel()
        self._order = np.argsort(dy * dy + dx * dx, kind="stable")
        self._dy = dy[self._order]
        self._dx = dx[self._order]

    def estimate(self, src: ImageLike, dst: ImageLike) -> FlowField:
        a = np.asarray(image_array(src), dtype=np.float32)
        b = np.asarray(image_array(dst), dtype=np.float32)
        if a.shape != b.shape:
            raise ShapeMismatch(f"src {a.shape} vs dst {b.shape}")
        if a.ndim == 2:
            a, b = a[..., None], b[..., None]

        h, w = a.shape[:2]
        bs, r = self.block_size, self.search_radius
        hp = -(-h // bs) * bs
        wp = -(-w // bs) * bs
        pad_hw = ((0, hp - h), (0, wp - w), (0, 0))
        a = np.pad(a, pad_hw, mode="edge")
        b = np.pad(b, pad_hw, mode="edge")
        bz = np.pad(b, ((r, r), (r, r), (0, 0)))  # zero padding outside the domain

        nby, nbx = hp // bs, wp // bs
        side = 2 * r + 1
        if _HAVE_NUMBA:
            costs = _sad_costs(a, bz, bs, r)
        else:
            a_t = a.transpose(2, 0, 1)
            # (side, side, C, hp, wp) strided view: one shifted copy per displacement
            windows = np.lib.stride_tricks.sliding_window_view(bz, (hp, wp), axis=(0, 1))
            # chunk over dy rows to bound the materialized |diff| buffer
            costs = np.empty((side * side, nby, nbx), dtype=np.float32)
            for row in range(side):
                diff = np.abs(windows[row] - a_t[None]).sum(axis=1)  # (side, hp, wp)
                costs[row * side : (row + 1) * side] = diff.reshape(
                    side, nby, bs, nbx, bs
                ).sum(axis=(2, 4))

        best = costs[self._order].argmin(axis=0)
        u = self._dx[best].astype(np.float32)
        v = self._dy[best].astype(np.float32)
        u = np.repeat(np.repeat(u, bs, axis=0), bs, axis=1)[:h, :w]
        v = np.repeat(np.repeat(v, bs, axis=0), bs, axis=1)[:h, :w]
        return FlowField(u=u, v=v)


class ExternalBackend(FlowBackend):
    """Adapter around a pretrained flow model exposed as a callable.

    The callable takes (src, dst) float arrays of shape HxWx3 and returns a
    (u, v) pair or an HxWx2 / 2xHxW array of pixel displacements.
    """

    def __init__(self, fn: Callable):
        self._fn = fn

    def estimate(self, src: ImageLike, dst: ImageLike) -> FlowField:
        a = image_array(src)
        b = image_array(dst)
        if a.shape != b.shape:
            raise ShapeMismatch(f"src {a.shape} vs dst {b.shape}")
        out = self._fn(np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32))
        if isinstance(out, tuple):
            u, v = out
        else:
            out = np.asarray(out)
            if out.ndim == 3 and out.shape[-1] == 2:
                u, v = out[..., 0], out[..., 1]
            elif out.ndim == 3 and out.shape[0] == 2:
                u, v = out[0], out[1]
            else:
                raise InvalidFlow(f"external backend returned shape {out.shape}")
        u = np.asarray(u, dtype=np.float32)
        if u.shape != a.shape[:2]:
            raise ShapeMismatch(
                f"external backend flow {u.shape} does not match frames {a.shape[:2]}"
            )
        return FlowField(u=u, v=np.asarray(v, dtype=np.float32))


class MemoizedBackend(FlowBackend):
    """Content-addressed LRU cache around a backend.

    Flow estimation is pure, so identical (src, dst) pairs can reuse the
    stored field bit-for-bit. The training loop re-queries the same
    input-frame pairs every iteration; model outputs never repeat and just
    cycle through the cache.
    """

    def __init__(self, inner: FlowBackend, max_entries: int = 4096):
        self.inner = inner
        self.max_entries = max_entries
        self._cache: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def _key(self, a: np.ndarray, b: np.ndarray):
        ha = hashlib.blake2b(a.tobytes(), digest_size=16).digest()
        hb = hashlib.blake2b(b.tobytes(), digest_size=16).digest()
        return (ha, hb, a.shape, b.shape)

    def estimate(self, src: ImageLike, dst: ImageLike) -> FlowField:
        a = np.ascontiguousarray(image_array(src), dtype=np.float32)
        b = np.ascontiguousarray(image_array(dst), dtype=np.float32)
        key = self._key(a, b)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            self.hits += 1
            return hit
        flow = self.inner.estimate(a, b)
        self.misses += 1
        self._cache[key] = flow
        if len(self._cache) > self.max_entries:
            self._cache.popitem(last=False)
        return flow


def _torchscript_flow(module) -> Callable:
    """Wrap a scripted flow model mapping two (1,3,H,W) tensors to (1,2,H,W)."""

    def fn(src: np.ndarray, dst: np.ndarray):
        a = torch.from_numpy(src).permute(2, 0, 1).unsqueeze(0)
        b = torch.from_numpy(dst).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            out = module(a, b)
        flow = out.squeeze(0).cpu().numpy()
        return flow[0], flow[1]

    return fn


def load_external_backend(source: str) -> ExternalBackend:
    """Build an ExternalBackend from a checkpoint path or an entry point.

    A path to a TorchScript archive (.pt/.pth/.ts) is loaded with torch.jit;
    otherwise the source must look like ``package.module:attribute`` naming a
    callable (src, dst) -> flow.
    """
    from pathlib import Path

    path = Path(source)
    if source.endswith((".pt", ".pth", ".ts")) or path.exists():
        try:
            module = torch.jit.load(str(path), map_location="cpu")
        except (OSError, RuntimeError, ValueError) as exc:
            raise InvalidConfig(f"cannot load flow checkpoint '{source}': {exc}") from exc
        return ExternalBackend(_torchscript_flow(module))
    if ":" not in source:
        raise InvalidConfig(
            f"external flow backend must be a checkpoint path or 'module:attr', got '{source}'"
        )
    mod_name, attr = source.split(":", 1)
    try:
        fn = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise InvalidConfig(f"cannot load external flow backend '{source}': {exc}") from exc
    return ExternalBackend(fn)


def estimate_flow(backend: FlowBackend, src: ImageLike, dst: ImageLike) -> FlowField:
    """Estimate flow such that sampling dst at (x+u, y+v) approximates src."""
    return backend.estimate(src, dst)


def _bilinear_zero_pad(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros(sx.shape + (img.shape[2],), dtype=img.dtype)
    taps = (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    )
    for yi, xi, weight in taps:
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        out += weight * img[yc, xc] * inside[..., None]
    return out[..., 0] if squeeze else out


def warp_array(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp an HxW or HxWxC array by a same-size flow field."""
    if flow.shape != image.shape[:2]:
        raise ShapeMismatch(f"flow {flow.shape} vs image {image.shape[:2]}")
    h, w = flow.shape
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    return _bilinear_zero_pad(image, xx + flow.u, yy + flow.v)


def warp_tensor(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp a (B,C,H,W) tensor by a (B,2,H,W) flow; differentiable in x.

    flow[:, 0] is the horizontal offset u, flow[:, 1] the vertical offset v.
    Uses the same bilinear zero-padding semantics as warp_array.
    """
    if torch.isnan(flow).any():
        raise InvalidFlow("flow contains NaN")
    b, c, h, w = x.shape
    if flow.shape != (b, 2, h, w):
        raise ShapeMismatch(f"flow {tuple(flow.shape)} vs input {tuple(x.shape)}")
    yy, xx = torch.meshgrid(
        torch.arange(h, device=x.device, dtype=x.dtype),
        torch.arange(w, device=x.device, dtype=x.dtype),
        indexing="ij",
    )
    sx = xx.unsqueeze(0) + flow[:, 0]
    sy = yy.unsqueeze(0) + flow[:, 1]
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()

    flat = x.reshape(b, c, h * w)
    out = torch.zeros_like(x)
    for yi, xi, weight in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        inside = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).unsqueeze(1)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, h * w)
        tap = torch.gather(flat, 2, idx.expand(b, c, h * w)).reshape(b, c, h, w)
        out = out + weight * inside * tap
    return out


def backward_warp(image, flow):
    """Backward-warp an image, feature map, or tensor; returns the input's type.

    Accepts a Frame, an HxW / HxWxC numpy array (with a FlowField), or a
    (B,C,H,W) torch tensor (with a (B,2,H,W) flow tensor).
    """
    if isinstance(image, torch.Tensor):
        return warp_tensor(image, flow)
    if not isinstance(flow, FlowField):
        raise InvalidFlow("numpy warping requires a FlowField")
    if isinstance(image, Frame):
        return Frame(warp_array(image.data, flow))
    return warp_array(np.asarray(image), flow)


def validity_mask(flow: FlowField, tau: float = 0.999) -> ValidityMask:
    """Mark pixels where the backward-warped all-ones image stays above tau."""
    if not 0.0 < tau < 1.0:
        raise InvalidConfig(f"tau must lie in (0, 1), got {tau}")
    ones = np.ones(flow.shape, dtype=np.float64)
    warped = warp_array(ones, flow)
    return ValidityMask((warped > tau).astype(np.uint8))


def flow_to_tensor(flow: FlowField, device=None, dtype=torch.float32) -> torch.Tensor:
    """Stack a FlowField into a (1,2,H,W) constant tensor (no gradient)."""
    return torch.from_numpy(np.stack([flow.u, flow.v])).unsqueeze(0).to(
        device=device, dtype=dtype
    )


def resize_flow(flow: torch.Tensor, size: tuple) -> torch.Tensor:
    """Bilinearly resize a (B,2,H,W) flow and rescale displacements to match."""
    _, _, h, w = flow.shape
    out_h, out_w = size
    resized = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor(
        [out_w / w, out_h / h], device=flow.device, dtype=flow.dtype
    ).view(1, 2, 1, 1)
    return resized * scale
