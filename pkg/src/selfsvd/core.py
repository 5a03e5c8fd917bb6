"""Shared video/image/mask data model and the on-disk clip format.

A clip lives on disk as a directory of 8-bit PNGs: ``ps.png`` plus
``frame_0001.png ... frame_NNNN.png`` with consecutive indices. Datasets are
described by a tab-separated manifest with one ``<split>\\t<relative path>``
entry per line.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image

from .errors import (
    CorruptClip,
    InvalidClip,
    InvalidDataset,
    InvalidFlow,
    InvalidInput,
    MissingPSFrame,
    ShapeMismatch,
)

ImageLike = Union["Frame", np.ndarray]

_FRAME_RE = re.compile(r"^frame_(\d{4})\.png$")


def image_array(image: ImageLike) -> np.ndarray:
    """Return the underlying H x W x C (or H x W) float array of an image-like input."""
    if isinstance(image, Frame):
        return image.data
    return np.asarray(image)


@dataclass(frozen=True)
class Frame:
    """A single RGB image with intensities in [0, 1].

    Height and width must be at least 16 and divisible by 4 so that two
    stride-2 downsamplings compose exactly.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidClip(f"frame must be HxWx3, got shape {data.shape}")
        h, w = data.shape[:2]
        if h < 16 or w < 16 or h % 4 or w % 4:
            raise InvalidClip(
                f"frame dims must be >= 16 and divisible by 4, got {h}x{w}"
            )
        if not np.isfinite(data).all():
            raise InvalidClip("frame contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InvalidClip("frame intensities must lie in [0, 1]")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Clip:
    """An ordered smoky frame sequence with its designated pre-smoke frame."""

    frames: tuple
    ps_frame: Frame
    id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise InvalidClip("clip needs at least one frame")
        shape = frames[0].data.shape
        for f in frames:
            if f.data.shape != shape:
                raise ShapeMismatch("all frames in a clip must share one shape")
        if self.ps_frame.data.shape != shape:
            raise ShapeMismatch("ps frame shape differs from clip frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.ps_frame.height

    @property
    def width(self) -> int:
        return self.ps_frame.width


@dataclass(frozen=True)
class FlowField:
    """Per-pixel 2D displacement map: ``u`` horizontal, ``v`` vertical, in pixels.

    The value stored at output pixel p is the offset of its sampling location
    p + flow(p) in the source image (backward-warping convention).
    """

    u: np.ndarray
    v: np.ndarray
    src_id: str = ""
    dst_id: str = ""

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise InvalidFlow(f"u/v must be matching 2D maps, got {u.shape} vs {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise InvalidFlow("flow contains NaN/Inf")
        for a in (u, v):
            a.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple:
        return self.u.shape


def _binary(data: np.ndarray, what: str) -> np.ndarray:
    data = np.asarray(data)
    if not np.isin(data, (0, 1)).all():
        raise InvalidInput(f"{what} must be strictly binary")
    out = data.astype(np.uint8).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ValidityMask:
    """H x W binary map marking pixels whose warped content is fully in-domain."""

    data: np.ndarray

    def __post_init__(self):
        data = _binary(self.data, "validity mask")
        if data.ndim != 2:
            raise InvalidInput("validity mask must be 2D")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class PatchMask:
    """ceil(H/P) x ceil(W/P) binary map over non-overlapping P-pixel patches."""

    data: np.ndarray
    patch_size: int

    def __post_init__(self):
        data = _binary(self.data, "patch mask")
        if data.ndim != 2:
            raise InvalidInput("patch mask must be 2D")
        if self.patch_size < 1:
            raise InvalidInput("patch_size must be >= 1")
        object.__setattr__(self, "data", data)

    @property
    def grid(self) -> tuple:
        return self.data.shape


@dataclass
class Dataset:
    """A list of clips belonging to one split, rooted at a directory."""

    clips: list
    split: str
    root_path: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise InvalidDataset(f"duplicate clip ids in split '{self.split}'")

    def __len__(self) -> int:
        return len(self.clips)


def _decode_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _crop_to_multiple_of_4(data: np.ndarray, path: Path) -> np.ndarray:
    h, w = data.shape[:2]
    h4, w4 = h - h % 4, w - w % 4
    if (h4, w4) != (h, w):
        warnings.warn(
            f"{path}: {h}x{w} cropped to {h4}x{w4} (dims must divide by 4)",
            stacklevel=3,
        )
        data = data[:h4, :w4]
    return data


def load_clip(path) -> Clip:
    """Load a clip directory into memory.

    Raises:
        MissingPSFrame: no ps.png in the directory.
        CorruptClip: frame indices are not consecutive from 0001.
        ShapeMismatch: frames disagree in size.
    """
    path = Path(path)
    ps_path = path / "ps.png"
    if not ps_path.exists():
        raise MissingPSFrame(f"no ps.png in {path}")

    indices = {}
    for entry in path.iterdir():
        m = _FRAME_RE.match(entry.name)
        if m:
            indices[int(m.group(1))] = entry
    if not indices:
        raise CorruptClip(f"no frame_NNNN.png files in {path}")
    if 0 in indices:
        raise CorruptClip(f"{path}: frame indices start at 0001, found frame_0000.png")
    expected = range(1, max(indices) + 1)
    missing = [i for i in expected if i not in indices]
    if missing:
        raise CorruptClip(f"{path}: missing frame indices {missing}")

    ps_data = _crop_to_multiple_of_4(_decode_png(ps_path), ps_path)
    frames = []
    for i in expected:
        data = _crop_to_multiple_of_4(_decode_png(indices[i]), indices[i])
        if data.shape != ps_data.shape:
            raise ShapeMismatch(
                f"{indices[i]}: shape {data.shape[:2]} != ps shape {ps_data.shape[:2]}"
            )
        frames.append(Frame(data))
    return Clip(frames=tuple(frames), ps_frame=Frame(ps_data), id=path.name)


def _encode_png(data: np.ndarray, path: Path) -> None:
    quantized = np.round(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def save_clip(clip: Clip, path) -> None:
    """Write a clip as ps.png + frame_NNNN.png; 8-bit, so round-trip error <= 1/255."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _encode_png(clip.ps_frame.data, path / "ps.png")
    for i, frame in enumerate(clip.frames, start=1):
        _encode_png(frame.data, path / f"frame_{i:04d}.png")


def write_manifest(entries: Iterable, path) -> None:
    """Write ``(split, relative_path)`` pairs, one tab-separated entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{split}\t{rel}\n" for split, rel in entries]
    path.write_text("".join(lines))


def read_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise InvalidDataset(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InvalidDataset(f"{path}:{lineno}: expected '<split>\\t<path>'")
        entries.append((parts[0], parts[1]))
    return entries


def load_dataset(root, split: str, manifest_name: str = "manifest.tsv") -> Dataset:
    """Load every clip of one split listed in ``root/manifest.tsv``."""
    root = Path(root)
    entries = [e for e in read_manifest(root / manifest_name) if e[0] == split]
    if not entries:
        raise InvalidDataset(f"no '{split}' entries in {root / manifest_name}")
    clips = [load_clip(root / rel) for _, rel in entries]
    return Dataset(clips=clips, split=split, root_path=root)
