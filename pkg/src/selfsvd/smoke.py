"""Procedural smoke synthesis: paired clean/smoky clips with exact per-frame
transmission ground truth.

Smoke composites by the scattering model S = I*t + A*(1-t) with a
heterogeneous transmission field: multi-octave value noise advected over time,
scaled by a ramp-hold-decay temporal profile. The first clean frame becomes
the untouched pre-smoke frame of every synthesized clip.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import Clip, Frame, save_clip, write_manifest
from .errors import InvalidClip, InvalidConfig
from .maskref import gaussian_blur

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)


@dataclass
class SmokeParams:
    airlight: tuple = (0.85, 0.85, 0.88)
    density_peak: float = 0.6
    noise_octaves: int = 3
    noise_scale: float = 32.0
    temporal_profile: tuple = (0, 3, 7, 12)  # ramp start, hold start, decay start/end
    drift_velocity: tuple = (1.5, 0.75)  # pixels per frame (x, y)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density_peak <= 1.0:
            raise InvalidConfig("density_peak must lie in [0, 1]")
        if any(not 0.0 <= a <= 1.0 for a in self.airlight):
            raise InvalidConfig("airlight components must lie in [0, 1]")
        bp = self.temporal_profile
        if len(bp) != 4 or any(b >= a for a, b in zip(bp[1:], bp)):
            raise InvalidConfig("temporal_profile needs 4 increasing breakpoints")
        if self.noise_octaves < 1 or self.noise_scale < 2:
            raise InvalidConfig("need noise_octaves >= 1 and noise_scale >= 2")


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic uniform [0,1) value at integer lattice points."""
    salt_mixed = np.uint64((salt * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF)
    z = ix.astype(np.uint64) * _MIX1 + iy.astype(np.uint64) * _MIX2 + salt_mixed
    z ^= z >> np.uint64(30)
    z *= _MIX2
    z ^= z >> np.uint64(27)
    z *= _MIX3
    z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(gx: np.ndarray, gy: np.ndarray, salt: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise at continuous coordinates."""
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    fx = fx * fx * (3.0 - 2.0 * fx)
    fy = fy * fy * (3.0 - 2.0 * fy)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = _hash01(x0, y0, salt)
    v01 = _hash01(x0 + 1, y0, salt)
    v10 = _hash01(x0, y0 + 1, salt)
    v11 = _hash01(x0 + 1, y0 + 1, salt)
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def temporal_profile_value(params: SmokeParams, frame_index: float) -> float:
    """Ramp 0->1, hold, decay 1->0 across the configured breakpoints."""
    bp = np.asarray(params.temporal_profile, dtype=np.float64)
    return float(np.interp(frame_index, bp, [0.0, 1.0, 1.0, 0.0]))


def transmission_field(params: SmokeParams, frame_index: int, height: int, width: int) -> np.ndarray:
    """Per-pixel transmission t in [0, 1] for one frame.

    The noise field is normalized to span [0, 1], so the frame's peak density
    equals density_peak * profile(frame_index) and t = 1 - density.
    """
    level = params.density_peak * temporal_profile_value(params, frame_index)
    if level <= 0.0:
        return np.ones((height, width), dtype=np.float64)

    yy, xx = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    dx, dy = params.drift_velocity
    xx = xx + dx * frame_index
    yy = yy + dy * frame_index

    total = np.zeros((height, width), dtype=np.float64)
    amp_sum = 0.0
    for octave in range(params.noise_octaves):
        spacing = params.noise_scale / (2.0**octave)
        amp = 0.5**octave
        salt = (params.seed << 8) + octave + 1
        total += amp * _value_noise(xx / spacing, yy / spacing, salt)
        amp_sum += amp
    total /= amp_sum

    lo, hi = total.min(), total.max()
    field01 = np.full_like(total, 0.5) if hi <= lo else (total - lo) / (hi - lo)
    return 1.0 - level * field01


def composite_smoke(clean: np.ndarray, t: np.ndarray, airlight) -> np.ndarray:
    """Scattering composite S = I*t + A*(1-t), per channel."""
    a = np.asarray(airlight, dtype=clean.dtype)
    t3 = np.asarray(t, dtype=clean.dtype)[..., None]
    return clean * t3 + a * (1.0 - t3)


def synth_smoke(clean: Clip, params: SmokeParams) -> Clip:
    """Composite smoke over every clean frame after the first; the first clean
    frame becomes the (bit-exact) pre-smoke frame."""
    if len(clean) < 2:
        raise InvalidClip("smoke synthesis needs at least two clean frames")
    smoky = []
    for k, frame in enumerate(clean.frames[1:], start=1):
        t = transmission_field(params, k, frame.height, frame.width).astype(np.float32)
        composite = composite_smoke(frame.data, t, params.airlight)
        smoky.append(Frame(np.clip(composite, 0.0, 1.0)))
    return Clip(frames=tuple(smoky), ps_frame=clean.frames[0], id=clean.id)


def recover_clean(smoky: np.ndarray, t: np.ndarray, airlight) -> np.ndarray:
    """Invert the scattering model where t > 0 (exact-recovery oracle)."""
    a = np.asarray(airlight, dtype=np.float64)
    t3 = np.maximum(np.asarray(t, dtype=np.float64), 1e-12)[..., None]
    return (np.asarray(smoky, dtype=np.float64) - a * (1.0 - t3)) / t3


def random_clean_clip(
    height: int, width: int, n_frames: int, seed: int, max_shift: int = 2
) -> Clip:
    """Smooth random texture translated by an integer per-clip velocity.

    Periodic rolling keeps every frame fully covered, which gives block
    matching an exactly recoverable motion and the recurrent model a coherent
    temporal signal.
    """
    rng = np.random.default_rng(seed)
    base = rng.random((height, width, 3))
    for ch in range(3):
        base[..., ch] = gaussian_blur(base[..., ch], 7, 2.0)
    lo, hi = base.min(), base.max()
    base = 0.05 + 0.9 * (base - lo) / max(hi - lo, 1e-9)

    while True:
        vx, vy = rng.integers(-max_shift, max_shift + 1, size=2)
        if vx or vy:
            break
    frames = [
        Frame(np.roll(base, (int(k * vy), int(k * vx)), axis=(0, 1)).astype(np.float32))
        for k in range(n_frames)
    ]
    return Clip(frames=tuple(frames), ps_frame=frames[0], id=f"clean_{seed:04d}")


def write_clean_library(
    root, n_clips: int, height: int, width: int, n_frames: int, seed: int = 0, max_shift: int = 2
):
    """Generate procedural clean clips under root/<clip_id>/ for synthesis."""
    root = Path(root)
    paths = []
    for i in range(n_clips):
        clip = random_clean_clip(height, width, n_frames, seed=seed * 10_000 + i, max_shift=max_shift)
        save_clip(clip, root / clip.id)
        paths.append(root / clip.id)
    return paths


def _save_transmission(t: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(t, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def load_transmission(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 65535.0


def build_dataset(
    clean_root,
    out_root,
    params_grid: Sequence[SmokeParams],
    split_ratio: float = 0.8,
    seed: int = 0,
) -> Path:
    """Synthesize a paired dataset and write its manifest.

    Each clean clip directory under clean_root becomes out_root/clean/<id>
    (a copy) and out_root/smoky/<id> (smoked frames + t_NNNN.png transmission
    maps + params.json). The manifest lists smoky clip paths with a
    deterministic seeded train/test split. Returns the manifest path.
    """
    from .core import load_clip  # local import keeps module load light

    clean_root = Path(clean_root)
    out_root = Path(out_root)
    clip_dirs = sorted(p for p in clean_root.iterdir() if (p / "ps.png").exists())
    if not clip_dirs:
        raise InvalidConfig(f"no clean clips under {clean_root}")
    if not params_grid:
        raise InvalidConfig("params_grid must not be empty")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clip_dirs))
    n_train = int(len(clip_dirs) * split_ratio)
    splits = {}
    for rank, idx in enumerate(order):
        splits[clip_dirs[idx].name] = "train" if rank < n_train else "test"

    entries = []
    for i, clip_dir in enumerate(clip_dirs):
        clean = load_clip(clip_dir)
        grid_idx = int(rng.integers(len(params_grid)))
        params = SmokeParams(**{**asdict(params_grid[grid_idx]), "seed": seed * 100_003 + i})
        smoky = synth_smoke(clean, params)

        save_clip(clean, out_root / "clean" / clean.id)
        smoky_dir = out_root / "smoky" / clean.id
        save_clip(smoky, smoky_dir)
        for k in range(1, len(clean)):
            t = transmission_field(params, k, clean.height, clean.width)
            _save_transmission(t, smoky_dir / f"t_{k:04d}.png")
        sidecar = {
            "clip_id": clean.id,
            "clean_path": str(Path("..") / ".." / "clean" / clean.id),
            "params": asdict(params),
        }
        (smoky_dir / "params.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        entries.append((splits[clean.id], str(Path("smoky") / clean.id)))

    manifest = out_root / "manifest.tsv"
    write_manifest(sorted(entries, key=lambda e: e[1]), manifest)
    return manifest


def paired_clean_dir(smoky_dir) -> Path:
    """Resolve the clean twin of a synthesized smoky clip directory."""
    smoky_dir = Path(smoky_dir)
    sidecar = smoky_dir / "params.json"
    if sidecar.exists():
        rel = json.loads(sidecar.read_text()).get("clean_path")
        if rel:
            return (smoky_dir / rel).resolve()
    return smoky_dir.parent.parent / "clean" / smoky_dir.name
