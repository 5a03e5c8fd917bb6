"""Unidirectional recurrent restoration network and PatchGAN discriminator.

The generator has five parts: separate encoders for the smoky frame and the
reference input (two stride-2 convs + residual blocks each), the masked-ref
branch (reference features warped by image-level flow and gated by the patch
mask), flow-based alignment of the previous hidden state, a fusion module
(channel-reduction conv + residual blocks), and a reconstruction module
(residual blocks, two depth-to-space x2 upsamplings, final conv) whose output
is added to the input frame and clamped to [0, 1].

No normalization layers anywhere in the generator, so it stays translation
consistent and the zero-initialized final conv makes an untrained model an
exact identity.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core import Frame, FlowField, PatchMask
from .errors import InvalidConfig, ShapeMismatch, StateMismatch
from .flow import FlowBackend, flow_to_tensor, resize_flow, warp_tensor
from .maskref import MaskGenConfig, expand_patch_mask, generate_mask


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    The full variant uses 64 channels with 5/5/60/5 residual blocks in the
    encoder / masked-ref branch / fusion / reconstruction modules; the small
    variant 32 channels with 3/3/8/3. The tiny variant is for tests and
    desk-scale experiments.
    """

    variant: str = "full"
    channels: int = 64
    enc_blocks: int = 5
    maskref_blocks: int = 5
    fusion_blocks: int = 60
    recon_blocks: int = 5
    use_ref: bool = True
    zero_init_final: bool = True

    def __post_init__(self):
        if self.channels < 8:
            raise InvalidConfig("channels must be >= 8")
        for name in ("enc_blocks", "maskref_blocks", "fusion_blocks", "recon_blocks"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")

    @classmethod
    def small(cls, **kw) -> "NetworkConfig":
        return cls(
            variant="small",
            channels=32,
            enc_blocks=3,
            maskref_blocks=3,
            fusion_blocks=8,
            recon_blocks=3,
            **kw,
        )

    @classmethod
    def tiny(cls, channels: int = 16, **kw) -> "NetworkConfig":
        return cls(
            variant="tiny",
            channels=channels,
            enc_blocks=1,
            maskref_blocks=1,
            fusion_blocks=2,
            recon_blocks=1,
            **kw,
        )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return x + self.conv2(self.relu(self.conv1(x)))


class FrameEncoder(nn.Module):
    """Two stride-2 convs down to quarter resolution, then residual blocks."""

    def __init__(self, channels: int, n_blocks: int):
        super().__init__()
        self.down1 = nn.Conv2d(3, channels, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.act = nn.LeakyReLU(0.1, inplace=True)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])

    def forward(self, x):
        x = self.act(self.down1(x))
        x = self.act(self.down2(x))
        return self.blocks(x)


class DesmokeNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.encoder_smoky = FrameEncoder(c, cfg.enc_blocks)
        if cfg.use_ref:
            self.encoder_ref = FrameEncoder(c, cfg.maskref_blocks)
        fuse_in = 3 * c if cfg.use_ref else 2 * c
        self.fuse_conv = nn.Conv2d(fuse_in, c, 3, padding=1)
        self.fuse_act = nn.LeakyReLU(0.1, inplace=True)
        self.fusion = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.fusion_blocks)])
        self.recon = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.recon_blocks)])
        self.up1 = nn.Conv2d(c, 4 * c, 3, padding=1)
        self.up2 = nn.Conv2d(c, 4 * c, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.final = nn.Conv2d(c, 3, 3, padding=1)
        if cfg.zero_init_final:
            nn.init.zeros_(self.final.weight)
            nn.init.zeros_(self.final.bias)

    def encode(self, frame: torch.Tensor, which: str) -> torch.Tensor:
        """Quarter-resolution features of a (B,3,H,W) frame batch."""
        if frame.shape[-2] % 4 or frame.shape[-1] % 4:
            raise ShapeMismatch(f"frame dims must divide by 4, got {tuple(frame.shape)}")
        if which == "smoky":
            return self.encoder_smoky(frame)
        if which == "ref":
            if not self.cfg.use_ref:
                raise InvalidConfig("model was built without a reference branch")
            return self.encoder_ref(frame)
        raise InvalidConfig(f"unknown encoder '{which}'")

    def forward_step(
        self,
        smoky: torch.Tensor,
        ref_feat: Optional[torch.Tensor],
        flow_ref_q: Optional[torch.Tensor],
        mask_q: Optional[torch.Tensor],
        h_prev: Optional[torch.Tensor],
        flow_prev_q: Optional[torch.Tensor],
    ):
        """One recurrent step on batched tensors.

        ref_feat are the (unwarped) reference encoder features; flow_ref_q and
        flow_prev_q are quarter-resolution flows for the reference and the
        previous hidden state; mask_q is the patch mask expanded to (B,1,h,w).
        Returns (restored frame, new hidden state, warped reference features).
        """
        b, _, height, width = smoky.shape
        c = self.cfg.channels
        f_i = self.encoder_smoky(smoky)
        parts = [f_i]
        ref_warped = None
        if self.cfg.use_ref:
            if ref_feat is None or flow_ref_q is None:
                raise InvalidConfig("reference features/flow required when use_ref")
            ref_warped = warp_tensor(ref_feat, flow_ref_q)
            gated = ref_warped if mask_q is None else ref_warped * mask_q
            parts.append(gated)
        if h_prev is None:
            h_aligned = torch.zeros_like(f_i)
        else:
            if h_prev.shape != (b, c, height // 4, width // 4):
                raise StateMismatch(
                    f"hidden state {tuple(h_prev.shape)} incompatible with "
                    f"frame {tuple(smoky.shape)} and {c} channels"
                )
            h_aligned = warp_tensor(h_prev, flow_prev_q) if flow_prev_q is not None else h_prev
        parts.append(h_aligned)

        h_new = self.fusion(self.fuse_act(self.fuse_conv(torch.cat(parts, dim=1))))
        r = self.recon(h_new)
        r = self.fuse_act(self.shuffle(self.up1(r)))
        r = self.fuse_act(self.shuffle(self.up2(r)))
        residual = self.final(r)
        return torch.clamp(smoky + residual, 0.0, 1.0), h_new, ref_warped


@dataclass
class RecurrentState:
    """Hidden temporal features carried across frames of one clip.

    prev_frame keeps the previous smoky frame so the next step can estimate
    the image-level flow that aligns the hidden state.
    """

    features: torch.Tensor
    frame_index: int
    prev_frame: np.ndarray

    def __post_init__(self):
        if not torch.isfinite(self.features).all():
            raise StateMismatch("recurrent state contains non-finite values")


def frame_to_tensor(frame, dtype=torch.float32) -> torch.Tensor:
    """Frame/HxWx3 array -> (1,3,H,W) tensor."""
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    return torch.from_numpy(data.copy()).permute(2, 0, 1).unsqueeze(0).to(dtype)


def tensor_to_frame(t: torch.Tensor) -> Frame:
    """(1,3,H,W) or (3,H,W) tensor -> Frame."""
    if t.dim() == 4:
        t = t[0]
    data = t.detach().permute(1, 2, 0).cpu().numpy()
    return Frame(np.clip(data, 0.0, 1.0))


def _quarter_flow(flow: FlowField, hw: tuple) -> torch.Tensor:
    return resize_flow(flow_to_tensor(flow), (hw[0] // 4, hw[1] // 4))


def step(
    model: DesmokeNet,
    smoky: Frame,
    ref: Frame,
    state: Optional[RecurrentState],
    flow_backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig] = None,
    mask_override: Optional[PatchMask] = None,
):
    """Restore one frame given the reference input and the running state.

    Returns (restored Frame, new RecurrentState, aux dict with the patch mask
    and the warped reference features).
    """
    if smoky.data.shape != ref.data.shape:
        raise ShapeMismatch("smoky and reference frames differ in shape")
    height, width = smoky.height, smoky.width
    s_t = frame_to_tensor(smoky)

    ref_feat = flow_ref_q = mask_q = None
    mask = mask_override
    if model.cfg.use_ref:
        flow_ref = flow_backend.estimate(smoky.data, ref.data)
        if mask is None and mask_cfg is not None:
            mask, _ = generate_mask(ref, smoky, flow_backend, mask_cfg)
        with torch.no_grad():
            ref_feat = model.encode(frame_to_tensor(ref), "ref")
        flow_ref_q = _quarter_flow(flow_ref, (height, width))
        if mask is not None:
            mask_np = expand_patch_mask(mask, (height // 4, width // 4))
            mask_q = torch.from_numpy(mask_np.astype(np.float32))[None, None]

    h_prev = flow_prev_q = None
    if state is not None:
        h_prev = state.features
        flow_prev = flow_backend.estimate(smoky.data, state.prev_frame)
        flow_prev_q = _quarter_flow(flow_prev, (height, width))

    with torch.no_grad():
        out, h_new, ref_warped = model.forward_step(
            s_t, ref_feat, flow_ref_q, mask_q, h_prev, flow_prev_q
        )
    frame_index = 0 if state is None else state.frame_index + 1
    new_state = RecurrentState(
        features=h_new, frame_index=frame_index, prev_frame=np.asarray(smoky.data)
    )
    aux = {"mask": mask, "ref_features": ref_warped}
    return tensor_to_frame(out), new_state, aux


def run_clip(
    model: DesmokeNet,
    clip,
    ref: Frame,
    flow_backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig] = None,
    mask_override: Optional[PatchMask] = None,
):
    """Restore a whole clip sequentially, threading the recurrent state.

    Returns (list of restored Frames, list of per-frame aux dicts).
    """
    if clip.frames[0].data.shape != ref.data.shape:
        raise ShapeMismatch("reference shape does not match clip")
    outputs, auxes = [], []
    state = None
    for frame in clip.frames:
        out, state, aux = step(
            model, frame, ref, state, flow_backend, mask_cfg, mask_override
        )
        outputs.append(out)
        auxes.append(aux)
    return outputs, auxes


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: five 4x4 convs (strides 2,2,2,1,1), BatchNorm on the
    middle three, LeakyReLU activations, linear 1-channel output map."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.model = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(8 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.model(x)

    def layer_output_sizes(self, input_size: int = 256) -> list:
        """Spatial size after each conv layer, for architecture checks."""
        sizes = []
        s = input_size
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                s = (s + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
                sizes.append(s)
        return sizes


def discriminate(disc: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    """Score a 256x256 patch; returns the (B,)30x30 map."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[-2:] != (256, 256) or image.shape[1] != 3:
        raise ShapeMismatch(f"discriminator expects Bx3x256x256, got {tuple(image.shape)}")
    return disc(image).squeeze(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def model_summary(model: DesmokeNet) -> dict:
    """Parameter counts per module group."""
    groups = {}
    for name, child in model.named_children():
        n = count_parameters(child)
        if n:
            groups[name] = n
    return {"total": count_parameters(model), "groups": groups}


# --- checkpoint archive: zip with a JSON manifest + raw little-endian arrays ---

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str


def _named_state(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optimizer_arrays(optim: torch.optim.Optimizer, module: nn.Module) -> dict:
    """Flatten Adam state keyed by parameter path instead of index."""
    names = [n for n, _ in module.named_parameters()]
    arrays = {}
    state = optim.state_dict()["state"]
    for idx, entry in state.items():
        for stat, value in entry.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            arrays[f"{names[idx]}.{stat}"] = arr.astype(np.float32, copy=False)
    return arrays


def save_checkpoint(
    path,
    model: DesmokeNet,
    iteration: int,
    disc: Optional[PatchDiscriminator] = None,
    optim_g: Optional[torch.optim.Optimizer] = None,
    optim_d: Optional[torch.optim.Optimizer] = None,
    extra: Optional[dict] = None,
) -> None:
    """Serialize model/discriminator/optimizer state deterministically."""
    arrays = {f"model.{k}": v for k, v in _named_state(model).items()}
    if disc is not None:
        arrays.update({f"disc.{k}": v for k, v in _named_state(disc).items()})
    if optim_g is not None:
        arrays.update({f"optim_g.{k}": v for k, v in _optimizer_arrays(optim_g, model).items()})
    if optim_d is not None and disc is not None:
        arrays.update({f"optim_d.{k}": v for k, v in _optimizer_arrays(optim_d, disc).items()})

    manifest = {
        "format_version": FORMAT_VERSION,
        "iteration": int(iteration),
        "network_config": asdict(model.cfg),
        "extra": extra or {},
        "arrays": {
            k: {"shape": list(v.shape), "dtype": _dtype_tag(v)}
            for k, v in sorted(arrays.items())
        },
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True).encode())
        for key in sorted(arrays):
            arr = np.ascontiguousarray(arrays[key])
            _write_entry(zf, f"arrays/{key}", arr.astype(arr.dtype.newbyteorder("<")).tobytes())


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    iteration: int
    arrays: dict
    manifest: dict = field(repr=False, default_factory=dict)

    def group(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for key, meta in manifest["arrays"].items():
            raw = zf.read(f"arrays/{key}")
            arrays[key] = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(
                meta["shape"]
            ).copy()
    cfg = NetworkConfig(**manifest["network_config"])
    return Checkpoint(
        network_config=cfg,
        iteration=manifest["iteration"],
        arrays=arrays,
        manifest=manifest,
    )


def _load_module_state(module: nn.Module, arrays: dict) -> None:
    state = module.state_dict()
    tensors = {}
    for key, ref in state.items():
        if key not in arrays:
            raise InvalidConfig(f"checkpoint missing array '{key}'")
        tensors[key] = torch.from_numpy(np.asarray(arrays[key])).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(tensors)


def build_model(ckpt: Checkpoint) -> DesmokeNet:
    model = DesmokeNet(ckpt.network_config)
    _load_module_state(model, ckpt.group("model"))
    return model


def build_discriminator(ckpt: Checkpoint) -> Optional[PatchDiscriminator]:
    disc_arrays = ckpt.group("disc")
    if not disc_arrays:
        return None
    disc = PatchDiscriminator()
    _load_module_state(disc, disc_arrays)
    return disc


def restore_optimizer(
    optim: torch.optim.Optimizer, module: nn.Module, ckpt: Checkpoint, prefix: str
) -> None:
    """Rebuild Adam per-parameter state saved by save_checkpoint."""
    arrays = ckpt.group(prefix)
    if not arrays:
        return
    for name, param in module.named_parameters():
        entry = {}
        for stat in ("step", "exp_avg", "exp_avg_sq"):
            key = f"{name}.{stat}"
            if key in arrays:
                t = torch.from_numpy(np.asarray(arrays[key])).to(torch.float32)
                entry[stat] = t.reshape(param.shape) if stat != "step" else t.reshape(())
        if entry:
            optim.state[param] = entry
