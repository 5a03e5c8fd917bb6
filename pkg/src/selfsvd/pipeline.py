"""Training, supervision-enhancement fine-tuning, evaluation, and streaming
deployment.

Training samples a short temporal window from a random clip each iteration,
applies one crop/flip consistently across the window and the pre-smoke frame,
runs the recurrent model with the PS frame as reference, and optimizes the
weighted objective with alternating discriminator/generator updates under a
cosine learning-rate schedule.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
import torch

from .core import Dataset, Frame, load_clip
from .errors import InvalidConfig, InvalidDataset, NumericalError
from .flow import (
    BlockMatchingBackend,
    FlowBackend,
    MemoizedBackend,
    flow_to_tensor,
    resize_flow,
    warp_array,
)
from .losses import LossWeights, gan_d_loss, gan_g_loss, masked_l1, reg_loss, total_loss
from .maskref import MaskGenConfig, expand_patch_mask, patch_ssim_mask
from .metrics import EvalReport, aligned_psnr, aligned_ssim, make_eval_target, smoke_density_proxy
from .network import (
    DesmokeNet,
    NetworkConfig,
    PatchDiscriminator,
    RecurrentState,
    run_clip,
    save_checkpoint,
    step,
)
from .smoke import paired_clean_dir


@dataclass
class TrainConfig:
    """Optimization hyperparameters (method defaults)."""

    batch_size: int = 4
    crop: int = 256
    augment_flips: bool = True
    beta1: float = 0.9
    beta2: float = 0.99
    iters: int = 100_000
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    finetune_iters: int = 40_000
    finetune_lr0: float = 5e-5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    clip_sample_len: int = 5
    tau: float = 0.999
    checkpoint_interval: int = 10_000

    def __post_init__(self):
        if self.iters <= 0 or self.finetune_iters <= 0:
            raise InvalidConfig("iteration counts must be > 0")
        if self.crop % 4:
            raise InvalidConfig("crop must be divisible by 4")
        if self.batch_size < 1 or self.clip_sample_len < 1:
            raise InvalidConfig("batch_size and clip_sample_len must be >= 1")


@dataclass
class DeployConfig:
    """Streaming deployment knobs: Ref-detector threshold and window length."""

    ref_epsilon: float = 0.01
    chunk_len: int = 5

    def __post_init__(self):
        if self.ref_epsilon <= 0:
            raise InvalidConfig("ref_epsilon must be > 0")
        if self.chunk_len < 1:
            raise InvalidConfig("chunk_len must be >= 1")


def cosine_lr(k: int, lr0: float, lr_min: float, total: int) -> float:
    """Cosine annealing from lr0 at k=0 to lr_min at k=total."""
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * k / total))


@dataclass
class TrainResult:
    model: DesmokeNet
    disc: Optional[PatchDiscriminator]
    history: list
    checkpoints: list
    final_checkpoint: Optional[Path]


def _sample_window(rng: np.random.Generator, clips: list, cfg: TrainConfig):
    """One augmented training sample: (T,H,W,3) smoky window + (H,W,3) PS frame."""
    clip = clips[int(rng.integers(len(clips)))]
    n = len(clip)
    t0 = int(rng.integers(max(n - cfg.clip_sample_len + 1, 1)))
    idx = [min(t0 + i, n - 1) for i in range(cfg.clip_sample_len)]
    frames = np.stack([clip.frames[i].data for i in idx])
    ps = np.asarray(clip.ps_frame.data)

    h, w = ps.shape[:2]
    crop = min(cfg.crop, h, w)
    crop -= crop % 4
    y0 = int(rng.integers(h - crop + 1))
    x0 = int(rng.integers(w - crop + 1))
    frames = frames[:, y0 : y0 + crop, x0 : x0 + crop]
    ps = ps[y0 : y0 + crop, x0 : x0 + crop]

    if cfg.augment_flips:
        if rng.integers(2):
            frames = frames[:, :, ::-1]
            ps = ps[:, ::-1]
        if rng.integers(2):
            frames = frames[:, ::-1]
            ps = ps[::-1]
    return np.ascontiguousarray(frames, dtype=np.float32), np.ascontiguousarray(ps, dtype=np.float32)


def _sample_batch(rng, clips, cfg: TrainConfig):
    windows, refs = zip(*(_sample_window(rng, clips, cfg) for _ in range(cfg.batch_size)))
    return np.stack(windows), np.stack(refs)


def _batch_flow_q(backend, src_np, dst_np, hw) -> torch.Tensor:
    """Per-item image flow stacked and resized to quarter resolution."""
    flows = [
        flow_to_tensor(backend.estimate(src_np[b], dst_np[b]))
        for b in range(src_np.shape[0])
    ]
    return resize_flow(torch.cat(flows, dim=0), (hw[0] // 4, hw[1] // 4))


def _forward_window(
    model: DesmokeNet,
    smoky_np: np.ndarray,
    ps_np: np.ndarray,
    backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig],
):
    """Run the recurrent model over a (B,T,H,W,3) window inside the autograd
    graph. Returns per-frame outputs, masks, and warped reference features."""
    bsz, t_len, height, width = smoky_np.shape[:4]
    qh, qw = height // 4, width // 4
    smoky_t = torch.from_numpy(smoky_np).permute(0, 1, 4, 2, 3)
    ref_t = torch.from_numpy(ps_np).permute(0, 3, 1, 2)

    ref_feat = model.encode(ref_t, "ref") if model.cfg.use_ref else None
    h_state = None
    outputs, masks, ref_feats = [], [], []
    for t in range(t_len):
        frame_np = smoky_np[:, t]
        flow_ref_q = mask_q = None
        step_masks = [None] * bsz
        if model.cfg.use_ref:
            flows = [backend.estimate(frame_np[b], ps_np[b]) for b in range(bsz)]
            flow_ref_q = resize_flow(
                torch.cat([flow_to_tensor(f) for f in flows], dim=0), (qh, qw)
            )
            if mask_cfg is not None:
                grids = []
                for b in range(bsz):
                    warped_ref = warp_array(ps_np[b], flows[b])
                    m = patch_ssim_mask(warped_ref, frame_np[b], mask_cfg)
                    step_masks[b] = m
                    grids.append(expand_patch_mask(m, (qh, qw)))
                mask_q = torch.from_numpy(np.stack(grids).astype(np.float32)).unsqueeze(1)
        flow_prev_q = None
        if h_state is not None:
            flow_prev_q = _batch_flow_q(backend, frame_np, smoky_np[:, t - 1], (height, width))
        out, h_state, ref_warped = model.forward_step(
            smoky_t[:, t], ref_feat, flow_ref_q, mask_q, h_state, flow_prev_q
        )
        outputs.append(out)
        masks.append(step_masks)
        ref_feats.append(ref_warped)
    return outputs, masks, ref_feats


def _loss_components(
    outputs, masks, ref_feats, ps_target_np, backend, cfg: TrainConfig, counters
):
    """Reconstruction + regularization terms, averaged over the batch."""
    bsz = ps_target_np.shape[0]
    rec = torch.zeros((), dtype=torch.float32)
    reg = torch.zeros((), dtype=torch.float32)
    for t, out in enumerate(outputs):
        out_np = out.detach().numpy()
        for b in range(bsz):
            target = ps_target_np[b]
            flow = backend.estimate(target, out_np[b].transpose(1, 2, 0))
            target_t = torch.from_numpy(target).permute(2, 0, 1).unsqueeze(0)
            term, n_valid = masked_l1(out[b : b + 1], target_t, flow, cfg.tau)
            if n_valid == 0:
                counters["all_invalid_frames"] = counters.get("all_invalid_frames", 0) + 1
            rec = rec + term / bsz
            if ref_feats[t] is not None and cfg.weights.lambda_reg > 0:
                reg = reg + reg_loss(masks[t][b], ref_feats[t][b : b + 1]) / bsz
    return rec, reg


def _training_loop(
    model: Optional[DesmokeNet],
    dataset: Dataset,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    mask_cfg: Optional[MaskGenConfig],
    backend: FlowBackend,
    lr0: float,
    n_iters: int,
    target_fn: Optional[Callable],
    out_dir,
    log_name: str,
) -> TrainResult:
    if len(dataset) == 0:
        raise InvalidDataset("training needs a non-empty dataset")
    if mask_cfg is not None and cfg.crop % mask_cfg.patch_size:
        raise InvalidConfig(
            f"crop {cfg.crop} must be divisible by patch_size {mask_cfg.patch_size}"
        )
    if not isinstance(backend, MemoizedBackend):
        backend = MemoizedBackend(backend)  # input-frame flow pairs recur every epoch
    torch.manual_seed(cfg.seed)
    if model is None:
        model = DesmokeNet(net_cfg)
    model.train()
    rng = np.random.default_rng(cfg.seed)

    use_gan = cfg.weights.lambda_gan > 0
    disc = PatchDiscriminator() if use_gan else None
    optim_g = torch.optim.Adam(model.parameters(), lr=lr0, betas=(cfg.beta1, cfg.beta2))
    optim_d = (
        torch.optim.Adam(disc.parameters(), lr=lr0, betas=(cfg.beta1, cfg.beta2))
        if use_gan
        else None
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / log_name).open("w")
        log_fh.write("iter,rec,reg,gan_g,gan_d,total\n")

    history, checkpoints = [], []
    counters: dict = {}
    try:
        for k in range(n_iters):
            lr = cosine_lr(k, lr0, cfg.lr_min, n_iters)
            for group in optim_g.param_groups:
                group["lr"] = lr
            if optim_d is not None:
                for group in optim_d.param_groups:
                    group["lr"] = lr

            smoky_np, ps_np = _sample_batch(rng, dataset.clips, cfg)
            target_np = ps_np if target_fn is None else target_fn(ps_np)
            outputs, masks, ref_feats = _forward_window(
                model, smoky_np, ps_np, backend, mask_cfg
            )

            gan_d_val = 0.0
            if use_gan:
                fake = torch.cat([o.detach() for o in outputs], dim=0)
                real = torch.from_numpy(target_np).permute(0, 3, 1, 2)
                optim_d.zero_grad()
                d_loss = gan_d_loss(disc(real), disc(fake))
                d_loss.backward()
                optim_d.step()
                gan_d_val = float(d_loss.detach())

            rec, reg = _loss_components(
                outputs, masks, ref_feats, target_np, backend, cfg, counters
            )
            if use_gan:
                g_scores = disc(torch.cat(outputs, dim=0))
                gan_g = gan_g_loss(g_scores)
            else:
                gan_g = torch.zeros(())
            loss = total_loss(rec, reg, gan_g, cfg.weights)
            if not torch.isfinite(loss):
                _dump_diagnostics(out_dir, k, rec, reg, gan_g, lr)
                raise NumericalError(f"non-finite loss at iteration {k}")

            optim_g.zero_grad()
            loss.backward()
            optim_g.step()

            row = {
                "iter": k,
                "rec": float(rec.detach()),
                "reg": float(reg.detach()),
                "gan_g": float(gan_g.detach()),
                "gan_d": gan_d_val,
                "total": float(loss.detach()),
                "lr": lr,
            }
            history.append(row)
            if log_fh is not None:
                log_fh.write(
                    f"{k},{row['rec']:.8f},{row['reg']:.8f},"
                    f"{row['gan_g']:.8f},{row['gan_d']:.8f},{row['total']:.8f}\n"
                )

            if out_dir is not None and (k + 1) % cfg.checkpoint_interval == 0 and k + 1 < n_iters:
                path = out_dir / f"ckpt_{k + 1:07d}.zip"
                save_checkpoint(path, model, k + 1, disc, optim_g, optim_d)
                checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()

    final = None
    if out_dir is not None:
        final = out_dir / "ckpt_final.zip"
        save_checkpoint(
            final, model, n_iters, disc, optim_g, optim_d, extra={"counters": counters}
        )
        checkpoints.append(final)
    model.eval()
    return TrainResult(
        model=model, disc=disc, history=history, checkpoints=checkpoints, final_checkpoint=final
    )


def _dump_diagnostics(out_dir, k, rec, reg, gan_g, lr) -> None:
    if out_dir is None:
        return
    payload = {
        "iteration": k,
        "rec": float(rec.detach()),
        "reg": float(reg.detach()),
        "gan_g": float(gan_g.detach()),
        "lr": lr,
    }
    (Path(out_dir) / "diagnostics.json").write_text(json.dumps(payload, indent=2))


def train(
    dataset: Dataset,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    mask_cfg: Optional[MaskGenConfig] = None,
    flow_backend: Optional[FlowBackend] = None,
    out_dir=None,
    model: Optional[DesmokeNet] = None,
) -> TrainResult:
    """First-stage training with the PS frame as supervision and reference."""
    backend = flow_backend or BlockMatchingBackend()
    return _training_loop(
        model,
        dataset,
        net_cfg,
        train_cfg,
        mask_cfg,
        backend,
        train_cfg.lr_max,
        train_cfg.iters,
        target_fn=None,
        out_dir=out_dir,
        log_name="train_log.csv",
    )


def enhance_ps(
    model: DesmokeNet,
    ps: Frame,
    flow_backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig] = None,
) -> Frame:
    """Self-referenced single-frame pass: the PS frame is its own reference."""
    out, _, _ = step(model, ps, ps, None, flow_backend, mask_cfg)
    return out


def finetune_star(
    model: DesmokeNet,
    dataset: Dataset,
    train_cfg: TrainConfig,
    mask_cfg: Optional[MaskGenConfig] = None,
    flow_backend: Optional[FlowBackend] = None,
    out_dir=None,
) -> TrainResult:
    """Second-stage fine-tuning against enhanced PS supervision.

    A frozen copy of the pre-trained model enhances each sampled PS crop; the
    enhanced frame replaces the PS frame as the reconstruction target and the
    adversarial "real" sample, while the reference input stays the original.
    The iteration counter restarts at 0.
    """
    if model is None:
        raise InvalidConfig("finetune_star needs a pre-trained model")
    backend = flow_backend or BlockMatchingBackend()
    enhancer = copy.deepcopy(model)
    enhancer.eval()
    for p in enhancer.parameters():
        p.requires_grad_(False)

    def enhance_batch(ps_np: np.ndarray) -> np.ndarray:
        out = np.empty_like(ps_np)
        for b in range(ps_np.shape[0]):
            frame = Frame(ps_np[b])
            out[b] = enhance_ps(enhancer, frame, backend, mask_cfg).data
        return out

    return _training_loop(
        model,
        dataset,
        model.cfg,
        train_cfg,
        mask_cfg,
        backend,
        train_cfg.finetune_lr0,
        train_cfg.finetune_iters,
        target_fn=enhance_batch,
        out_dir=out_dir,
        log_name="finetune_log.csv",
    )


def process_stream(
    model: DesmokeNet,
    frames: Iterable[Frame],
    deploy_cfg: DeployConfig,
    flow_backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig] = None,
    stats: Optional[dict] = None,
) -> Iterator[Frame]:
    """Desmoke an endless frame stream with dynamic reference detection.

    Every chunk_len frames the detector runs a self-referenced pass on the
    incoming frame; a mean absolute residual strictly below ref_epsilon makes
    that frame the new reference. Until a reference is detected the first
    frame serves provisionally. Recurrent state threads across the whole
    stream and exactly one output is emitted per input.
    """
    state: Optional[RecurrentState] = None
    ref: Optional[Frame] = None
    ref_index = 0
    if stats is not None:
        stats.setdefault("windows", [])

    for idx, frame in enumerate(frames):
        if idx % deploy_cfg.chunk_len == 0:
            restored, _, _ = step(model, frame, frame, None, flow_backend, mask_cfg)
            residual = float(np.abs(restored.data - frame.data).mean())
            fired = residual < deploy_cfg.ref_epsilon
            if fired:
                ref = frame
                ref_index = idx
            if stats is not None:
                stats["windows"].append(
                    {
                        "frame": idx,
                        "residual": residual,
                        "fired": fired,
                        "ref_index": ref_index if ref is not None else 0,
                    }
                )
        if ref is None:
            ref = frame  # provisional until the detector first fires
        out, state, _ = step(model, frame, ref, state, flow_backend, mask_cfg)
        yield out


def evaluate_dataset(
    dataset: Dataset,
    model: Optional[DesmokeNet],
    flow_backend: FlowBackend,
    mask_cfg: Optional[MaskGenConfig] = None,
    target_mode: str = "original-ps",
    tau: float = 0.999,
) -> EvalReport:
    """Score every clip of a split; model=None scores the identity baseline.

    synthetic-gt mode resolves each clip's paired clean directory and compares
    frame k against clean frame k+1 (the first clean frame is the PS frame).
    """
    report = EvalReport(target_mode=target_mode)
    for clip in dataset.clips:
        if target_mode == "synthetic-gt":
            clean = load_clip(paired_clean_dir(Path(dataset.root_path) / "smoky" / clip.id))
            targets = list(clean.frames[1 : len(clip) + 1])
        else:
            target = make_eval_target(
                clip.ps_frame, target_mode, model=model, flow_backend=flow_backend, mask_cfg=mask_cfg
            )
            targets = [target] * len(clip)

        if model is None:
            outputs = list(clip.frames)
        else:
            outputs, _ = run_clip(model, clip, clip.ps_frame, flow_backend, mask_cfg)

        for i, (out, target) in enumerate(zip(outputs, targets), start=1):
            report.add(
                clip.id,
                i,
                aligned_psnr(out, target, flow_backend, tau),
                aligned_ssim(out, target, flow_backend, tau),
                smoke_density_proxy(out),
            )
    return report
