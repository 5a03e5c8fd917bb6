"""Self-supervised video desmoking toolkit.

Trains, fine-tunes, evaluates, and deploys a recurrent desmoking model that
uses a pre-smoke frame both as misaligned supervision and as a masked
reference input, end-to-end on synthetically smoked video.
"""

from .core import (
    Clip,
    Dataset,
    FlowField,
    Frame,
    PatchMask,
    ValidityMask,
    load_clip,
    load_dataset,
    read_manifest,
    save_clip,
    write_manifest,
)
from .errors import (
    CorruptClip,
    DesmokeError,
    InvalidClip,
    InvalidConfig,
    InvalidDataset,
    InvalidFlow,
    InvalidInput,
    MissingPSFrame,
    NumericalError,
    ShapeMismatch,
    StateMismatch,
)
from .flow import (
    BlockMatchingBackend,
    ExternalBackend,
    FlowBackend,
    MemoizedBackend,
    backward_warp,
    estimate_flow,
    load_external_backend,
    validity_mask,
)
from .losses import LossWeights, gan_d_loss, gan_g_loss, rec_loss, reg_loss, total_loss
from .maskref import (
    MaskGenConfig,
    dark_channel,
    gaussian_blur,
    generate_mask,
    mask_features,
    patch_ssim_mask,
)
from .metrics import (
    EvalReport,
    aligned_psnr,
    aligned_ssim,
    make_eval_target,
    smoke_density_proxy,
)
from .network import (
    Checkpoint,
    DesmokeNet,
    NetworkConfig,
    PatchDiscriminator,
    RecurrentState,
    build_discriminator,
    build_model,
    count_parameters,
    discriminate,
    load_checkpoint,
    model_summary,
    run_clip,
    save_checkpoint,
    step,
)
from .pipeline import (
    DeployConfig,
    TrainConfig,
    TrainResult,
    cosine_lr,
    enhance_ps,
    evaluate_dataset,
    finetune_star,
    process_stream,
    train,
)
from .smoke import (
    SmokeParams,
    build_dataset,
    composite_smoke,
    random_clean_clip,
    recover_clean,
    synth_smoke,
    transmission_field,
    write_clean_library,
)

__version__ = "0.1.0"
