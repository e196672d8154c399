"""Joint scene-text super-resolution and recognition with iterative
cross-branch guidance.
"""
from .charset import (
    Label,
    ctc_min_frames,
    decode_indices,
    encode_text,
    fits_frame_budget,
    normalize_text,
)
from .config import (
    CHARSET,
    ConfigError,
    ModelConfig,
    load_config,
    save_config,
    validate_config,
)
from .datagen import (
    DatasetError,
    DegradeParams,
    ImagePair,
    degrade,
    generate_dataset,
    load_dataset,
    load_image_tensor,
    random_text,
    render_pair,
    save_image_tensor,
    write_manifest,
)
from .guidance import ClueProjector, GuidanceOutput, GuidanceStage
from .losses import (
    LossReport,
    LossTerm,
    NumericsError,
    ctc_loss,
    ctc_loss_batch,
    gradient_profile_loss,
    rec_loss,
    sr_loss,
    total_loss,
)
from .metrics import (
    EvalReport,
    ProfileReport,
    bicubic_upscale,
    count_params,
    evaluate,
    greedy_ctc_decode,
    iteration_stage_parameter_count,
    mean_psnr,
    module_macs,
    profile,
    psnr,
    ssim,
    word_accuracy,
)
from .pipeline import (
    Checkpoint,
    IterationTrace,
    SrTextNet,
    TrainOptions,
    batch_indices,
    build_model,
    fit,
    load_checkpoint,
    make_batch,
    make_optimizer,
    model_from_checkpoint,
    save_checkpoint,
    train_step,
)
from .rec_branch import FusionEncoderStage, PatchEmbed, TransformerBlock
from .sr_branch import (
    AffineRectifier,
    ClueGuidedSrb,
    GruScan,
    PixelEncoder,
    SrImageDecoder,
)

__version__ = "0.1.0"
