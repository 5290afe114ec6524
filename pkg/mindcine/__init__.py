from mindcine.__version__ import __version__
from mindcine.config import TrainConfig, config_hash, load_config, save_config, validate, with_delta
from mindcine.dataset import (
    ClipRecord,
    DatasetManifest,
    Dims,
    EegSegment,
    Embedding,
    EmbeddingSpace,
    generate_synthetic,
    least_squares_readout,
    load_manifest,
    save_manifest,
    slice_windows,
)
from mindcine.defs import MindCineError, derive_seed
from mindcine.encoders import (
    EmbedNet,
    MlpEncoder,
    PretrainedAdapter,
    load_adapter_table,
    make_adapter_table,
    save_adapter_table,
)
from mindcine.experiment import AblationPlan, render_report, run_ablation, run_experiment
from mindcine.inference import (
    batch_reconstruct,
    build_diffusion,
    guided_score,
    load_diffusion_checkpoint,
    load_negative_condition,
    load_reconstructions,
    reconstruct,
    save_diffusion_checkpoint,
    save_reconstructions,
    train_diffusion,
)
from mindcine.metrics import MetricsReport, build_classifiers, evaluate_split, hue_pcc, nway_topk, psnr, ssim
from mindcine.outputwriter import mk_OutputWriter
from mindcine.perceptual import (
    build_perceptual,
    causalseq_forward,
    load_perceptual_checkpoint,
    perception_loss,
    save_perceptual_checkpoint,
    train_perceptual,
)
from mindcine.runtime import set_deterministic
from mindcine.semantic import (
    build_semantic,
    joint_loss,
    load_semantic_checkpoint,
    predict_semantic,
    save_semantic_checkpoint,
    softclip_loss,
    train_semantic,
)
