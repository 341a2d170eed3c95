"""duetgen: joint audio-video latent sequence generation at desk scale.

A shared causal backbone plans both modalities over fused patch tokens;
two independent flow-matching heads render per-modality latent frames.
Trained and evaluated end to end on synthetic paired latent streams with
oracle ground truth.
"""

from .backbone import Backbone, FusionMode, KvCache, SequenceLayout, StopPredictor, parse_fusion_mode, stop_loss
from .codec import (
    AUDIO_DIM,
    VIDEO_DIM,
    CodecConfig,
    LatentCodec,
    LatentStats,
    LatentStream,
    SymbolScript,
    compression_ratio,
    denormalize,
    fit_stats,
    kl_penalty,
    latent_rate,
    normalize,
    reparameterize,
)
from .config import TrainConfig, load_config, parse_config_text
from .diffusion_head import (
    ConditioningBundle,
    DiffusionHead,
    FlowSample,
    cfg_velocity,
    drop_condition,
    make_flow_pair,
    sample_tau,
)
from .model import Model
from .optim import LrSchedule, OptimizerState, adamw_step, finite_diff_gradient, lr_at
from .params import ParameterSet, gradients
from .patch_encoder import PatchEncoder
from .pipeline import EvalSettings, GenerationRequest, GenerationResult, evaluate, generate, run_ablation
from .streamio import read_stream, write_stream
from .tensor import Tensor, no_grad
from .trainer import assemble_batch, build_corpus, compute_total_loss, train, train_step

__version__ = "0.1.0"
