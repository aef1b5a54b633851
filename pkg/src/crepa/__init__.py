"""Desk-scale lab for cross-frame representation alignment.

A toy video diffusion transformer is fine-tuned under three regimes
(score-only, per-frame alignment, cross-frame alignment) on synthetic
sprite videos, with kernel-alignment analytics and linear probing to
measure what the regularisers do to the hidden states.
"""

from .alignment import (
    AlignmentConfig,
    ProjectionHead,
    combined_loss,
    crepa_loss,
    neighbor_weights,
    project,
    repa_loss,
    sim,
)
from .data import (
    NUM_CLASSES,
    ManifestEntry,
    StyleClass,
    VideoSpec,
    generate_dataset,
    generate_video,
    load_manifest,
)
from .diffusion import NoiseSchedule, forward_noise, sample, score_loss
from .dit import (
    DiTConfig,
    VideoDiT,
    base_fingerprint,
    inject_lora,
    load_checkpoint,
    patchify,
    remove_lora,
    save_checkpoint,
    unpatchify,
)
from .encoder import (
    EncoderConfig,
    FeatureBank,
    FrameEncoder,
    encode_frame,
    encode_video,
    load_encoder,
    pretrain_encoder,
    save_encoder,
)
from .metrics import (
    AlignmentReport,
    cka,
    cknna,
    cross_frame_sweep,
    hsic,
    linear_probe_sweep,
    trim_measurements,
)
from .training import (
    ComparisonReport,
    RunRecord,
    TrainConfig,
    compare_runs,
    finetune,
    load_run,
    pretrain_base,
)

__version__ = "0.1.0"
