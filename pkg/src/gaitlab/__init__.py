"""gaitlab: skeleton gait recognition lab.

Pose-sequence normalization schemes, a from-scratch differentiable spatial
transformer for single-pose identity embeddings, triplet-loss metric
learning, gallery/probe evaluation, and a synthetic walker generator for
controlled confound experiments.
"""

__version__ = "0.1.0"

from .poses import (AnatomyMap, DEFAULT_ANATOMY, FrameGeometry, GaitSequence,
                    height, pelvis, reorder, inverse_reorder, resample,
                    load_dataset, save_dataset)
from .normalization import (DatasetStats, apply_scheme, compute_stats, parse_scheme,
                            SCHEME_NAMES)
from .models import (SinglePoseEncoderConfig, TemporalBaselineConfig,
                     init_params, spe_forward, temporal_forward,
                     embed_sequence_with_spe, save_checkpoint, load_checkpoint)
from .training import TrainConfig, train, triplet_loss, adamw_step, cyclical_lr
from .evaluation import (EmbeddingRecord, identify, rank_k_accuracy,
                         embed_dataset, run_ablation)
from .synthetic import ConfoundSpec, WalkerIdentity, generate, describe
from .estimators import SequenceNormalizer, GaitEmbedder
