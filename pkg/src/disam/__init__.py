"""Domain-invariant visual place recognition.

Per-domain encoders/decoders are trained with adversarial, cycle, feature
consistency and adaptive triplet losses (coarse stage), then refined with
gradient-weighted similarity activation maps (fine stage).  Retrieval ranks a
reference-domain database coarse-to-fine; evaluation reports pose-error
percentages and recall@N.
"""

from .datamodel import ImageSample, Manifest, Pose, flip_horizontal, load_manifest
from .losses import LossWeights
from .network import NetworkConfig, init_bundle, load_checkpoint, save_checkpoint
from .samcore import activation_map, mean_channel_cosine, sam_weights
from .trainer import TrainSchedule

__version__ = "0.1.0"
