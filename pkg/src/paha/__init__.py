"""Parts-aware audio-driven animation at desk scale.

Training re-weights the latent-diffusion loss around hands, face and body
using pose-confidence masks; inference can steer sampling with regional
audio-visual sync classifiers (sequential or differential guidance); a
metrics harness covers gesture distribution distance, diversity, beat
alignment and time cost.
"""

from .classifier import SyncClassifier, bce_loss, sync_gradient
from .config import RunConfig
from .guidance import Classifiers, GuidanceConfig, RegionMasks, generate_long, sample_video
from .metrics import BeatTrack, bas, diversity, fgd, time_cost
from .network import DenoiserNetwork, LatentVideo, merge_reference, predict_noise, split_reference
from .par_mask import (
    AwarenessArea,
    Keypoint,
    PoseSequence,
    ReweightMask,
    build_awareness_area,
    build_reweight_mask,
    downsample_mask,
    filter_reliable,
)
from .sampler import Sampler, make_unified_input
from .schedule import InferenceSchedule, NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "AwarenessArea",
    "BeatTrack",
    "Classifiers",
    "DenoiserNetwork",
    "GuidanceConfig",
    "InferenceSchedule",
    "Keypoint",
    "LatentVideo",
    "NoiseSchedule",
    "PoseSequence",
    "RegionMasks",
    "ReweightMask",
    "RunConfig",
    "Sampler",
    "SyncClassifier",
    "bas",
    "bce_loss",
    "build_awareness_area",
    "build_reweight_mask",
    "diversity",
    "downsample_mask",
    "fgd",
    "filter_reliable",
    "generate_long",
    "make_schedule",
    "make_unified_input",
    "merge_reference",
    "predict_noise",
    "sample_video",
    "split_reference",
    "sync_gradient",
    "time_cost",
]
