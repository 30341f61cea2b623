"""Slide-level MIL classification with feature-aware landmark (k-means) Nystrom attention."""

__version__ = "0.1.0"
from .attention import exact_attention, multi_head_attend, nystrom_attention
from .clustering import SegmentAssignment, kmeans, segment_means
from .data import FeatureBag, SynthSpec, load_bag, load_manifest, save_bag, synth_generate
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, predict, save_checkpoint
from .numerics import pinv_iterative
from .training import evaluate, grad_check, train

