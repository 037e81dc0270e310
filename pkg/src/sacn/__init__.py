"""Structure-aware consensus network for node classification with few labels."""

from .augment import MaskPlan, feature_mask
from .autodiff import NondeterministicLossError, Tape, Tensor, gradient_check
from .gat import (EdgeIndex, GatLayerParams, ModelParams, ViewOutputs, forward_view,
                  gat_layer, glorot_init, load_checkpoint, parameter_count, save_checkpoint)
from .graph import (BundleError, GraphBundle, Split, SplitSpec, default_filter_strength,
                    load_bundle, make_split, renormalized_adjacency, save_bundle,
                    smooth_features)
from .losses import (LossWeights, loss_cor, loss_de, loss_sacn, loss_stage_one,
                     loss_stage_two, loss_sup, loss_w2s, normalize_latent, one_hot_targets)
from .pseudo import PseudoLabelSet, QuotaSchedule, quota_at, select_class_aware
from .synth import generate_sbm, six_node_fixture
from .trainer import (AdamState, DivergenceError, ExperimentReport, RunReport, TrainConfig,
                    adam_step, evaluate, run_ablation, run_experiment, train)

__version__ = "0.1.0"
