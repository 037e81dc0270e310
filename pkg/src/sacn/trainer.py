"""Two-stage training loop, optimizer, evaluation, and the multi-run protocol.

Stage one pretrains on labeled nodes with supervision + consensus; stage two
adds weak-to-strong pseudolabel supervision, refreshing the selection on a
fixed epoch cadence.  Early stopping watches validation accuracy (stage two
only, mirroring the convergence check of the underlying algorithm) and the
best-validation snapshot is restored before the single test measurement.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .augment import draw_mask_plan, feature_mask, keep_vector
from .autodiff import Tape
from .gat import EdgeIndex, ModelParams, bind_params, forward_view, glorot_init, parameter_count
from .graph import GraphBundle, default_filter_strength, renormalized_adjacency, smooth_features
from .losses import (LossWeights, loss_cor, loss_de, loss_sacn, loss_sup, loss_w2s,
                     normalize_latent, one_hot_targets)
from .pseudo import PseudoLabelSet, QuotaSchedule, quota_at, select_class_aware


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.6
    epochs_pretrain: int = 100
    epochs_max: int = 1000
    patience: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    mask_rate: float = 0.3
    filter_strength: int | None = None  # None: derive from labels per class
    quota: QuotaSchedule = field(default_factory=QuotaSchedule)
    heads: int = 8
    head_dim: int = 6
    include_self_pairs: bool = True
    seeds: tuple[int, ...] = (0,)
    dtype: str = "float32"  # float64 for gradient-level reproducibility

    def __post_init__(self):
        if self.epochs_pretrain > self.epochs_max:
            raise ValueError("epochs_pretrain must not exceed epochs_max")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("dropout must be in [0,1) and mask rate in [0,1]")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive, weight decay non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")


@dataclass
class EpochMetrics:
    epoch: int
    l_sup: float
    l_cor: float
    l_de: float
    l_w2s: float
    val_acc: float | None

    def as_json(self) -> dict:
        return {"epoch": self.epoch, "l_sup": self.l_sup, "l_cor": self.l_cor,
                "l_de": self.l_de, "l_w2s": self.l_w2s, "val_acc": self.val_acc}


@dataclass
class RefreshEvent:
    epoch: int
    per_class_counts: list[int]
    mean_confidence: float


@dataclass
class RunReport:
    seed: int
    epochs: list[EpochMetrics]
    refreshes: list[RefreshEvent]
    test_accuracy: float
    best_val_accuracy: float | None
    best_epoch: int
    wall_time_sec: float

    @property
    def val_curve(self) -> list[float | None]:
        return [e.val_acc for e in self.epochs]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0

    @staticmethod
    def like(params: list[np.ndarray]) -> "AdamState":
        return AdamState([np.zeros_like(p) for p in params],
                         [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected adaptive-moment update with decoupled multiplicative decay."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


# ---------------------------------------------------------------------------
# one optimization step's loss graph (shared with the gradient checker)


@dataclass
class StepInputs:
    """Everything one step's loss graph needs besides the parameters.

    Strong views are either explicit pre-masked matrices (``x_strong*``) or
    the weak matrix plus 0/1 ``keep*`` vectors; the latter avoids
    materialising two full masked copies per epoch.
    """

    x_weak: np.ndarray
    edges: EdgeIndex
    train_idx: np.ndarray
    train_targets: np.ndarray
    pseudo: PseudoLabelSet
    weights: LossWeights
    include_self_pairs: bool
    adjacency: object  # scipy sparse, used by the consensus term
    x_strong1: np.ndarray | None = None
    x_strong2: np.ndarray | None = None
    keep1: np.ndarray | None = None
    keep2: np.ndarray | None = None
    dropout: float = 0.0
    train_mode: bool = False


def build_step_losses(bound, inputs: StepInputs, rng=None) -> dict[str, ad.Tensor]:
    """Forward the three views through shared parameters and all loss terms.

    Returns tensors for every term plus ``total``; zero-weight terms are kept
    out of the total so no gradient work is spent on them.
    """
    weak_x = bound.tape.constant(np.asarray(inputs.x_weak))

    def strong(explicit, keep):
        if explicit is not None:
            return forward_view(explicit, inputs.edges, bound, inputs.train_mode, rng,
                                dropout_rate=inputs.dropout)
        return forward_view(weak_x, inputs.edges, bound, inputs.train_mode, rng,
                            dropout_rate=inputs.dropout, feature_keep=keep)

    weak = forward_view(weak_x, inputs.edges, bound, inputs.train_mode, rng,
                        dropout_rate=inputs.dropout)
    strong1 = strong(inputs.x_strong1, inputs.keep1)
    strong2 = strong(inputs.x_strong2, inputs.keep2)

    sup = loss_sup(weak.y, inputs.train_targets, inputs.train_idx)
    sacn = loss_sacn(strong1.z, strong2.z, inputs.adjacency, inputs.weights.lam,
                     inputs.include_self_pairs)
    w2s = loss_w2s(inputs.pseudo, strong1.y, strong2.y)

    total = sup
    if inputs.weights.alpha1 > 0:
        total = ad.add(total, ad.scalar_multiply(inputs.weights.alpha1, sacn))
    if inputs.weights.alpha2 > 0 and inputs.pseudo.selected_count > 0:
        total = ad.add(total, ad.scalar_multiply(inputs.weights.alpha2, w2s))

    # correlation/decorrelation split recomputed on a throwaway tape, values only
    side = Tape()
    m1 = normalize_latent(side.constant(strong1.z.value))
    m2 = normalize_latent(side.constant(strong2.z.value))
    cor_val = float(loss_cor(m1, m2, inputs.adjacency, inputs.include_self_pairs).value)
    de_val = float(loss_de(m1, m2).value)

    return {"total": total, "sup": sup, "sacn": sacn, "w2s": w2s,
            "cor_value": cor_val, "de_value": de_val}


# ---------------------------------------------------------------------------
# evaluation


def accuracy_from_predictions(y: np.ndarray, labels: np.ndarray, idx_set: np.ndarray) -> float:
    idx_set = np.asarray(idx_set, dtype=np.int64)
    if idx_set.size == 0:
        raise ValueError("cannot evaluate on an empty index set")
    predicted = y[idx_set].argmax(axis=1)  # ties resolve to the lowest class index
    return float((predicted == labels[idx_set]).mean())


def evaluate(params: ModelParams, bundle: GraphBundle, idx_set,
             features: np.ndarray | None = None, edges: EdgeIndex | None = None) -> float:
    """Eval-mode weak-view accuracy on the given index set."""
    if features is None:
        features = np.asarray(bundle.features.todense())
    if edges is None:
        edges = EdgeIndex.from_adjacency(bundle.adjacency)
    out = forward_view(features, edges, params, train_mode=False)
    return accuracy_from_predictions(out.y.value, bundle.labels, idx_set)


def _eval_weak_probs(params: ModelParams, features: np.ndarray, edges: EdgeIndex) -> np.ndarray:
    return forward_view(features, edges, params, train_mode=False).y.value


# ---------------------------------------------------------------------------
# training


def spawn_run_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent per-purpose RNG streams; different seeds share no state."""
    root = np.random.SeedSequence(seed)
    names = ("init", "mask1", "mask2", "dropout")
    return dict(zip(names, map(np.random.default_rng, root.spawn(len(names)))))


def prepare_features(bundle: GraphBundle, filter_strength: int | None) -> np.ndarray:
    """Renormalization-filter smoothing applied once before training."""
    if filter_strength is None:
        per_class = max(1, bundle.num_labeled // max(1, bundle.num_classes))
        filter_strength = default_filter_strength(per_class)
    smoothed = smooth_features(bundle.features, renormalized_adjacency(bundle.adjacency),
                               filter_strength)
    return smoothed


def train(bundle: GraphBundle, config: TrainConfig, seed: int,
          smoothed_features: np.ndarray | None = None,
          edges: EdgeIndex | None = None,
          metrics_out=None, selection_out=None) -> tuple[ModelParams, RunReport]:
    """Run the two-stage algorithm for one seed.

    Deterministic for fixed inputs: all randomness flows from per-purpose
    generators derived from ``seed``.  Optional ``metrics_out`` /
    ``selection_out`` receive one JSON line per epoch / pseudolabel refresh.
    """
    if bundle.split.train.size == 0:
        raise ValueError("bundle has no train split; call make_split first")
    started = time.perf_counter()
    dtype = np.float32 if config.dtype == "float32" else np.float64
    rngs = spawn_run_rngs(seed)

    if smoothed_features is None:
        smoothed_features = prepare_features(bundle, config.filter_strength)
    features = np.ascontiguousarray(smoothed_features, dtype=dtype)
    if edges is None:
        edges = EdgeIndex.from_adjacency(bundle.adjacency)

    params = glorot_init(bundle.num_features, bundle.num_classes, config.heads,
                         config.head_dim, seed=int(rngs["init"].integers(2 ** 31)),
                         dtype=dtype)
    flat = params.flat()
    state = AdamState.like(flat)

    train_idx = bundle.split.train
    train_targets = one_hot_targets(bundle.labels, train_idx, bundle.num_classes)
    unlabeled_idx = bundle.unlabeled_indices()
    has_val = bundle.split.val.size > 0

    pseudo = PseudoLabelSet.empty(bundle.num_classes)
    stage_two_start = config.epochs_pretrain + 1
    epochs: list[EpochMetrics] = []
    refreshes: list[RefreshEvent] = []
    best_val = -np.inf
    best_epoch = 0
    best_params = params.copy()
    since_improve = 0

    for epoch in range(1, config.epochs_max + 1):
        in_stage_two = epoch >= stage_two_start
        if in_stage_two and (epoch - stage_two_start) % config.quota.round_length == 0:
            probs = _eval_weak_probs(params, features, edges)
            available = np.bincount(probs[unlabeled_idx].argmax(axis=1),
                                    minlength=bundle.num_classes)
            quotas = quota_at(config.quota, epoch - stage_two_start, available)
            pseudo = select_class_aware(probs, unlabeled_idx, quotas)
            event = RefreshEvent(epoch, pseudo.per_class_counts.tolist(),
                                 pseudo.mean_confidence(probs))
            refreshes.append(event)
            if selection_out is not None:
                selection_out.write(json.dumps({
                    "epoch": event.epoch,
                    "per_class_counts": event.per_class_counts,
                    "mean_confidence": event.mean_confidence,
                }) + "\n")

        plan1 = draw_mask_plan(bundle.num_features, config.mask_rate, rngs["mask1"])
        plan2 = draw_mask_plan(bundle.num_features, config.mask_rate, rngs["mask2"])
        step = StepInputs(
            x_weak=features, edges=edges,
            keep1=keep_vector(plan1, bundle.num_features, dtype),
            keep2=keep_vector(plan2, bundle.num_features, dtype),
            train_idx=train_idx, train_targets=train_targets,
            pseudo=pseudo if in_stage_two else PseudoLabelSet.empty(bundle.num_classes),
            weights=config.weights, include_self_pairs=config.include_self_pairs,
            adjacency=bundle.adjacency, dropout=config.dropout, train_mode=True)

        tape = Tape()
        bound = bind_params(params, tape)
        terms = build_step_losses(bound, step, rngs["dropout"])
        total = terms["total"]
        if not np.isfinite(float(total.value)):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}: sup={float(terms['sup'].value)!r} "
                f"sacn={float(terms['sacn'].value)!r} w2s={float(terms['w2s'].value)!r}")
        tape.backward(total)
        grads = [t.grad if t.grad is not None else np.zeros_like(t.value)
                 for t in bound.flat()]
        adam_step(flat, grads, state, config.learning_rate, config.weight_decay)

        val_acc = None
        if has_val:
            probs = _eval_weak_probs(params, features, edges)
            val_acc = accuracy_from_predictions(probs, bundle.labels, bundle.split.val)
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_params = params.copy()
                since_improve = 0
            else:
                since_improve += 1

        record = EpochMetrics(epoch, float(terms["sup"].value), terms["cor_value"],
                              terms["de_value"],
                              float(terms["w2s"].value) if in_stage_two else 0.0,
                              val_acc)
        epochs.append(record)
        if metrics_out is not None:
            metrics_out.write(json.dumps(record.as_json()) + "\n")

        # the convergence check only applies in stage two
        if in_stage_two and has_val and since_improve >= config.patience:
            break

    improved_ever = has_val and np.isfinite(best_val)
    final = best_params if improved_ever else params
    test_acc = (evaluate(final, bundle, bundle.split.test, features, edges)
                if bundle.split.test.size else float("nan"))
    report = RunReport(seed, epochs, refreshes, test_acc,
                       float(best_val) if improved_ever else None,
                       best_epoch, time.perf_counter() - started)
    return final, report


# ---------------------------------------------------------------------------
# multi-seed protocol


@dataclass
class ExperimentReport:
    runs: list[RunReport]
    failures: list[dict]
    mean_test_accuracy: float
    std_test_accuracy: float
    parameter_count: int


def run_experiment(bundle: GraphBundle, config: TrainConfig,
                   metrics_dir=None, checkpoint_dir=None) -> ExperimentReport:
    """Train once per seed and aggregate mean/std test accuracy.

    Per-run failures are recorded without killing sibling runs.  Worker count
    comes from the SACN_WORKERS environment variable (default 1); aggregation
    order is by seed either way.
    """
    from .gat import save_checkpoint

    smoothed = prepare_features(bundle, config.filter_strength)
    edges = EdgeIndex.from_adjacency(bundle.adjacency)

    def one(seed: int):
        metrics_out = selection_out = None
        try:
            if metrics_dir is not None:
                metrics_out = open(os.path.join(metrics_dir, f"metrics-seed{seed}.jsonl"), "w")
                selection_out = open(os.path.join(metrics_dir, f"selection-seed{seed}.jsonl"), "w")
            params, report = train(bundle, config, seed, smoothed, edges,
                                   metrics_out, selection_out)
            if checkpoint_dir is not None:
                save_checkpoint(params, os.path.join(checkpoint_dir, f"checkpoint-seed{seed}.bin"))
            return seed, report, None
        except Exception as exc:  # recorded, not fatal to siblings
            return seed, None, f"{type(exc).__name__}: {exc}"
        finally:
            for fh in (metrics_out, selection_out):
                if fh is not None:
                    fh.close()

    workers = max(1, int(os.environ.get("SACN_WORKERS", "1")))
    if workers == 1:
        results = [one(s) for s in config.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, config.seeds))
    results.sort(key=lambda r: r[0])

    runs = [report for _, report, _ in results if report is not None]
    failures = [{"seed": seed, "error": err} for seed, _, err in results if err is not None]
    accuracies = [r.test_accuracy for r in runs if np.isfinite(r.test_accuracy)]
    mean = float(np.mean(accuracies)) if accuracies else float("nan")
    std = float(np.std(accuracies)) if accuracies else float("nan")
    dims_params = glorot_init(bundle.num_features, bundle.num_classes,
                              config.heads, config.head_dim)
    return ExperimentReport(runs, failures, mean, std, parameter_count(dims_params))


ABLATION_ARMS = (
    ("full", dict()),
    ("sup+w2s", dict(alpha1=0.0)),
    ("sup+sacn", dict(alpha2=0.0)),
)


def run_ablation(bundle: GraphBundle, config: TrainConfig,
                 metrics_dir=None) -> dict[str, ExperimentReport]:
    """Three arms: full objective, consensus removed, weak-to-strong removed."""
    out = {}
    for arm, overrides in ABLATION_ARMS:
        arm_weights = replace(config.weights, **overrides)
        arm_dir = None
        if metrics_dir is not None:
            arm_dir = os.path.join(metrics_dir, arm)
            os.makedirs(arm_dir, exist_ok=True)
        out[arm] = run_experiment(bundle, replace(config, weights=arm_weights), arm_dir)
    return out
