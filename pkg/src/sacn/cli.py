"""Command-line entry point: train / ablate / generate / gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Reports are
deterministic for identical flags and seeds (wall times go to stderr, never
into report JSON).  Flag values override a ``--config`` defaults file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import feature_mask
from .gat import EdgeIndex, bind_params, forward_view, glorot_init, parameter_count
from .graph import SplitSpec, load_bundle, make_split, save_bundle
from .losses import LossWeights, one_hot_targets
from .pseudo import QuotaSchedule, quota_at, select_class_aware
from .synth import generate_sbm, six_node_fixture
from .trainer import (ABLATION_ARMS, StepInputs, TrainConfig, build_step_losses,
                    prepare_features, run_ablation, run_experiment)

REPORT_FORMAT = "sacn-report/1"
GRADCHECK_TOLERANCE = 1e-4

CONFIG_KEYS = {
    "learning_rate", "weight_decay", "dropout", "epochs_pretrain", "epochs_max",
    "patience", "lambda", "alpha1", "alpha2", "mask_rate", "filter_strength",
    "quota_initial", "quota_growth", "quota_cap", "quota_round_length",
    "heads", "head_dim", "include_self_pairs", "seeds", "dtype",
    "label_rate", "val_size", "test_size", "split_seed",
}


class UsageError(ValueError):
    pass


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_flags(p):
        p.add_argument("--bundle", required=True, help="bundle directory")
        p.add_argument("--config", help="JSON defaults file; flags override it")
        p.add_argument("--label-rate", type=float, help="draw a fresh split at this rate")
        p.add_argument("--val-size", type=int)
        p.add_argument("--test-size", type=int)
        p.add_argument("--split-seed", type=int)
        p.add_argument("--seeds", type=int, help="number of runs (seeds 0..N-1)")
        p.add_argument("--c", type=int, dest="filter_strength", help="filter strength")
        p.add_argument("--lambda", type=float, dest="lam", help="decorrelation trade-off")
        p.add_argument("--alpha1", type=float)
        p.add_argument("--alpha2", type=float)
        p.add_argument("--mask-rate", type=float)
        p.add_argument("--lr", type=float, dest="learning_rate")
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--epochs-pretrain", type=int)
        p.add_argument("--epochs-max", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.add_argument("--out", default="out", help="output directory")

    add_train_flags(sub.add_parser("train", help="train and report mean/std accuracy"))
    add_train_flags(sub.add_parser("ablate", help="full vs alpha1=0 vs alpha2=0 arms"))

    gen = sub.add_parser("generate", help="write a synthetic block-model bundle")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--k", type=int, required=True)
    gen.add_argument("--p-in", type=float, required=True)
    gen.add_argument("--p-out", type=float, required=True)
    gen.add_argument("--m", type=int, default=32)
    gen.add_argument("--flip", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    check = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    check.add_argument("--eps", type=_positive_float, default=1e-5)
    check.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> tuple[TrainConfig, SplitSpec | None]:
    """Defaults <- config file <- flags; returns the train config and an
    optional fresh-split request."""
    file_values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        file_values = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(file_values) - CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return file_values.get(key, default)

    seeds_count = pick(args.seeds, "seeds", 10)
    if isinstance(seeds_count, list):
        seeds = tuple(int(s) for s in seeds_count)
    else:
        if int(seeds_count) < 1:
            raise UsageError("--seeds must be at least 1")
        seeds = tuple(range(int(seeds_count)))

    weights = LossWeights(
        lam=pick(args.lam, "lambda", 1e-3),
        alpha1=pick(args.alpha1, "alpha1", 1.0),
        alpha2=pick(args.alpha2, "alpha2", 0.5),
    )
    quota = QuotaSchedule(
        initial_fraction=file_values.get("quota_initial", 0.05),
        growth_per_round=file_values.get("quota_growth", 0.05),
        cap_fraction=file_values.get("quota_cap", 0.5),
        round_length=file_values.get("quota_round_length", 50),
    )
    config = TrainConfig(
        learning_rate=pick(args.learning_rate, "learning_rate", 0.01),
        weight_decay=pick(args.weight_decay, "weight_decay", 5e-4),
        dropout=pick(args.dropout, "dropout", 0.6),
        epochs_pretrain=pick(args.epochs_pretrain, "epochs_pretrain", 100),
        epochs_max=pick(args.epochs_max, "epochs_max", 1000),
        patience=pick(args.patience, "patience", 100),
        weights=weights,
        mask_rate=pick(args.mask_rate, "mask_rate", 0.3),
        filter_strength=pick(args.filter_strength, "filter_strength", None),
        quota=quota,
        heads=file_values.get("heads", 8),
        head_dim=file_values.get("head_dim", 6),
        include_self_pairs=file_values.get("include_self_pairs", True),
        seeds=seeds,
        dtype=pick(args.dtype, "dtype", "float32"),
    )

    label_rate = pick(args.label_rate, "label_rate", None)
    split_spec = None
    if label_rate is not None:
        split_spec = SplitSpec(
            label_rate=float(label_rate),
            val_size=pick(args.val_size, "val_size", 500),
            test_size=pick(args.test_size, "test_size", 1000),
            seed=pick(args.split_seed, "split_seed", 0),
        )
    return config, split_spec


def _config_json(config: TrainConfig, split_spec: SplitSpec | None) -> dict:
    payload = asdict(config)
    payload["weights"] = asdict(config.weights)
    payload["quota"] = asdict(config.quota)
    payload["seeds"] = list(config.seeds)
    payload["split"] = asdict(split_spec) if split_spec else None
    return payload


def _report_runs(report) -> list[dict]:
    out = []
    for run in report.runs:
        out.append({
            "seed": run.seed,
            "test_accuracy": run.test_accuracy,
            "best_val_accuracy": run.best_val_accuracy,
            "best_epoch": run.best_epoch,
            "epochs_run": len(run.epochs),
            "loss_curves": {
                "l_sup": [e.l_sup for e in run.epochs],
                "l_cor": [e.l_cor for e in run.epochs],
                "l_de": [e.l_de for e in run.epochs],
                "l_w2s": [e.l_w2s for e in run.epochs],
                "val_acc": [e.val_acc for e in run.epochs],
            },
        })
    return out


def _load_split_bundle(args):
    bundle_path = Path(args.bundle)
    if not bundle_path.is_dir():
        raise UsageError(f"bundle directory not found: {bundle_path}")
    bundle = load_bundle(bundle_path)
    config, split_spec = resolve_config(args)
    if split_spec is not None:
        bundle = make_split(bundle, split_spec)
    elif bundle.split.train.size == 0:
        raise UsageError(
            f"bundle {bundle_path} has no split; pass --label-rate to draw one")
    return bundle, config, split_spec


def cmd_train(args) -> int:
    bundle, config, split_spec = _load_split_bundle(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_experiment(bundle, config, metrics_dir=str(out_dir),
                            checkpoint_dir=str(out_dir))
    payload = {
        "format_version": REPORT_FORMAT,
        "command": "train",
        "bundle": {"path": str(args.bundle), "name": bundle.name,
                   "num_nodes": bundle.num_nodes, "num_features": bundle.num_features,
                   "num_classes": bundle.num_classes},
        "config": _config_json(config, split_spec),
        "parameter_count": report.parameter_count,
        "mean_test_accuracy": report.mean_test_accuracy,
        "std_test_accuracy": report.std_test_accuracy,
        "runs": _report_runs(report),
        "failures": report.failures,
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    for run in report.runs:
        print(f"seed {run.seed}: test_acc={run.test_accuracy:.4f} "
              f"(best epoch {run.best_epoch}, {run.wall_time_sec:.1f}s)", file=sys.stderr)
    print(f"mean test accuracy {report.mean_test_accuracy:.4f} "
          f"+- {report.std_test_accuracy:.4f} over {len(report.runs)} runs")
    if report.failures:
        print(f"{len(report.failures)} run(s) failed; see report.json", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    bundle, config, split_spec = _load_split_bundle(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    arms = run_ablation(bundle, config, metrics_dir=str(out_dir))
    payload = {
        "format_version": REPORT_FORMAT,
        "command": "ablate",
        "bundle": {"path": str(args.bundle), "name": bundle.name,
                   "num_nodes": bundle.num_nodes, "num_features": bundle.num_features,
                   "num_classes": bundle.num_classes},
        "config": _config_json(config, split_spec),
        "arms": {arm: {
            "mean_test_accuracy": rep.mean_test_accuracy,
            "std_test_accuracy": rep.std_test_accuracy,
            "runs": _report_runs(rep),
            "failures": rep.failures,
        } for arm, rep in arms.items()},
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "mean_test_accuracy", "std_test_accuracy", "runs"])
        for arm, _ in ABLATION_ARMS:
            rep = arms[arm]
            writer.writerow([arm, f"{rep.mean_test_accuracy:.4f}",
                             f"{rep.std_test_accuracy:.4f}", len(rep.runs)])
    failed = False
    for arm, _ in ABLATION_ARMS:
        rep = arms[arm]
        print(f"{arm}: {rep.mean_test_accuracy:.4f} +- {rep.std_test_accuracy:.4f}")
        failed = failed or bool(rep.failures)
    return 1 if failed else 0


def cmd_generate(args) -> int:
    try:
        bundle = generate_sbm(args.n, args.k, args.p_in, args.p_out, args.m,
                              args.flip, args.seed)
    except ValueError as exc:  # bad probabilities/sizes are usage errors
        raise UsageError(str(exc)) from exc
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: n={bundle.num_nodes} m={bundle.num_features} "
          f"k={bundle.num_classes} edges={bundle.adjacency.nnz // 2}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck command


def gradcheck_terms(eps: float, seed: int) -> dict[str, float]:
    """Max relative finite-difference error of every loss term on the 6-node fixture.

    The fixture, parameter init, and augmentation masks are all fixed: the
    check must probe a configuration with no flat attention directions, where
    finite differences are pure roundoff noise against an exact zero.  ``seed``
    only orders the finite-difference coordinate sampling.  Dropout is
    disabled and pseudolabels are selected once from the initial weak
    predictions and held constant, so every closure is deterministic.
    """
    bundle = six_node_fixture()
    config = TrainConfig(heads=2, head_dim=3, epochs_pretrain=1, epochs_max=1,
                         filter_strength=2, dtype="float64", seeds=(0,))
    features = prepare_features(bundle, config.filter_strength)
    edges = EdgeIndex.from_adjacency(bundle.adjacency)
    params = glorot_init(bundle.num_features, bundle.num_classes, config.heads,
                         config.head_dim, seed=0)
    x_strong1, _ = feature_mask(features, 0.4, np.random.default_rng(1))
    x_strong2, _ = feature_mask(features, 0.4, np.random.default_rng(2))
    train_targets = one_hot_targets(bundle.labels, bundle.split.train, bundle.num_classes)

    probs = forward_view(features, edges, params, train_mode=False).y.value
    unlabeled = bundle.unlabeled_indices()
    available = np.bincount(probs[unlabeled].argmax(axis=1), minlength=bundle.num_classes)
    pseudo = select_class_aware(probs, unlabeled,
                                quota_at(QuotaSchedule(initial_fraction=0.5), 0, available))
    if pseudo.selected_count == 0:
        raise RuntimeError("fixture selected no pseudolabels; gradcheck would be vacuous")

    step = StepInputs(
        x_weak=features, x_strong1=x_strong1, x_strong2=x_strong2, edges=edges,
        train_idx=bundle.split.train, train_targets=train_targets, pseudo=pseudo,
        weights=LossWeights(lam=0.05, alpha1=1.0, alpha2=0.5),
        include_self_pairs=True, adjacency=bundle.adjacency,
        dropout=0.0, train_mode=False)

    def term_closure(name):
        def closure(leaves):
            bound = _rebind(params, leaves)
            terms = build_step_losses(bound, step)
            return terms[name]
        return closure

    flat_values = params.flat()
    results = {}
    for name in ("sup", "sacn", "w2s", "total"):
        results["l_" + name if name != "total" else "l_two"] = ad.gradient_check(
            term_closure(name), flat_values, eps=eps, seed=seed)

    # correlation and decorrelation probed through the encoder as well
    from .losses import loss_cor, loss_de, normalize_latent

    def cor_closure(leaves):
        bound = _rebind(params, leaves)
        z1 = forward_view(x_strong1, edges, bound, False).z
        z2 = forward_view(x_strong2, edges, bound, False).z
        return loss_cor(normalize_latent(z1), normalize_latent(z2), bundle.adjacency)

    def de_closure(leaves):
        bound = _rebind(params, leaves)
        z1 = forward_view(x_strong1, edges, bound, False).z
        z2 = forward_view(x_strong2, edges, bound, False).z
        return loss_de(normalize_latent(z1), normalize_latent(z2))

    results["l_cor"] = ad.gradient_check(cor_closure, flat_values, eps=eps, seed=seed)
    results["l_de"] = ad.gradient_check(de_closure, flat_values, eps=eps, seed=seed)
    return results


def _rebind(params, leaves):
    """Reshape a flat leaf-tensor list back into the two-layer structure."""
    from .gat import BoundLayer, BoundParams
    heads = params.layer1.heads
    layer1 = BoundLayer(leaves[0:2 * heads:2], leaves[1:2 * heads:2])
    layer2 = BoundLayer([leaves[2 * heads]], [leaves[2 * heads + 1]])
    return BoundParams(layer1, layer2, leaves[0].tape)


def cmd_gradcheck(args) -> int:
    results = gradcheck_terms(args.eps, args.seed)
    worst = 0.0
    for name in ("l_cor", "l_de", "l_sacn", "l_sup", "l_w2s", "l_two"):
        err = results[name]
        worst = max(worst, err)
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"worst error {worst:.3e} exceeds {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "ablate": cmd_ablate,
                "generate": cmd_generate, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
