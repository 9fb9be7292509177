"""Command-line front end.

Subcommands: train, eval, marginals, gen-synthetic, bench-dynamic.
Machine-readable output is one JSON record per line with fixed field
names; a manifest JSON captures everything needed to replay a run.
Exit codes: 0 success, 2 input error, 3 configuration/solver mismatch,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .datasets import (
    dataset_digest,
    read_dataset,
    read_weights,
    write_dataset,
    write_weights,
)
from .errors import (
    CapacityError,
    DatasetError,
    DegenerateInstanceError,
    InternalInvariantError,
    PreconditionError,
    StructuralError,
)
from .gumbel import EstimatorConfig, conditional_counting_marginals, counting_marginals
from .model import (
    HAMMING,
    LossSpec,
    PAIRWISE_FULL,
    PAIRWISE_POTTS,
    UNIT_WEIGHTS,
    VOLUME_BALANCED,
    WEIGHTED_HAMMING,
    WeightLayout,
    ZERO_ONE,
    compile_potentials,
    loss as eval_loss,
    volume_weights,
)
from .synth import gen_chain_dataset, gen_grid_dataset
from .training import (
    PREDICT_MAP,
    PREDICT_MARGINAL,
    TrainConfig,
    predict,
    train,
    train_semisupervised,
)

_LOSS_FLAGS = {"zero-one": ZERO_ONE, "hamming": HAMMING,
               "weighted-hamming": WEIGHTED_HAMMING}

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_INTERNAL = 4


def _loss_spec(flag: str, weight_rule: str = "volume-balanced") -> LossSpec:
    kind = _LOSS_FLAGS[flag]
    if kind == WEIGHTED_HAMMING:
        if weight_rule == "unit":
            # theta = 1 everywhere: the plain Hamming objective
            return LossSpec(kind, UNIT_WEIGHTS)
        return LossSpec(kind, VOLUME_BALANCED)
    return LossSpec(kind)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _write_manifest(path: str, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _layout_for(instances, num_labels: int, form: str) -> WeightLayout:
    x = instances[0]
    return WeightLayout(num_labels, x.node_features.shape[1],
                        x.edge_features.shape[1], form)


def _require_labeled(instances, what: str) -> None:
    for i, x in enumerate(instances, start=1):
        if not x.fully_labeled:
            raise DatasetError(f"{what} requires full labels", line=i)


def _validate_weighted(instances) -> None:
    for i, x in enumerate(instances, start=1):
        if x.labels is not None and x.fully_labeled:
            try:
                volume_weights(x.labels, x.volumes())
            except DegenerateInstanceError as exc:
                raise DatasetError(f"degenerate instance for weighted loss: "
                                   f"{exc}", line=i) from exc
            except StructuralError as exc:
                raise DatasetError(str(exc), line=i) from exc


def cmd_train(args) -> int:
    data = read_dataset(args.data)
    if not data:
        raise DatasetError("training dataset is empty")
    _require_labeled(data, "training")
    loss_spec = _loss_spec(args.loss, args.weight_rule)
    if loss_spec.weight_rule == VOLUME_BALANCED:
        _validate_weighted(data)
    unlabeled = []
    if args.unlabeled:
        unlabeled = read_dataset(args.unlabeled)
    num_labels = max(max(x.model.label_counts) for x in data + unlabeled)
    form = args.pairwise_form
    if form == "auto":
        form = PAIRWISE_POTTS if args.solver == "graphcut" else PAIRWISE_FULL
    layout = _layout_for(data, num_labels, form)
    cfg = TrainConfig(
        lam=args.lam, iters=args.iters, batch=args.batch, loss=loss_spec,
        seed=args.seed, solver=args.solver, layout=layout, kappa=args.kappa,
        inference_samples=args.samples,
        acceleration=not args.no_acceleration,
        dynamic_cuts=not args.no_dynamic_cuts)
    t0 = time.perf_counter()
    if unlabeled:
        report = train_semisupervised(data, unlabeled, cfg)
    else:
        report = train(data, cfg)
    seconds = time.perf_counter() - t0
    write_weights(args.out, report.averaged, last_iterate=report.weights,
                  extra={"seed": args.seed, "loss": args.loss})
    tail = report.objective_estimates[-min(100, len(report.objective_estimates)):]
    metrics = [
        {"metric": "objective_estimate_tail_mean", "value": float(np.mean(tail)),
         "stderr": float(np.std(tail) / max(1, np.sqrt(tail.size))),
         "seed": args.seed, "variant": None},
        {"metric": "train_seconds", "value": seconds, "stderr": None,
         "seed": args.seed, "variant": None},
    ]
    for rec in metrics:
        _emit(rec)
    manifest = {
        "command": "train",
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": args.seed,
        "datasets": {args.data: dataset_digest(args.data),
                     **({args.unlabeled: dataset_digest(args.unlabeled)}
                        if args.unlabeled else {})},
        "artifacts": {"weights": args.out},
        "counters": report.counters.as_dict(),
        "phase_seconds": report.phase_seconds,
        "metrics": metrics,
    }
    _write_manifest(args.out + ".manifest.json", manifest)
    print(f"trained {args.iters} iterations in {seconds:.1f}s; "
          f"weights -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = read_dataset(args.data)
    if not data:
        raise DatasetError("evaluation dataset is empty")
    _require_labeled(data, "evaluation")
    w = read_weights(args.weights)
    loss_spec = _loss_spec(args.loss, args.weight_rule)
    if loss_spec.weight_rule == VOLUME_BALANCED:
        _validate_weighted(data)
    cfg = TrainConfig(lam=1.0, iters=1, batch=1, loss=loss_spec,
                      seed=args.seed, solver=args.solver, layout=w.layout,
                      inference_samples=args.samples)
    losses = []
    for i, x in enumerate(data):
        y_hat = predict(w, x, args.mode, cfg, instance_index=i)
        losses.append(eval_loss(loss_spec, x.labels, y_hat, x.volumes()))
    losses = np.asarray(losses)
    mean = float(losses.mean())
    std = float(losses.std(ddof=1)) if len(losses) > 1 else 0.0
    record = {"metric": f"{args.loss}_mean", "value": mean,
              "stderr": std / max(1.0, np.sqrt(len(losses))),
              "seed": args.seed, "variant": args.mode}
    _emit(record)
    print(f"{args.loss} over {len(losses)} instances: "
          f"{mean:.4f} +- {std:.4f} (std across instances)", file=sys.stderr)
    if args.out:
        manifest = {
            "command": "eval", "version": __version__,
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": args.seed,
            "datasets": {args.data: dataset_digest(args.data)},
            "artifacts": {"weights": args.weights},
            "metrics": [record, {"metric": f"{args.loss}_std", "value": std,
                                 "stderr": None, "seed": args.seed,
                                 "variant": args.mode}],
        }
        _write_manifest(args.out, manifest)
    return EXIT_OK


def cmd_marginals(args) -> int:
    data = read_dataset(args.data)
    if not data:
        raise DatasetError("dataset is empty")
    w = read_weights(args.weights)
    rows_out = []
    for i, x in enumerate(data):
        p = compile_potentials(w, x)
        est = EstimatorConfig(args.samples, args.seed, args.solver,
                              stream_context=i + 1)
        given = x.given_labels() if args.conditional else {}
        if given:
            q = conditional_counting_marginals(p, given, est)
        else:
            q = counting_marginals(p, est)
        rows_out.append({"instance": i,
                         "marginals": [r.tolist() for r in q.rows()]})
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in rows_out:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
    _emit({"metric": "marginals_written", "value": len(rows_out),
           "stderr": None, "seed": args.seed, "variant": None})
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.kind == "chain":
        if args.num_vars is None:
            raise StructuralError("--vars is required for chains")
        instances, teacher = gen_chain_dataset(
            args.num, args.num_vars, args.labels, args.feat_dim,
            seed=args.seed, teacher_seed=args.teacher_seed,
            teacher_scale=args.teacher_scale, label_noise=args.label_noise)
    else:
        if args.side is None:
            raise StructuralError("--side is required for grids")
        instances, teacher = gen_grid_dataset(
            args.num, args.side, args.feat_dim, seed=args.seed,
            teacher_seed=args.teacher_seed, teacher_scale=args.teacher_scale,
            label_noise=args.label_noise)
    write_dataset(args.out, instances)
    write_weights(args.out + ".teacher.json", teacher,
                  extra={"teacher_seed": args.teacher_seed,
                         "kind": args.kind})
    _emit({"metric": "instances_written", "value": args.num, "stderr": None,
           "seed": args.seed, "variant": args.kind})
    print(f"wrote {args.num} {args.kind} instances -> {args.out} "
          f"(digest {dataset_digest(args.out)[:12]})", file=sys.stderr)
    return EXIT_OK


_BENCH_VARIANTS = {
    "basic": (False, False),  # (acceleration/GR, dynamic cuts/DC)
    "DC": (False, True),
    "GR": (True, False),
    "DC+GR": (True, True),
}


def cmd_bench_dynamic(args) -> int:
    variants = args.variants.split(",")
    for v in variants:
        if v not in _BENCH_VARIANTS:
            raise StructuralError(f"unknown variant {v!r}")
    instances, _ = gen_grid_dataset(args.train_size, args.side,
                                    args.feat_dim, seed=args.seed,
                                    teacher_scale=1.0)
    layout = _layout_for(instances, 2, PAIRWISE_POTTS)
    results = {}
    for v in variants:
        gr, dc = _BENCH_VARIANTS[v]
        cfg = TrainConfig(lam=args.lam, iters=args.iters, batch=args.batch,
                          loss=LossSpec(HAMMING), seed=args.seed,
                          solver="graphcut", layout=layout,
                          acceleration=gr, dynamic_cuts=dc,
                          stepsize=args.stepsize)
        t0 = time.perf_counter()
        report = train(instances, cfg)
        seconds = time.perf_counter() - t0
        results[v] = (report, seconds)
        rec = {"metric": "bench_seconds", "value": seconds, "stderr": None,
               "seed": args.seed, "variant": v,
               "iterations": args.iters,
               "map_solves": report.counters.map_solves,
               "clamp_solves": report.counters.clamp_solves,
               "clamp_skipped": report.counters.clamp_skipped,
               "skipped_fraction_series":
                   [[h, round(f, 6)] for h, f in
                    report.skipped_fraction_series[:5] +
                    report.skipped_fraction_series[-5:]]}
        _emit(rec)

    # all variants are exact rewrites of the same updates
    names = list(results)
    base = results[names[0]][0].weights.values
    max_diff = 0.0
    for v in names[1:]:
        max_diff = max(max_diff, float(np.max(np.abs(
            results[v][0].weights.values - base))))
    _emit({"metric": "trajectory_max_diff", "value": max_diff,
           "stderr": None, "seed": args.seed, "variant": ",".join(names)})

    print(f"\n{'variant':>8} {'seconds':>9} {'solves':>8} {'skipped':>8}",
          file=sys.stderr)
    for v in names:
        rep, sec = results[v]
        print(f"{v:>8} {sec:9.2f} "
              f"{rep.counters.map_solves + rep.counters.clamp_solves:8d} "
              f"{rep.counters.clamp_skipped:8d}", file=sys.stderr)
    if args.out:
        manifest = {
            "command": "bench-dynamic", "version": __version__,
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": args.seed,
            "trajectory_max_diff": max_diff,
            "variants": {v: {"seconds": sec,
                             **results[v][0].counters.as_dict()}
                         for v, (rep, sec) in
                         ((v, results[v]) for v in names)},
        }
        _write_manifest(args.out, manifest)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gumbelmap",
        description="Perturb-and-MAP learning and inference for pairwise "
                    "models")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train weights on a labeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--loss", choices=sorted(_LOSS_FLAGS), default="hamming")
    p.add_argument("--weight-rule", choices=["volume-balanced", "unit"],
                   default="volume-balanced")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--solver", choices=["chain", "graphcut", "brute"],
                   default="chain")
    p.add_argument("--unlabeled", default=None)
    p.add_argument("--pairwise-form", choices=["auto", "full", "potts"],
                   default="auto")
    p.add_argument("--no-acceleration", action="store_true")
    p.add_argument("--no-dynamic-cuts", action="store_true")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on a labeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--loss", choices=sorted(_LOSS_FLAGS), default="hamming")
    p.add_argument("--weight-rule", choices=["volume-balanced", "unit"],
                   default="volume-balanced")
    p.add_argument("--mode", choices=[PREDICT_MAP, PREDICT_MARGINAL],
                   default=PREDICT_MARGINAL)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--solver", choices=["chain", "graphcut", "brute"],
                   default="chain")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("marginals", help="write counting-marginal tables")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--solver", choices=["chain", "graphcut", "brute"],
                   default="chain")
    p.add_argument("--conditional", action="store_true",
                   help="treat present labels as given")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_marginals)

    p = sub.add_parser("gen-synthetic", help="generate a teacher dataset")
    p.add_argument("--kind", choices=["chain", "grid"], required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--vars", dest="num_vars", type=int, default=None)
    p.add_argument("--side", type=int, default=None)
    p.add_argument("--labels", type=int, default=2)
    p.add_argument("--feat-dim", type=int, default=4)
    p.add_argument("--teacher-seed", type=int, default=None)
    p.add_argument("--teacher-scale", type=float, default=1.0)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("bench-dynamic",
                       help="compare plain, dynamic-cut, and solve-skipping "
                            "training inner loops")
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--train-size", type=int, default=4)
    p.add_argument("--feat-dim", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.005)
    p.add_argument("--stepsize", type=float, default=0.005,
                   help="constant stepsize; convergence then spreads over "
                        "the whole run, which is what the skip-rate trend "
                        "measures")
    p.add_argument("--variants", default="basic,DC,GR,DC+GR")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_bench_dynamic)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (StructuralError, PreconditionError, CapacityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InternalInvariantError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
