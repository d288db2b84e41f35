"""Command-line entry point: ``entropy-gate <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (including bad usage), 2 I/O error.
A ``--config FILE.json`` supplies flag defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import benchmarks, clpso
from .errors import EntropyGateError, IoFailure, ValidationError
from .pipeline import (
    DEFAULT_FOLDS,
    GridOracleSpec,
    PredictionMatrix,
    SyntheticPredictorSpec,
    build_prediction_matrix,
    evaluate,
    grid_oracle,
    load_split,
    make_masks,
    segment,
    synthesize_predictions,
    train,
)
from .tensor_io import (
    DatasetManifest,
    ManifestEntry,
    StackRef,
    ThresholdDocument,
    ensure_dir,
    read_manifest,
    read_mask,
    read_stack,
    read_thresholds,
    write_manifest,
    write_mask,
    write_stack,
    write_thresholds,
)

log = logging.getLogger("entropy_gate")

DEFAULT_MODELS = ["strong:0.9", "weak-a:0.55", "weak-b:0.6"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fresh_seed() -> int:
    return int(np.random.SeedSequence().entropy % (2**31))


def _resolve_seed(args) -> int:
    if args.seed is None:
        args.seed = _fresh_seed()
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _parse_model(text: str, index: int, seed: int) -> SyntheticPredictorSpec:
    parts = text.split(":")
    if not 2 <= len(parts) <= 4:
        raise ValidationError(f"model spec {text!r} must be NAME:ACC[:SHARPNESS[:BIAS]]")
    try:
        acc = float(parts[1])
        sharp = float(parts[2]) if len(parts) > 2 else 4.0
        bias = int(parts[3]) if len(parts) > 3 else 0
    except ValueError as exc:
        raise ValidationError(f"model spec {text!r}: {exc}") from exc
    model_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    return SyntheticPredictorSpec(acc, sharp, bias, model_seed, parts[0])


def _swarm_config(args) -> clpso.SwarmConfig:
    return clpso.SwarmConfig(
        pop_size=args.pop,
        max_iter=args.iters,
        c=args.c,
        refresh_gap=args.refresh_gap,
        v_max_fraction=args.vmax_frac,
        seed=args.seed,
        learning_prob_mode=args.pc_mode,
        inertia_literal=args.inertia_literal,
    )


def _split_matrix(manifest: DatasetManifest, split: str) -> PredictionMatrix:
    if split == "train":
        return build_prediction_matrix(manifest)
    loaded = load_split(manifest, split)
    if not loaded:
        raise ValidationError(f"manifest has no {split} images")
    return PredictionMatrix.from_stacks(
        [e.image_id for e, _, _ in loaded],
        [s for _, s, _ in loaded],
        [m for _, _, m in loaded],
        manifest.class_count,
        manifest.model_names,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    seed = _resolve_seed(args)
    specs = [_parse_model(t, k, seed) for k, t in enumerate(args.model or DEFAULT_MODELS)]
    masks = make_masks(args.images + args.test_images, args.height, args.width, args.classes, seed)
    manifest = synthesize_predictions(
        masks[: args.images],
        specs,
        args.folds,
        args.out_dir,
        class_count=args.classes,
        test_masks=masks[args.images:],
    )
    manifest.extra["synth_seed"] = seed
    write_manifest(manifest, Path(args.out_dir) / "manifest.json")
    print(f"wrote {len(manifest.entries)} images for models {list(manifest.model_names)} "
          f"to {Path(args.out_dir) / 'manifest.json'}")


def cmd_stack(args):
    manifest = read_manifest(args.manifest)
    matrix = build_prediction_matrix(manifest)
    print(f"prediction matrix: {len(matrix.image_ids)} images, {matrix.n_pixels} pixels, "
          f"K={matrix.k_models}, M={matrix.class_count}, folds={manifest.folds}")
    if args.out_dir is None:
        return
    out = ensure_dir(args.out_dir)
    ensure_dir(out / "stacks")
    entries = []
    loaded = {e.image_id: (s, e) for e, s, _ in load_split(manifest, "train")}
    loaded.update({e.image_id: (s, e) for e, s, _ in load_split(manifest, "test", require_masks=False)})
    for image_id, (stack, entry) in loaded.items():
        rel = f"stacks/{image_id}.pten"
        write_stack(stack, out / rel)
        folds = set()
        for ref in entry.stacks:
            folds |= set(ref.trained_folds or ())
        mask = str(manifest.resolve(entry.mask)) if entry.mask else None
        entries.append(ManifestEntry(image_id, mask, [StackRef(rel, trained_folds=tuple(sorted(folds)))],
                                     entry.fold, entry.split))
    combined = DatasetManifest(manifest.model_names, manifest.class_count, entries, manifest.folds, out)
    write_manifest(combined, out / "manifest.json")
    print(f"wrote combined manifest {out / 'manifest.json'}")


def cmd_optimize(args):
    _resolve_seed(args)
    config = _swarm_config(args)
    manifest = read_manifest(args.manifest)
    doc, trace = train(manifest, config, workers=args.threads)
    doc.config["manifest"] = args.manifest
    write_thresholds(doc, args.out)
    if args.trace:
        trace.write_csv(args.trace)
    log.info("resolved config: %s", json.dumps(doc.config, sort_keys=True))
    print(f"pop={config.pop_size} iters={config.max_iter} seed={doc.seed}")
    print(f"training dice {doc.achieved_dice:.6f}; thresholds "
          + ", ".join(f"{n}={t:.4f}" for n, t in zip(doc.model_names, doc.thresholds)))


def cmd_fuse(args):
    doc = read_thresholds(args.thresholds)
    if args.stack:
        if not args.out:
            raise ValidationError("--stack requires --out")
        write_mask(segment(read_stack(args.stack), doc), args.out)
        print(f"wrote {args.out}")
        return
    if not args.manifest or not args.out_dir:
        raise ValidationError("fuse needs --stack/--out or --manifest/--out-dir")
    manifest = read_manifest(args.manifest)
    out = ensure_dir(args.out_dir)
    loaded = load_split(manifest, args.split, require_masks=False)
    for entry, stack, _ in loaded:
        write_mask(segment(stack, doc), out / f"{entry.image_id}.pgm")
    print(f"wrote {len(loaded)} masks to {out}")


def cmd_evaluate(args):
    manifest = read_manifest(args.manifest)
    matrix = _split_matrix(manifest, args.split)
    doc = read_thresholds(args.thresholds) if args.thresholds else None
    pred = None
    if args.pred_dir:
        pred = [read_mask(Path(args.pred_dir) / f"{i}.pgm") for i in matrix.image_ids]
    report = evaluate(matrix, doc, pred)
    report.extra["split"] = args.split
    if doc is not None:
        report.extra["seed"] = doc.seed
    sys.stdout.write(report.format_table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")


def cmd_oracle(args):
    manifest = read_manifest(args.manifest)
    matrix = build_prediction_matrix(manifest)
    spec = GridOracleSpec(args.delta, matrix.k_models, matrix.class_count)
    best, dice = grid_oracle(matrix, spec, workers=args.threads)
    print(f"grid {spec.size()} points; best dice {dice:.6f} at "
          + ", ".join(f"{n}={t:.4f}" for n, t in zip(matrix.model_names, best)))
    if args.out:
        doc = ThresholdDocument(best, matrix.class_count, dice, None, matrix.model_names,
                                config={"oracle_delta": args.delta, "manifest": args.manifest})
        write_thresholds(doc, args.out)


def cmd_bench(args):
    _resolve_seed(args)
    names = args.functions.split(",")
    unknown = [n for n in names if n not in benchmarks.FUNCTIONS]
    if unknown:
        raise ValidationError(f"unknown test functions {unknown}; choose from {sorted(benchmarks.FUNCTIONS)}")
    trace_dir = ensure_dir(args.trace_dir) if args.trace_dir else None
    print(f"{'function':<12}{'median':>14}{'best':>14}{'worst':>14}{'evals':>8}")
    for name in names:
        func, half = benchmarks.FUNCTIONS[name]
        finals, evals = [], 0
        for s in range(args.seeds):
            cfg = clpso.SwarmConfig(
                pop_size=args.pop, max_iter=args.iters, c=args.c, refresh_gap=args.refresh_gap,
                v_max_fraction=args.vmax_frac, seed=args.seed + s, learning_prob_mode=args.pc_mode,
                inertia_literal=args.inertia_literal,
            )
            result, trace = clpso.run_swarm(
                cfg, lambda x: -func(x), np.full(args.dim, -half), np.full(args.dim, half)
            )
            finals.append(-result.best_fitness)
            evals = max(evals, result.evaluations)
            if trace_dir is not None:
                trace.write_csv(trace_dir / f"{name}_seed{args.seed + s}.csv")
        print(f"{name:<12}{np.median(finals):>14.4e}{min(finals):>14.4e}{max(finals):>14.4e}{evals:>8}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _swarm_flags(p):
    p.add_argument("--pop", type=int, default=10, help="swarm size (default 10)")
    p.add_argument("--iters", type=int, default=500, help="iterations (default 500)")
    p.add_argument("--c", type=float, default=1.49445, help="acceleration constant")
    p.add_argument("--refresh-gap", type=int, default=7)
    p.add_argument("--vmax-frac", type=float, default=0.2, help="velocity bound as a fraction of box width")
    p.add_argument("--pc-mode", choices=clpso.PC_MODES, default="uniform")
    p.add_argument("--inertia-literal", action="store_true",
                   help="use the product-form inertia schedule instead of linear decay")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = _Parser(prog="entropy-gate", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag defaults")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--test-images", type=int, default=5)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--folds", type=int, default=DEFAULT_FOLDS)
    p.add_argument("--model", action="append", metavar="NAME:ACC[:SHARP[:BIAS]]")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stack", help="validate the out-of-fold prediction matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", help="also write combined per-image stacks and a manifest")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("optimize", help="fit entropy thresholds with CLPSO")
    p.add_argument("--manifest", required=True)
    _swarm_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the per-iteration trace as CSV")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("fuse", help="apply thresholds to stacks and write masks")
    p.add_argument("--thresholds", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out-dir")
    p.add_argument("--stack")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="Dice report against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--thresholds")
    p.add_argument("--pred-dir", help="directory of <image id>.pgm predicted masks")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="exhaustive grid search over thresholds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--delta", type=float, default=0.0693)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench-clpso", help="run the swarm on classic test functions")
    p.add_argument("--functions", default="sphere,rastrigin,rosenbrock,ackley,griewank")
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--trace-dir")
    _swarm_flags(p)
    p.set_defaults(func=cmd_bench, iters=499)
    return parser


def _apply_config_file(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read config {known.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {known.config} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {known.config} must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    parser.set_defaults(**cfg)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, EntropyGateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
