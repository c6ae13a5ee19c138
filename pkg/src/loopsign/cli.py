"""Command-line entry point: ``loopsign <subcommand> ...``.

Exit status is 0 on success, 1 when a verification suite reports a failing
check or training diverges, and 2 for configuration or data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MANIFOLD_SETTINGS, VARIANTS, RunConfig
from .errors import ConfigError, DataError

log = logging.getLogger("loopsign")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = cfg.with_overrides(list(args.overrides))
    return cfg.validate()


def _manifest(path):
    from .data import DatasetManifest

    return DatasetManifest.load(path)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted-path overrides, e.g. loop.loops=3")


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train

    cfg = _load_config(args)
    if args.manifest:
        cfg = cfg.with_overrides({"data.manifest": args.manifest})
    if args.output_dir:
        cfg = cfg.with_overrides({"output_dir": args.output_dir})
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    summary = {"output_dir": cfg.output_dir, "final_loss": result.losses[-1] if result.losses else None,
               "seconds": round(result.seconds, 2), **(result.evaluation or {})}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint

    model, vocab = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    if args.split:
        manifest = manifest.split(args.split)
    metrics = evaluate(model, manifest, vocab)
    text = json.dumps(metrics, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _parse_pairs(text: str):
    pairs = []
    for item in text.split(","):
        try:
            u, l = item.lower().split("x")
            pairs.append((int(u), int(l)))
        except ValueError:
            raise ConfigError(f"loop pair {item!r} is not of the form UxL") from None
    return tuple(pairs)


def cmd_ablate(args) -> int:
    from .ablate import DEFAULT_LOOP_PAIRS, ablate, pair_mismatches

    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.data.manifest
    if not manifest_path:
        raise ConfigError("ablate needs --manifest or data.manifest")
    pairs = _parse_pairs(args.pairs) if args.pairs else DEFAULT_LOOP_PAIRS
    rows = ablate(
        args.axis, cfg, _manifest(manifest_path), args.output_dir, loop_pairs=pairs, dry_run=args.dry_run,
        log=lambda r: print(f"{r['row']:<16} params={r['params']:<8} depth={r['effective_depth']:<3} "
                            f"P-I={r['p_i']} P-C={r['p_c']}", flush=True),
    )
    print(f"wrote {Path(args.output_dir) / 'results.csv'} ({len(rows)} rows)")
    bad = pair_mismatches(rows)
    if bad:
        print(f"FAIL parameter counts differ within loop pairs: {', '.join(bad)}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import GRAD_TOL, format_table, run_gradcheck, summarize_gradcheck

    records, seconds = run_gradcheck(args.variants, args.manifolds, coords=args.coords)
    rows = summarize_gradcheck(records)
    print(format_table(rows))
    failing = [r for r in records if not r.passed]
    for r in failing:
        print(f"FAIL {r.variant}/{r.manifold} {r.param} [{r.probe}]: analytic={r.analytic:.6e} "
              f"numeric={r.numeric:.6e} rel_err={r.rel_err:.2e} (tol {GRAD_TOL:g})")
    print(f"{len(records)} probes, {len(failing)} failing, {seconds:.1f} s")
    return EXIT_FAILED if failing else EXIT_OK


def cmd_geomtest(args) -> int:
    from .checks import format_table, run_geomtest

    results, seconds = run_geomtest(args.seed)
    print(format_table(results))
    failing = [r for r in results if not r.passed]
    for r in failing:
        print(f"FAIL {r.group}/{r.name}: {r.value:.3e} (limit {r.threshold:g})")
    print(f"{len(results)} checks, {len(failing)} failing, {seconds:.2f} s")
    return EXIT_FAILED if failing else EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import SyntheticTaskSpec, generate_synthetic

    spec = SyntheticTaskSpec(
        num_classes=args.classes, frames=args.frames, samples_per_class=args.samples_per_class,
        noise=args.noise, seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.output_dir)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(Path(args.output_dir) / "manifest.json"), **counts}))
    return EXIT_OK


def cmd_export(args) -> int:
    from .train import export_embeddings, load_checkpoint

    model, vocab = load_checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    if vocab != manifest.vocabulary:
        raise ConfigError("checkpoint vocabulary does not match the dataset vocabulary")
    if args.split:
        manifest = manifest.split(args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    rows = export_embeddings(model, manifest, args.out)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .ablate import AXES

    parser = argparse.ArgumentParser(prog="loopsign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
    p.add_argument("--output-dir", help="run directory (overrides output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="split to score; empty string for all records")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--manifest")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--pairs", help="loop axis pairs, e.g. 1x3,2x2")
    p.add_argument("--dry-run", action="store_true", help="structural columns only, no training")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint objective")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--manifolds", nargs="+", default=list(MANIFOLD_SETTINGS), choices=MANIFOLD_SETTINGS)
    p.add_argument("--coords", type=int, default=1, help="largest-gradient coordinates probed per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("geomtest", help="manifold property suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_geomtest)

    p = sub.add_parser("gen-data", help="write the synthetic skeleton task")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-embeddings", help="write tangent-space sign embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="", help="restrict to one split")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
