"""Command-line interface.

Subcommands: gen-data (render a synthetic dataset), train (PK-batch
triplet training), eval (query/gallery retrieval metrics), and
check-sketch (compact-vs-exact pooling error sweep).  Exit codes:
0 success, 1 validation or usage failure, 2 I/O failure, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_digest, load_config, serialize_config, with_overrides
from .datasynth import generate_synthetic, load_manifest
from .errors import (
    ConfigurationError,
    DataIOError,
    NumericError,
    PartReidError,
    UsageError,
    ValidationError,
)
from .figures import render_ap_histogram, render_loss_curve, render_sketch_error_curve
from .model import load_model, model_digest
from .pooling import SketchParams, bilinear_pool_exact, compact_bilinear_pool
from .retrieval import evaluate, write_report_csv, write_report_json
from .tensor import Tensor
from .train import run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # Argument problems are usage failures: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="partreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="render a synthetic dataset")
    g.add_argument("--actions", type=int, default=20)
    g.add_argument("--ids-per-action", type=int, default=10)
    g.add_argument("--views", type=int, default=6)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--distractors", type=int, default=2,
                   help="gallery-only identities per action")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--manifest", help="overrides manifest_path from config")
    t.add_argument("--seed", type=int, help="overrides seed from config")
    t.add_argument("--steps", type=int, help="overrides steps from config")
    t.add_argument("--lr", type=float, help="overrides learning_rate from config")
    t.add_argument("--freeze", default="",
                   help="comma-separated parameter-name prefixes to keep at init")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="retrieval metrics for trained weights")
    e.add_argument("--manifest", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--pooling", choices=("exact", "compact"),
                   help="overrides the pooling mode stored with the weights")
    e.add_argument("--out", required=True)

    c = sub.add_parser("check-sketch", help="compact pooling error sweep")
    c.add_argument("--ca", type=int, default=16)
    c.add_argument("--cp", type=int, default=8)
    c.add_argument("--dims", default="128,256,512,1024")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--out", help="directory for the table and figure")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    manifest = generate_synthetic(
        num_actions=args.actions,
        ids_per_action=args.ids_per_action,
        views_per_id=args.views,
        image_shape=(3, args.height, args.width),
        seed=args.seed,
        out_dir=args.out,
        distractors_per_action=args.distractors,
    )
    print(
        f"manifest={Path(args.out) / 'manifest.tsv'} "
        f"samples={manifest.num_samples} actions={manifest.num_actions}"
    )
    return EXIT_OK


def _resolve_train_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.manifest is not None:
        overrides["manifest_path"] = args.manifest
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    overrides["out_dir"] = args.out
    return with_overrides(cfg, **overrides)


def _cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    if not cfg.manifest_path:
        raise UsageError("no manifest: pass --manifest or set manifest_path in config")
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    manifest_dir = Path(cfg.manifest_path).parent
    freeze = tuple(p for p in args.freeze.split(",") if p)
    result = run_training(cfg, manifest, manifest_dir, args.out, freeze_prefixes=freeze)

    out = Path(args.out)
    (out / "config.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    (out / "config.digest").write_text(config_digest(cfg) + "\n", encoding="utf-8")
    render_loss_curve(result.loss_rows, out / "loss_curve.png")
    print(
        f"steps={result.steps} first_loss={result.first_loss!r} "
        f"final_loss={result.final_loss!r} weights={result.weights_dir}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.weights, pooling=args.pooling)
    manifest = load_manifest(args.manifest)
    manifest_dir = Path(args.manifest).parent
    report = evaluate(manifest, manifest_dir, model, config_hash=model_digest(model))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    (out / "config.cfg").write_text(
        serialize_config(model.run_config), encoding="utf-8"
    )
    (out / "config.digest").write_text(
        config_digest(model.run_config) + "\n", encoding="utf-8"
    )
    render_ap_histogram(
        [row[2] for row in report.per_query], report.map_score, out / "ap_histogram.png"
    )
    print(f"mAP={report.map_score!r} rank1={report.rank_k[1]!r}")
    return EXIT_OK


def sketch_error_table(
    c_a: int,
    c_p: int,
    dims: list[int],
    trials: int,
    seed: int,
    grid: tuple[int, int] = (4, 2),
) -> list[tuple[int, float]]:
    """Median relative error of compact vs exact pooled inner products.

    Each trial draws two map pairs (half-normal entries so inner
    products stay well away from zero), computes both descriptors
    exactly and compactly under a per-trial sketch, and compares the
    inner products.  Returns (d, median error) rows in `dims` order.
    """
    if trials < 1:
        raise UsageError(f"trials must be >= 1, got {trials}")
    if c_a < 1 or c_p < 1:
        raise UsageError("channel counts must be positive")
    h, w = grid
    seed_rng = np.random.default_rng([seed, 8])
    trial_seeds = seed_rng.integers(0, 2**63, size=trials)
    errors: dict[int, list[float]] = {d: [] for d in dims}
    for t in range(trials):
        rng = np.random.default_rng([seed, 7, t])
        maps = [np.abs(rng.normal(size=s)) for s in
                ((c_a, h, w), (c_p, h, w), (c_a, h, w), (c_p, h, w))]
        a1, p1, a2, p2 = (Tensor(m) for m in maps)
        e1 = bilinear_pool_exact(a1, p1).vector.array
        e2 = bilinear_pool_exact(a2, p2).vector.array
        exact_ip = float(np.dot(e1, e2))
        for d in dims:
            params = SketchParams.generate((c_a, c_p), d, int(trial_seeds[t]))
            c1 = compact_bilinear_pool(a1, p1, params).vector.array
            c2 = compact_bilinear_pool(a2, p2, params).vector.array
            err = abs(float(np.dot(c1, c2)) - exact_ip) / max(abs(exact_ip), 1e-12)
            errors[d].append(err)
    return [(d, float(np.median(errors[d]))) for d in dims]


def _cmd_check_sketch(args) -> int:
    try:
        dims = [int(x) for x in args.dims.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --dims: {exc}")
    if not dims:
        raise UsageError("--dims must list at least one dimension")
    table = sketch_error_table(args.ca, args.cp, dims, args.trials, args.seed)

    lines = ["d\tmedian_rel_err"]
    for d, err in table:
        lines.append(f"{d}\t{err!r}")
        print(f"d={d} median_rel_err={err!r}")
    medians = [err for _, err in table]
    ok = all(b <= a for a, b in zip(medians, medians[1:])) and medians[-1] < 0.1

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sketch_errors.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        render_sketch_error_curve(
            [d for d, _ in table], medians, out / "sketch_error_curve.png"
        )
    if not ok:
        print("error column is not non-increasing with final < 0.1", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "check-sketch": _cmd_check_sketch,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print("validation failed:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  {violation}", file=sys.stderr)
        return EXIT_USAGE
    except DataIOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PartReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
