"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error.  Every bundle load
validates the structural invariants and exits with code 2 on violations.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import (
    DataError,
    LayeredFeatureBundle,
    ReferenceMechanism,
    UsageError,
    validate_bundle,
)
from .empa import EMConfig, empa_assess
from .experiment import SyntheticConfig, generate_synthetic, run_protocol
from .grouping import SensitivityScorer, ThresholdPolicy, bua, random_partition, tda
from .lfb import read_bundle, write_bundle
from .noise import NoiseConfig, perturb_sensitive
from .reports import (
    load_run_config,
    pca_projection,
    read_grouping,
    write_grouping,
    write_projection_csv,
    write_reports,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors exit 1, not 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_bundle(path: str) -> LayeredFeatureBundle:
    bundle = read_bundle(path)
    violations = validate_bundle(bundle)
    if violations:
        raise DataError(f"{path}: " + "; ".join(violations))
    return bundle


def _scorer_from_args(args) -> SensitivityScorer:
    return SensitivityScorer(kind=args.scorer, seed=args.seed)


def _policy_from_args(args) -> ThresholdPolicy:
    if args.fixed_tau is not None:
        return ThresholdPolicy(kind="fixed", tau=args.fixed_tau)
    return ThresholdPolicy(kind="quantile", q=args.quantile)


def _grouping_from_args(args, bundle: LayeredFeatureBundle):
    if getattr(args, "grouping", None):
        return read_grouping(args.grouping)
    scorer = _scorer_from_args(args)
    policy = _policy_from_args(args)
    if args.strategy == "bua":
        return bua(bundle, scorer, policy)
    if args.strategy == "tda":
        return tda(bundle, scorer, policy)
    sizes = {
        p.layer_index: len(p.sensitive_ids)
        for p in bua(bundle, scorer, policy).partitions
    }
    return random_partition(bundle, sizes, args.seed)


def _add_group_flags(p) -> None:
    p.add_argument("--strategy", choices=("bua", "tda", "random"), default="bua")
    p.add_argument("--scorer", choices=("ground_truth", "prototype", "external"),
                   default="ground_truth")
    p.add_argument("--quantile", type=float, default=0.90,
                   help="sensitivity threshold quantile (default 0.90)")
    p.add_argument("--fixed-tau", type=float, default=None,
                   help="use a fixed threshold instead of a quantile")


def _cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        n_layers=args.layers,
        samples_per_layer=args.samples,
        dim=args.dim,
        sensitive_ratio=args.ratio,
    )
    bundle, _ = generate_synthetic(cfg, args.seed)
    write_bundle(bundle, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_group(args) -> int:
    bundle = _load_bundle(args.bundle)
    grouping = _grouping_from_args(args, bundle)
    write_grouping(grouping, args.out)
    print(f"wrote {args.out} ({grouping.strategy})", file=sys.stderr)
    return 0


def _cmd_perturb(args) -> int:
    bundle = _load_bundle(args.bundle)
    grouping = read_grouping(args.grouping)
    mech = ReferenceMechanism(family=args.mechanism, epsilon=args.epsilon, c=args.c)
    perturbed, _ = perturb_sensitive(bundle, grouping, NoiseConfig(mechanism=mech, seed=args.seed))
    write_bundle(perturbed, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_assess(args) -> int:
    original = _load_bundle(args.original)
    grouping = _grouping_from_args(args, original)
    mech = ReferenceMechanism(family=args.mechanism, epsilon=args.epsilon, c=args.c)
    if args.perturbed:
        perturbed = _load_bundle(args.perturbed)
    else:
        # self-perturbation: a matched-mechanism control run
        perturbed, _ = perturb_sensitive(
            original, grouping, NoiseConfig(mechanism=mech, seed=args.seed)
        )
    config = EMConfig(n_components=args.components)
    result = empa_assess(original, perturbed, grouping, mech, config, seed=args.seed)
    doc = {
        "bas": result.bas,
        "bias_ref": result.bias_ref,
        "bias_uniform": result.bias_uniform,
        "pooled": result.pooled,
    }
    import json

    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_experiment(args) -> int:
    cfg = load_run_config(args.config)
    if args.metric != "all":
        from dataclasses import replace

        cfg = replace(cfg, metrics=tuple(m.strip() for m in args.metric.split(",") if m.strip()))
    report = run_protocol(cfg)
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    written = write_reports(report, args.out, formats=formats)
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_report(args) -> int:
    if args.projection:
        if not (args.bundle and args.grouping):
            raise UsageError("--projection requires --bundle and --grouping")
        bundle = _load_bundle(args.bundle)
        grouping = read_grouping(args.grouping)
        rows = pca_projection(bundle, grouping)
        write_projection_csv(rows, args.out)
        print(f"wrote {args.out}")
        return 0
    raise UsageError("report requires --projection pca (see --help)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic layered bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("group", help="partition a bundle into sensitive groups")
    p.add_argument("--bundle", required=True)
    _add_group_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_group)

    p = sub.add_parser("perturb", help="noise the sensitive groups of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--grouping", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--mechanism", choices=("laplace", "gaussian"), default="gaussian")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("assess", help="reference-relative discrepancy scores")
    p.add_argument("--original", required=True)
    p.add_argument("--perturbed", default=None,
                   help="observed bundle; omitted = matched-mechanism control")
    p.add_argument("--grouping", default=None)
    _add_group_flags(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--mechanism", choices=("laplace", "gaussian"), default="gaussian")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_assess)

    p = sub.add_parser("experiment", help="run the multi-seed protocol")
    p.add_argument("--config", default="synthetic_default",
                   help='config file path or the name "synthetic_default"')
    p.add_argument("--metric", default="all",
                   help='comma-separated metric names to record, or "all"')
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="emit figure-ready views of results")
    p.add_argument("--projection", choices=("pca",), default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--grouping", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"privalign: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"privalign: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
