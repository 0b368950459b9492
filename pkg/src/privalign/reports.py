"""Report emission, grouping files, run configuration and PCA projection.

CSV output is deterministic: rows are ordered lexicographically by their
key columns and numbers carry 9 significant digits with a '.' decimal
separator, so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import GroupingResult, LayeredFeatureBundle, UsageError, make_partition
from .empa import EMConfig
from .experiment import ExperimentReport, ProtocolConfig, SyntheticConfig
from .grouping import MdavConfig, ThresholdPolicy


def fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _eps_key(eps: float) -> str:
    return fmt(eps)


def write_cells_csv(report: ExperimentReport, path: Path) -> None:
    lines = ["strategy,epsilon,seed,metric,value"]
    rows = []
    for (strategy, eps, seed), values in report.cells.items():
        for metric, value in values.items():
            rows.append((strategy, _eps_key(eps), seed, metric, fmt(value)))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    lines += [f"{s},{e},{sd},{m},{v}" for s, e, sd, m, v in rows]
    path.write_text("\n".join(lines) + "\n")


def write_aggregate_csv(report: ExperimentReport, path: Path) -> None:
    lines = ["strategy,epsilon,metric,mean,std,ci_lo,ci_hi"]
    rows = []
    for (strategy, eps, metric), agg in report.aggregates.items():
        rows.append(
            (strategy, _eps_key(eps), metric, fmt(agg.mean), fmt(agg.std), fmt(agg.ci_lo), fmt(agg.ci_hi))
        )
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    lines += [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def write_report_json(report: ExperimentReport, path: Path) -> None:
    doc = {
        "config": report.config,
        "cells": [
            {"strategy": s, "epsilon": e, "seed": sd, "values": v}
            for (s, e, sd), v in sorted(
                report.cells.items(), key=lambda kv: (kv[0][0], _eps_key(kv[0][1]), kv[0][2])
            )
        ],
        "aggregates": [
            {
                "strategy": s,
                "epsilon": e,
                "metric": m,
                "mean": a.mean,
                "std": a.std,
                "ci_lo": a.ci_lo,
                "ci_hi": a.ci_hi,
            }
            for (s, e, m), a in sorted(
                report.aggregates.items(), key=lambda kv: (kv[0][0], _eps_key(kv[0][1]), kv[0][2])
            )
        ],
        "mixtures": [
            {"strategy": s, "epsilon": e, "seed": sd, **mx}
            for (s, e, sd), mx in sorted(
                report.mixtures.items(), key=lambda kv: (kv[0][0], _eps_key(kv[0][1]), kv[0][2])
            )
        ],
        "extras": report.extras,
        "failures": [
            {"strategy": s, "epsilon": e, "seed": sd, "reason": r}
            for (s, e, sd), r in sorted(
                report.failures.items(), key=lambda kv: (kv[0][0], _eps_key(kv[0][1]), kv[0][2])
            )
        ],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_reports(report: ExperimentReport, outdir: str | Path, formats=("csv", "json")) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p1 = outdir / "cells.csv"
        p2 = outdir / "aggregate.csv"
        write_cells_csv(report, p1)
        write_aggregate_csv(report, p2)
        written += [p1, p2]
    if "json" in formats:
        p3 = outdir / "report.json"
        write_report_json(report, p3)
        written.append(p3)
    return written


def write_grouping(grouping: GroupingResult, path: str | Path) -> Path:
    """Write partitions to JSON.

    The file holds only partition data (no strategy tag), so strategies
    that agree produce byte-identical files.
    """
    path = Path(path)
    doc = {
        "partitions": [
            {
                "layer_index": p.layer_index,
                "tau": p.tau,
                "scores": [float(s) for s in p.scores],
                "sensitive_ids": p.sorted_sensitive(),
            }
            for p in grouping.partitions
        ]
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_grouping(path: str | Path) -> GroupingResult:
    doc = json.loads(Path(path).read_text())
    partitions = []
    for entry in doc["partitions"]:
        part = make_partition(
            int(entry["layer_index"]),
            np.array(entry["scores"], dtype=np.float64),
            float(entry["tau"]),
        )
        partitions.append(part)
    return GroupingResult(partitions=tuple(partitions), strategy="from_file")


# --- run configuration -------------------------------------------------

_CONFIG_KEYS = {
    "epsilons",
    "seeds",
    "mechanism_family",
    "c",
    "strategies",
    "n_layers",
    "samples_per_layer",
    "dim",
    "sensitive_ratio",
    "em_components",
    "em_rel_tolerance",
    "em_max_iterations",
    "em_variance_floor",
    "em_anchor_scale",
    "threshold_quantile",
    "threshold_fixed_tau",
    "mdav_enabled",
    "mdav_k",
    "mdav_normalize",
    "range_quantiles",
    "histogram_pad_scale",
    "metrics",
}


def load_run_config(source: str | Path) -> ProtocolConfig:
    """Load a protocol configuration.

    The literal name "synthetic_default" resolves to the built-in
    synthetic protocol.  File values override the defaults; unknown keys
    are rejected.  Omitted keys fall back to the reproducibility defaults
    (90th-percentile threshold, MDAV k=8, uniform NCP weights, K=4,
    stopping at 1e-5 relative improvement or 100 iterations); the shipped
    synthetic protocol overrides the threshold quantile to 0.70 to match
    its planted 30% sensitive fraction.
    """
    if str(source) == "synthetic_default":
        return ProtocolConfig()
    doc = json.loads(Path(source).read_text())
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")

    synth = SyntheticConfig(
        n_layers=int(doc.get("n_layers", 4)),
        samples_per_layer=int(doc.get("samples_per_layer", 200)),
        dim=int(doc.get("dim", 8)),
        sensitive_ratio=float(doc.get("sensitive_ratio", 0.30)),
    )
    em = EMConfig(
        n_components=int(doc.get("em_components", 4)),
        rel_tolerance=float(doc.get("em_rel_tolerance", 1e-5)),
        max_iterations=int(doc.get("em_max_iterations", 100)),
        variance_floor=float(doc.get("em_variance_floor", 1e-6)),
        anchor_scale=float(doc.get("em_anchor_scale", 1e-2)),
    )
    if "threshold_fixed_tau" in doc:
        threshold = ThresholdPolicy(kind="fixed", tau=float(doc["threshold_fixed_tau"]))
    else:
        threshold = ThresholdPolicy(kind="quantile", q=float(doc.get("threshold_quantile", 0.90)))
    rq = doc.get("range_quantiles", [0.05, 0.95])
    mdav = MdavConfig(
        enabled=bool(doc.get("mdav_enabled", True)),
        k=int(doc.get("mdav_k", 8)),
        normalize=bool(doc.get("mdav_normalize", True)),
        range_quantiles=(float(rq[0]), float(rq[1])),
    )
    return ProtocolConfig(
        epsilons=tuple(float(e) for e in doc.get("epsilons", [0.1, 0.01])),
        seeds=tuple(int(s) for s in doc.get("seeds", [0, 1, 2, 3, 4])),
        mechanism_family=str(doc.get("mechanism_family", "gaussian")),
        c=float(doc.get("c", 1.0)),
        strategies=tuple(doc.get("strategies", ["bua", "tda", "random"])),
        synthetic=synth,
        em=em,
        threshold=threshold,
        mdav=mdav,
        histogram_pad_scale=float(doc.get("histogram_pad_scale", 3.0)),
        metrics=tuple(doc.get("metrics", ())),
    )


def pca_projection(bundle: LayeredFeatureBundle, grouping: GroupingResult) -> list[tuple]:
    """Project each layer's vectors to 2-D and label by group.

    Deterministic sign convention: each principal axis is flipped so its
    largest-magnitude loading is positive.
    """
    rows = []
    for lyr in bundle.layers:
        part = grouping.partition(lyr.index)
        centered = lyr.vectors - lyr.vectors.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axes = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros_like(vt)])[:2]
        for i in range(axes.shape[0]):
            j = int(np.argmax(np.abs(axes[i])))
            if axes[i, j] < 0:
                axes[i] = -axes[i]
        proj = centered @ axes.T
        for vid in range(lyr.n_vectors):
            label = "sensitive" if vid in part.sensitive_ids else "nonsensitive"
            rows.append((lyr.index, vid, float(proj[vid, 0]), float(proj[vid, 1]), label))
    return rows


def write_projection_csv(rows: list[tuple], path: str | Path) -> Path:
    path = Path(path)
    lines = ["layer,vector_id,x,y,label"]
    for layer, vid, x, y, label in rows:
        lines.append(f"{layer},{vid},{fmt(x)},{fmt(y)},{label}")
    path.write_text("\n".join(lines) + "\n")
    return path
