"""Synthetic protocol: generation, multi-seed sweep and aggregation.

One run seed derives independent sub-streams for generation, scoring,
random-partition draws, perturbation and the reference mechanism, so a
report is a pure function of its configuration.  Cells of the
(strategy x epsilon x seed) grid are independent and may be evaluated in
parallel; results are merged in deterministic key order.

Metric direction conventions used by the protocol (recorded in reports):
chi-square expects counts from the original; K-L measures the perturbed
histogram against the original; MMD compares l2-normalized pooled
sensitive vectors, original vs perturbed; Wasserstein-1 and rMSE are
original vs perturbed over full bundles.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from . import _rng
from .core import (
    GroupingResult,
    InsufficientDataError,
    Layer,
    LayeredFeatureBundle,
    ReferenceMechanism,
    pool_sensitive_features,
)
from .empa import EMConfig, empa_assess, psi
from .grouping import (
    MdavConfig,
    SensitivityScorer,
    ThresholdPolicy,
    bua,
    random_partition,
    tda,
)
from .metrics import (
    HistogramConfig,
    alignment_features,
    chi_square,
    kl_divergence,
    mmd_rbf,
    moment_reg_fit,
    moment_reg_predict,
    noise_mle,
    rmse,
    wasserstein1,
)
from .microagg import l2_normalize
from .noise import NoiseConfig, perturb_sensitive

STRATEGIES = ("bua", "tda", "random")


@dataclass(frozen=True)
class SyntheticConfig:
    n_layers: int = 4
    samples_per_layer: int = 200
    dim: int = 8
    sensitive_ratio: float = 0.30

    def __post_init__(self) -> None:
        if not (0.0 < self.sensitive_ratio < 1.0):
            raise InsufficientDataError("sensitive_ratio must be in (0, 1)")

    @property
    def sensitive_per_layer(self) -> int:
        return round(self.sensitive_ratio * self.samples_per_layer)


@dataclass(frozen=True)
class ProtocolConfig:
    epsilons: tuple[float, ...] = (0.1, 0.01)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mechanism_family: str = "gaussian"
    c: float = 1.0
    strategies: tuple[str, ...] = STRATEGIES
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    em: EMConfig = field(default_factory=EMConfig)
    threshold: ThresholdPolicy = field(default_factory=lambda: ThresholdPolicy(kind="quantile", q=0.70))
    mdav: MdavConfig = field(default_factory=MdavConfig)
    histogram_pad_scale: float = 3.0           # pad = this * (c / epsilon)
    metrics: tuple[str, ...] = ()              # empty = record everything

    def __post_init__(self) -> None:
        if not self.seeds or not self.epsilons:
            raise InsufficientDataError("need at least one seed and one epsilon")


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    ci_lo: float
    ci_hi: float


@dataclass
class ExperimentReport:
    config: dict
    cells: dict[tuple[str, float, int], dict[str, float]]
    aggregates: dict[tuple[str, float, str], Aggregate]
    mixtures: dict[tuple[str, float, int], dict]
    extras: dict
    failures: dict[tuple[str, float, int], str]


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[LayeredFeatureBundle, list[np.ndarray]]:
    """Standard-normal layered features with planted sensitive flags.

    Values are rounded to float32 precision at creation so bundles
    round-trip bit-exactly through the on-disk format.
    """
    layers = []
    flags_out = []
    n_sens = config.sensitive_per_layer
    for i in range(1, config.n_layers + 1):
        rng = _rng.substream(seed, _rng.GENERATE, i)
        values = rng.standard_normal((config.samples_per_layer, config.dim))
        values = values.astype(np.float32).astype(np.float64)
        flags = np.zeros(config.samples_per_layer, dtype=bool)
        flags[rng.permutation(config.samples_per_layer)[:n_sens]] = True
        layers.append(Layer(index=i, vectors=values, flags=flags))
        flags_out.append(flags)
    bundle = LayeredFeatureBundle(
        layers=tuple(layers),
        kind="original",
        metadata={
            "model": "synthetic",
            "dataset": f"synthetic-seed{seed}",
            "concept_set": "planted-flags",
        },
    )
    return bundle, flags_out


def aggregate(values: list[float], confidence: float = 0.95) -> Aggregate:
    """Sample mean, n-1 std and a Student-t confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise InsufficientDataError("aggregation needs at least 2 values")
    mean = float(v.mean())
    std = float(v.std(ddof=1))
    half = float(_scipy_stats.t.ppf(0.5 + confidence / 2.0, v.size - 1) * std / np.sqrt(v.size))
    return Aggregate(mean=mean, std=std, ci_lo=mean - half, ci_hi=mean + half)


def _groupings_for_seed(
    bundle: LayeredFeatureBundle, cfg: ProtocolConfig, seed: int
) -> dict[str, GroupingResult]:
    scorer = SensitivityScorer(kind="ground_truth", seed=seed)
    out: dict[str, GroupingResult] = {}
    if "bua" in cfg.strategies or "random" in cfg.strategies:
        out["bua"] = bua(bundle, scorer, cfg.threshold, mdav_config=cfg.mdav)
    if "tda" in cfg.strategies:
        out["tda"] = tda(bundle, scorer, cfg.threshold, mdav_config=cfg.mdav)
    if "random" in cfg.strategies:
        sizes = {p.layer_index: len(p.sensitive_ids) for p in out["bua"].partitions}
        out["random"] = random_partition(bundle, sizes, seed)
    return out


def _evaluate_cell(
    cfg: ProtocolConfig,
    bundle: LayeredFeatureBundle,
    grouping: GroupingResult,
    epsilon: float,
    seed: int,
) -> tuple[dict[str, float], dict, np.ndarray]:
    mech = ReferenceMechanism(family=cfg.mechanism_family, epsilon=epsilon, c=cfg.c)
    perturbed, triples = perturb_sensitive(bundle, grouping, NoiseConfig(mechanism=mech, seed=seed))

    hist = HistogramConfig(pad=cfg.histogram_pad_scale * mech.scale)
    values: dict[str, float] = {}
    values["rmse"] = rmse(bundle, perturbed)
    values["chi_square"] = chi_square(bundle, perturbed, hist)
    values["kl"] = kl_divergence(perturbed, bundle, hist)
    values["wass1"] = wasserstein1(bundle, perturbed)

    sens_orig = pool_sensitive_features(bundle, grouping)
    sens_pert = pool_sensitive_features(perturbed, grouping)
    values["mmd"] = mmd_rbf(l2_normalize(sens_orig), l2_normalize(sens_pert))

    assessment = empa_assess(bundle, perturbed, grouping, mech, cfg.em, seed=seed)
    values["bas"] = assessment.bas
    values["bias_uniform"] = assessment.bias_uniform
    values["bias_ref"] = assessment.bias_ref

    residuals = np.concatenate([t.u.ravel() for t in triples if t.u.size])
    values["noise_mle_eps"] = noise_mle(residuals, mech.family, mech.c)

    # Ablation proxies: alignment error with and without the mixture fit.
    # Full pipeline compares fitted parameter vectors; the ablated variant
    # compares raw features to an independent reference draw.
    ref_seed = _rng.derive_seed(seed, _rng.REFERENCE)
    reference, _ = perturb_sensitive(bundle, grouping, NoiseConfig(mechanism=mech, seed=ref_seed))
    psi_ref = psi(assessment.theta_ref) if assessment.theta_ref is not None else None
    if psi_ref is not None:
        values["ablation_full"] = assessment.bas / (1.0 + float(np.linalg.norm(psi_ref)))
    values["ablation_no_empa"] = rmse(perturbed, reference) / max(rmse(reference, bundle), 1e-12)

    features = alignment_features(triples)
    mixture_record = {}
    if assessment.theta is not None and assessment.theta_ref is not None:
        mixture_record = {
            "theta": _mixture_dict(assessment.theta),
            "theta_ref": _mixture_dict(assessment.theta_ref),
        }
    return values, mixture_record, features


def _mixture_dict(theta) -> dict:
    return {
        "weights": theta.weights.tolist(),
        "means": theta.means.tolist(),
        "variances": theta.variances.tolist(),
        "log_likelihood": theta.log_likelihood,
        "iterations": theta.iterations,
        "converged": theta.converged,
    }


def _worker_count() -> int:
    raw = os.environ.get("BODHI_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(8, os.cpu_count() or 1)
    return n


def run_protocol(cfg: ProtocolConfig) -> ExperimentReport:
    """Run the full (strategy x epsilon x seed) grid and aggregate."""
    per_seed: dict[int, tuple[LayeredFeatureBundle, dict[str, GroupingResult]]] = {}
    for seed in cfg.seeds:
        bundle, _ = generate_synthetic(cfg.synthetic, seed)
        per_seed[seed] = (bundle, _groupings_for_seed(bundle, cfg, seed))

    keys = [
        (strategy, eps, seed)
        for strategy in cfg.strategies
        for eps in cfg.epsilons
        for seed in cfg.seeds
    ]

    def run_one(key):
        strategy, eps, seed = key
        bundle, groupings = per_seed[seed]
        return _evaluate_cell(cfg, bundle, groupings[strategy], eps, seed)

    cells: dict[tuple[str, float, int], dict[str, float]] = {}
    mixtures: dict[tuple[str, float, int], dict] = {}
    failures: dict[tuple[str, float, int], str] = {}
    feature_bank: dict[tuple[str, float, int], np.ndarray] = {}

    workers = _worker_count()
    if workers == 1:
        outcomes = {}
        for key in keys:
            try:
                outcomes[key] = run_one(key)
            except Exception as exc:  # a failed cell is recorded, not fatal
                failures[key] = f"{type(exc).__name__}: {exc}"
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(run_one, key) for key in keys}
        outcomes = {}
        for key in keys:
            try:
                outcomes[key] = futures[key].result()
            except Exception as exc:
                failures[key] = f"{type(exc).__name__}: {exc}"
    for key in keys:
        if key not in outcomes:
            continue
        values, mixture_record, features = outcomes[key]
        cells[key] = values
        mixtures[key] = mixture_record
        feature_bank[key] = features

    _attach_moment_reg(cfg, cells, feature_bank)
    if cfg.metrics:
        wanted = set(cfg.metrics)
        for key, values in cells.items():
            cells[key] = {m: v for m, v in values.items() if m in wanted}

    aggregates: dict[tuple[str, float, str], Aggregate] = {}
    metric_names = sorted({m for vals in cells.values() for m in vals})
    for strategy in cfg.strategies:
        for eps in cfg.epsilons:
            for metric in metric_names:
                vals = [
                    cells[(strategy, eps, seed)][metric]
                    for seed in cfg.seeds
                    if (strategy, eps, seed) in cells and metric in cells[(strategy, eps, seed)]
                ]
                if len(vals) >= 2:
                    aggregates[(strategy, eps, metric)] = aggregate(vals)

    extras = _summaries(cfg, cells, aggregates)
    return ExperimentReport(
        config=_config_dict(cfg),
        cells=cells,
        aggregates=aggregates,
        mixtures=mixtures,
        extras=extras,
        failures=failures,
    )


def _attach_moment_reg(cfg, cells, feature_bank) -> None:
    """Leave-one-seed-out epsilon regression per strategy."""
    if len(cfg.seeds) < 2 or len(cfg.epsilons) < 2:
        return
    for strategy in cfg.strategies:
        sq_errors = []
        for hold in cfg.seeds:
            training = [
                (feature_bank[(strategy, eps, seed)], eps)
                for eps in cfg.epsilons
                for seed in cfg.seeds
                if seed != hold and (strategy, eps, seed) in feature_bank
            ]
            if len({e for _, e in training}) < 2:
                continue
            model = moment_reg_fit(training)
            for eps in cfg.epsilons:
                key = (strategy, eps, hold)
                if key not in feature_bank:
                    continue
                pred = moment_reg_predict(model, feature_bank[key])
                cells[key]["moment_reg_eps"] = pred
                sq_errors.append((pred - eps) ** 2)
        if sq_errors:
            loso = float(np.sqrt(np.mean(sq_errors)))
            for eps in cfg.epsilons:
                for seed in cfg.seeds:
                    key = (strategy, eps, seed)
                    if key in cells:
                        cells[key]["moment_reg_loso_rmse"] = loso


def _summaries(cfg, cells, aggregates) -> dict:
    """Figure-ready series: bias vs epsilon and metric vs epsilon."""
    bias_series = []
    metric_series = []
    for strategy in cfg.strategies:
        for eps in cfg.epsilons:
            key = (strategy, eps, "bias_uniform")
            if key in aggregates:
                a = aggregates[key]
                bias_series.append(
                    {"strategy": strategy, "epsilon": eps, "mean": a.mean, "std": a.std}
                )
    for metric in ("rmse", "chi_square", "kl", "mmd", "wass1"):
        for eps in cfg.epsilons:
            key = ("bua", eps, metric)
            if key in aggregates:
                a = aggregates[key]
                metric_series.append(
                    {"metric": metric, "epsilon": eps, "mean": a.mean, "std": a.std}
                )
    loso = {}
    for strategy in cfg.strategies:
        vals = [
            cells[(strategy, eps, seed)].get("moment_reg_loso_rmse")
            for eps in cfg.epsilons
            for seed in cfg.seeds
            if (strategy, eps, seed) in cells
        ]
        vals = [v for v in vals if v is not None]
        if vals:
            loso[strategy] = vals[0]
    return {
        "bias_vs_epsilon": bias_series,
        "metrics_vs_epsilon": metric_series,
        "moment_reg_loso_rmse": loso,
        "metric_directions": {
            "chi_square": "expected counts from original, observed from perturbed",
            "kl": "p from perturbed, q from original",
            "mmd": "l2-normalized pooled sensitive vectors, original vs perturbed",
            "wass1": "per-dimension 1-D W1 averaged over dimensions and layers",
        },
    }


def _config_dict(cfg: ProtocolConfig) -> dict:
    return {
        "epsilons": list(cfg.epsilons),
        "seeds": list(cfg.seeds),
        "mechanism_family": cfg.mechanism_family,
        "c": cfg.c,
        "strategies": list(cfg.strategies),
        "synthetic": {
            "n_layers": cfg.synthetic.n_layers,
            "samples_per_layer": cfg.synthetic.samples_per_layer,
            "dim": cfg.synthetic.dim,
            "sensitive_ratio": cfg.synthetic.sensitive_ratio,
        },
        "em": {
            "n_components": cfg.em.n_components,
            "rel_tolerance": cfg.em.rel_tolerance,
            "max_iterations": cfg.em.max_iterations,
            "variance_floor": cfg.em.variance_floor,
            "anchor_scale": cfg.em.anchor_scale,
        },
        "threshold": {"kind": cfg.threshold.kind, "q": cfg.threshold.q, "tau": cfg.threshold.tau},
        "mdav": {
            "enabled": cfg.mdav.enabled,
            "k": cfg.mdav.k,
            "normalize": cfg.mdav.normalize,
            "range_quantiles": list(cfg.mdav.range_quantiles),
        },
        "histogram_pad_scale": cfg.histogram_pad_scale,
        "metrics": list(cfg.metrics) if cfg.metrics else "all",
    }
