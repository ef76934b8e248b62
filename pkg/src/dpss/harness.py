"""Deterministic Monte Carlo experiment runner.

Reproduces the simulation studies at configurable scale: variance
validation, coverage sweeps, the clipping study, the scaling law, the
power study, and the synthetic-data evaluation.  Replication r of cell c
always uses the substream (master_seed, experiment_id, c, r), so tables
are bit-identical regardless of thread count; DPSS_THREADS > 1 fans the
cells out over processes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import estimate, synthgen
from .expfam import Dataset, ExpFamModel, GaussianMeanModel, LogisticModel, PoissonModel
from .privacy import PrivacyBudget, calibrate_agm, l2_sensitivity, release
from .rng import substream

# True parameters and data scales for the simulation studies, chosen to
# keep means interior and Poisson counts almost always below the count cap.
GAUSS_THETA0 = np.array([1.0])
GAUSS_SIGMA0_SQ = 1.0
GAUSS_B = 5.0
LOGISTIC_THETA0 = np.array([0.5, -0.5, 0.3, -0.3, 0.2])
# equal-magnitude coefficients for the clipping study: with a tiny
# coefficient, clipping bias never clears the CI half-width and the
# low-B coverage collapse cannot be observed
CLIPPING_THETA0 = np.array([0.5, -0.5, 0.5, -0.5, 0.5])
LOGISTIC_B_X = 3.0
POISSON_THETA0 = np.array([0.5])
POISSON_B_X = 3.0
POISSON_B_Y = 20.0
POISSON_X_RANGE = (0.2, 1.5)  # positive exposure-like covariate

DEFAULT_METHODS = ("nonprivate", "plugin_wald", "noise_aware_wald", "bootstrap", "naive_synth")


@dataclass
class ExperimentConfig:
    experiment_id: str
    model_id: str = "gaussian_mean"
    n_grid: list = field(default_factory=lambda: [100, 500, 1000, 5000])
    epsilon_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 5.0, 10.0])
    B_grid: list | None = None
    delta_rule: str = "one_over_n_sq"
    replications: int = 1000
    master_seed: int = 20240817
    theta0: list | None = None
    effect_grid: list | None = None
    ratios: list | None = None
    methods: list | None = None
    b_boot: int = 500
    alpha: float = 0.05

    def __post_init__(self):
        if self.delta_rule != "one_over_n_sq":
            raise ValueError("only the delta = 1/n^2 rule is supported")
        if self.replications < 2:
            raise ValueError("need at least 2 replications")
        if not self.n_grid or not self.epsilon_grid:
            raise ValueError("grids must be nonempty")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class MetricsTable:
    experiment: str
    rows: list[dict]

    def to_csv(self, path: str | Path) -> None:
        cols: list[str] = []
        for row in self.rows:
            for key in row:
                if key not in cols:
                    cols.append(key)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.rows)

    def select(self, **conditions) -> list[dict]:
        out = []
        for row in self.rows:
            if all(row.get(k) == v for k, v in conditions.items()):
                out.append(row)
        return out

    def value(self, column: str, **conditions) -> float:
        rows = self.select(**conditions)
        if len(rows) != 1:
            raise KeyError(f"expected one row for {conditions}, got {len(rows)}")
        return rows[0][column]


def delta_for(n: int) -> float:
    return 1.0 / n**2


def mc_se(p: float, trials: int) -> float:
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / trials))


def default_theta0(model_id: str) -> np.ndarray:
    return {
        "gaussian_mean": GAUSS_THETA0,
        "logistic": LOGISTIC_THETA0,
        "poisson": POISSON_THETA0,
    }[model_id].copy()


def make_model_and_data(
    model_id: str,
    theta0: np.ndarray,
    n: int,
    rng: np.random.Generator,
    B: float | None = None,
) -> tuple[ExpFamModel, Dataset]:
    """Fresh raw data (and, for regressions, a fresh design) at theta0.

    ``B`` overrides the clip scale: the truncation half-width for the
    gaussian model, the feature-norm radius for logistic.  Outcomes are
    generated from the raw (unclipped) covariates; the DP pipeline clips.
    """
    if model_id == "gaussian_mean":
        model = GaussianMeanModel(GAUSS_SIGMA0_SQ, B=B if B is not None else GAUSS_B)
        return model, model.sample(theta0, n, rng)
    if model_id == "logistic":
        X = rng.standard_normal((n, len(theta0)))
        model = LogisticModel(X, B_X=B if B is not None else LOGISTIC_B_X)
        from scipy.special import expit

        y = (rng.random(n) < expit(X @ theta0)).astype(float)
        return model, Dataset(X, y)
    if model_id == "poisson":
        X = rng.uniform(POISSON_X_RANGE[0], POISSON_X_RANGE[1], (n, len(theta0)))
        model = PoissonModel(X, B_X=POISSON_B_X, B_Y=POISSON_B_Y)
        y = rng.poisson(np.exp(X @ theta0)).astype(float)
        return model, Dataset(X, y)
    raise ValueError(f"unknown model_id {model_id!r}")


def _coverage_lengths(cis, theta0):
    cover = np.array([lo <= t <= hi for (lo, hi), t in zip(cis, theta0)], dtype=float)
    length = np.array([hi - lo for lo, hi in cis])
    return cover, length


def _map_cells(fn, specs):
    threads = int(os.environ.get("DPSS_THREADS", "1"))
    if threads > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, specs))
    return [fn(spec) for spec in specs]


# ------------------------------------------------------------------ #
# Experiment 1: variance inflation validation
# ------------------------------------------------------------------ #

def _variance_cell(spec):
    cfg, idx, n, eps = spec
    theta0 = np.asarray(cfg.theta0 if cfg.theta0 is not None else GAUSS_THETA0, dtype=float)
    if eps is None:  # sentinel: no privacy noise
        sigma = 0.0
    else:
        sigma = calibrate_agm(l2_sensitivity(GAUSS_B, n), PrivacyBudget(eps, delta_for(n)))
    model = GaussianMeanModel(GAUSS_SIGMA0_SQ, B=GAUSS_B)
    estimates = np.empty(cfg.replications)
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        data = model.clip(model.sample(theta0, n, rng))
        s_tilde = model.mean_suff_stat(data) + sigma * rng.standard_normal(1)
        estimates[r] = model.inverse_mean_map(s_tilde)[0]
    emp = float(np.var(estimates, ddof=1))
    i0 = GAUSS_SIGMA0_SQ
    theory = 1.0 / (i0 * n) + sigma**2 / i0**2
    return {
        "experiment": cfg.experiment_id,
        "model": "gaussian_mean",
        "n": n,
        "epsilon": eps if eps is not None else float("inf"),
        "sigma": sigma,
        "emp_variance": emp,
        "theory_variance": theory,
        "rel_error": abs(emp - theory) / theory,
        "replications": cfg.replications,
        # variance of a sample variance of (approx) gaussians: var ~ 2 v^2/(R-1)
        "mc_se": float(theory * np.sqrt(2.0 / (cfg.replications - 1))),
    }


def run_variance_validation(cfg: ExperimentConfig) -> MetricsTable:
    specs = []
    idx = 0
    for n in cfg.n_grid:
        for eps in list(cfg.epsilon_grid) + [None]:
            specs.append((cfg, idx, n, eps))
            idx += 1
    return MetricsTable(cfg.experiment_id, _map_cells(_variance_cell, specs))


# ------------------------------------------------------------------ #
# Experiment 2: coverage across the privacy spectrum
# ------------------------------------------------------------------ #

def _coverage_cell(spec):
    cfg, idx, n, eps = spec
    theta0 = np.asarray(
        cfg.theta0 if cfg.theta0 is not None else default_theta0(cfg.model_id), dtype=float
    )
    methods = tuple(cfg.methods) if cfg.methods else DEFAULT_METHODS
    d = len(theta0)
    budget = PrivacyBudget(eps, delta_for(n))
    acc = {m: {"cover": 0.0, "length": 0.0, "sqerr": 0.0, "err": np.zeros(d)} for m in methods}
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        model, raw = make_model_and_data(cfg.model_id, theta0, n, rng)
        clipped = model.clip(raw)
        rel = release(model.mean_suff_stat(clipped), model, n, budget, rng)
        plug = None
        for method in methods:
            if method == "nonprivate":
                report = estimate.nonprivate_mle(model, raw, cfg.alpha)
            elif method == "plugin_wald":
                report = estimate.estimate_report(model, rel, "plugin", cfg.alpha)
                plug = report.theta_hat
            elif method == "noise_aware_wald":
                report = estimate.estimate_report(model, rel, "noise_aware", cfg.alpha)
            elif method == "bootstrap":
                report = estimate.parametric_bootstrap(
                    model, rel, estimate.BootstrapConfig(cfg.b_boot, cfg.alpha), rng
                )
            elif method == "naive_synth":
                theta_src = plug if plug is not None else estimate.plugin_mle(model, rel)
                syn = synthgen.generate_synthetic(model, theta_src, synthgen.SynthConfig(n), rng)
                report = synthgen.naive_analysis(model, syn, cfg.alpha)
            else:
                raise ValueError(f"unknown method {method!r}")
            cover, length = _coverage_lengths(report.cis, theta0)
            err = np.asarray(report.theta_hat) - theta0
            acc[method]["cover"] += cover.mean()
            acc[method]["length"] += length.mean()
            acc[method]["sqerr"] += float(err @ err)
            acc[method]["err"] += err
    rows = []
    for method in methods:
        a = acc[method]
        coverage = a["cover"] / cfg.replications
        rows.append(
            {
                "experiment": cfg.experiment_id,
                "model": cfg.model_id,
                "method": method,
                "n": n,
                "epsilon": eps,
                "coverage": coverage,
                "avg_ci_length": a["length"] / cfg.replications,
                "mse": a["sqerr"] / cfg.replications,
                "bias_abs": float(np.linalg.norm(a["err"] / cfg.replications)),
                "replications": cfg.replications,
                "mc_se": mc_se(coverage, cfg.replications),
            }
        )
    return rows


def run_coverage_sweep(cfg: ExperimentConfig) -> MetricsTable:
    specs = [
        (cfg, idx, n, eps)
        for idx, (n, eps) in enumerate(
            (n, eps) for n in cfg.n_grid for eps in cfg.epsilon_grid
        )
    ]
    rows = [row for cell in _map_cells(_coverage_cell, specs) for row in cell]
    return MetricsTable(cfg.experiment_id, rows)


# ------------------------------------------------------------------ #
# Experiment 3: plug-in vs noise-aware under clipping
# ------------------------------------------------------------------ #

def _clipping_cell(spec):
    cfg, idx, B = spec
    theta0 = np.asarray(
        cfg.theta0 if cfg.theta0 is not None else CLIPPING_THETA0, dtype=float
    )
    n = cfg.n_grid[0]
    eps = cfg.epsilon_grid[0]
    budget = PrivacyBudget(eps, delta_for(n))
    acc = {m: {"cover": 0.0, "err": np.zeros(len(theta0)), "sqerr": 0.0} for m in ("plugin", "noise_aware")}
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        model, raw = make_model_and_data("logistic", theta0, n, rng, B=B)
        clipped = model.clip(raw)
        rel = release(model.mean_suff_stat(clipped), model, n, budget, rng)
        for method in ("plugin", "noise_aware"):
            report = estimate.estimate_report(model, rel, method, cfg.alpha)
            cover, _ = _coverage_lengths(report.cis, theta0)
            err = np.asarray(report.theta_hat) - theta0
            acc[method]["cover"] += cover.mean()
            acc[method]["err"] += err
            acc[method]["sqerr"] += float(err @ err)
    rows = []
    for method, a in acc.items():
        coverage = a["cover"] / cfg.replications
        rows.append(
            {
                "experiment": cfg.experiment_id,
                "model": "logistic",
                "method": method,
                "n": n,
                "epsilon": eps,
                "B": B,
                "bias_abs": float(np.linalg.norm(a["err"] / cfg.replications)),
                "mse": a["sqerr"] / cfg.replications,
                "coverage": coverage,
                "replications": cfg.replications,
                "mc_se": mc_se(coverage, cfg.replications),
            }
        )
    return rows


def run_clipping_study(cfg: ExperimentConfig) -> MetricsTable:
    grid = cfg.B_grid if cfg.B_grid else [0.5, 1.0, 2.0, 3.0, 5.0, 10.0]
    specs = [(cfg, idx, B) for idx, B in enumerate(grid)]
    rows = [row for cell in _map_cells(_clipping_cell, specs) for row in cell]
    return MetricsTable(cfg.experiment_id, rows)


# ------------------------------------------------------------------ #
# Experiment 4: scaling law validation
# ------------------------------------------------------------------ #

def _scaling_cell(spec):
    cfg, idx, n, eps = spec
    theta0 = np.asarray(cfg.theta0 if cfg.theta0 is not None else GAUSS_THETA0, dtype=float)
    sigma = calibrate_agm(l2_sensitivity(GAUSS_B, n), PrivacyBudget(eps, delta_for(n)))
    model = GaussianMeanModel(GAUSS_SIGMA0_SQ, B=GAUSS_B)
    sqerr = 0.0
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        data = model.clip(model.sample(theta0, n, rng))
        s_tilde = model.mean_suff_stat(data) + sigma * rng.standard_normal(1)
        err = model.inverse_mean_map(s_tilde)[0] - theta0[0]
        sqerr += err * err
    sampling_var = 1.0 / n
    privacy_var = sigma**2
    return {
        "experiment": cfg.experiment_id,
        "model": "gaussian_mean",
        "n": n,
        "epsilon": eps,
        "mse": sqerr / cfg.replications,
        "theory_mse": sampling_var + privacy_var,
        "sampling_var": sampling_var,
        "privacy_var": privacy_var,
        "privacy_dominated": privacy_var > sampling_var,
        "replications": cfg.replications,
    }


def run_scaling_study(cfg: ExperimentConfig) -> MetricsTable:
    specs = [
        (cfg, idx, n, eps)
        for idx, (n, eps) in enumerate(
            (n, eps) for n in cfg.n_grid for eps in cfg.epsilon_grid
        )
    ]
    return MetricsTable(cfg.experiment_id, _map_cells(_scaling_cell, specs))


def crossover_points(table: MetricsTable) -> dict:
    """First grid n per epsilon at which privacy variance <= sampling variance."""
    out = {}
    by_eps: dict[float, list[dict]] = {}
    for row in table.rows:
        by_eps.setdefault(row["epsilon"], []).append(row)
    for eps, rows in by_eps.items():
        out[eps] = None
        for row in sorted(rows, key=lambda r: r["n"]):
            if not row["privacy_dominated"]:
                out[eps] = row["n"]
                break
    return out


def privacy_slope(table: MetricsTable, eps: float) -> float:
    """Log-log slope of the privacy component of the MSE against n.

    The sampling variance (known in closed form for this model) is
    subtracted before fitting, since even on the privacy-dominated
    segment it flattens the raw-MSE slope noticeably.
    """
    pts = [
        (row["n"], row["mse"] - row["sampling_var"])
        for row in table.select(epsilon=eps)
        if row["privacy_dominated"] and row["mse"] > row["sampling_var"]
    ]
    if len(pts) < 2:
        raise ValueError("privacy-dominated segment has fewer than 2 points")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


# ------------------------------------------------------------------ #
# Experiment 5: type-I error and power
# ------------------------------------------------------------------ #

def _power_cell(spec):
    cfg, idx, eps, effect = spec
    theta0 = np.asarray(cfg.theta0 if cfg.theta0 is not None else GAUSS_THETA0, dtype=float)
    theta_true = theta0 + effect
    n = cfg.n_grid[0]
    budget = PrivacyBudget(eps, delta_for(n))
    methods = tuple(cfg.methods) if cfg.methods else ("plugin_wald", "nonprivate", "naive_synth")
    rejects = {m: 0.0 for m in methods}
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        model, raw = make_model_and_data(cfg.model_id, theta_true, n, rng)
        clipped = model.clip(raw)
        rel = release(model.mean_suff_stat(clipped), model, n, budget, rng)
        for method in methods:
            if method == "plugin_wald":
                th = estimate.plugin_mle(model, rel)
                var = estimate.dp_variance(model, th, rel)
            elif method == "noise_aware_wald":
                th = estimate.noise_aware_mle(model, rel)
                var = estimate.dp_variance(model, th, rel)
            elif method == "nonprivate":
                report = estimate.nonprivate_mle(model, raw, cfg.alpha)
                th, var = report.theta_hat, report.variance
            elif method == "naive_synth":
                plug = estimate.plugin_mle(model, rel)
                syn = synthgen.generate_synthetic(model, plug, synthgen.SynthConfig(n), rng)
                report = synthgen.naive_analysis(model, syn, cfg.alpha)
                th, var = report.theta_hat, report.variance
            else:
                raise ValueError(f"unknown method {method!r}")
            tests = estimate.wald_test(th, var, theta0, cfg.alpha)
            rejects[method] += np.mean([t["reject"] for t in tests])
    rows = []
    for method in methods:
        rate = rejects[method] / cfg.replications
        rows.append(
            {
                "experiment": cfg.experiment_id,
                "model": cfg.model_id,
                "method": method,
                "n": n,
                "epsilon": eps,
                "delta_effect": effect,
                "rejection_rate": rate,
                "is_type1": effect == 0.0,
                "replications": cfg.replications,
                "mc_se": mc_se(rate, cfg.replications),
            }
        )
    return rows


def run_power_study(cfg: ExperimentConfig) -> MetricsTable:
    effects = [0.0] + list(cfg.effect_grid if cfg.effect_grid else [0.1, 0.2, 0.5, 1.0])
    specs = [
        (cfg, idx, eps, effect)
        for idx, (eps, effect) in enumerate(
            (eps, effect) for eps in cfg.epsilon_grid for effect in effects
        )
    ]
    rows = [row for cell in _map_cells(_power_cell, specs) for row in cell]
    return MetricsTable(cfg.experiment_id, rows)


# ------------------------------------------------------------------ #
# Experiment 7: synthetic-data inferential evaluation
# ------------------------------------------------------------------ #

def _synth_cell(spec):
    cfg, idx, ratio = spec
    theta0 = np.asarray(cfg.theta0 if cfg.theta0 is not None else GAUSS_THETA0, dtype=float)
    n = cfg.n_grid[0]
    eps = cfg.epsilon_grid[0]
    budget = PrivacyBudget(eps, delta_for(n))
    n_syn = int(round(ratio * n))
    acc = {m: 0.0 for m in ("direct", "noise_aware_synth", "naive_synth")}
    for r in range(cfg.replications):
        rng = substream(cfg.master_seed, cfg.experiment_id, idx, r)
        model, raw = make_model_and_data(cfg.model_id, theta0, n, rng)
        clipped = model.clip(raw)
        rel = release(model.mean_suff_stat(clipped), model, n, budget, rng)
        direct = estimate.estimate_report(model, rel, "plugin", cfg.alpha)
        syn = synthgen.generate_synthetic(
            model, direct.theta_hat, synthgen.SynthConfig(n_syn), rng
        )
        reports = {
            "direct": direct,
            "noise_aware_synth": synthgen.noise_aware_synth_analysis(model, syn, rel, cfg.alpha),
            "naive_synth": synthgen.naive_analysis(model, syn, cfg.alpha),
        }
        for mode, report in reports.items():
            cover, _ = _coverage_lengths(report.cis, theta0)
            acc[mode] += cover.mean()
    rows = []
    for mode, total in acc.items():
        coverage = total / cfg.replications
        rows.append(
            {
                "experiment": cfg.experiment_id,
                "model": cfg.model_id,
                "method": mode,
                "n": n,
                "epsilon": eps,
                "ratio": ratio,
                "n_syn": n_syn,
                "coverage": coverage,
                "replications": cfg.replications,
                "mc_se": mc_se(coverage, cfg.replications),
            }
        )
    return rows


def run_synth_eval(cfg: ExperimentConfig) -> MetricsTable:
    ratios = list(cfg.ratios) if cfg.ratios else [1, 5, 10, 50]
    specs = [(cfg, idx, ratio) for idx, ratio in enumerate(ratios)]
    rows = [row for cell in _map_cells(_synth_cell, specs) for row in cell]
    return MetricsTable(cfg.experiment_id, rows)


# ------------------------------------------------------------------ #
# Dispatch and output
# ------------------------------------------------------------------ #

RUNNERS = {
    "variance_validation": run_variance_validation,
    "coverage_sweep": run_coverage_sweep,
    "clipping_study": run_clipping_study,
    "scaling_study": run_scaling_study,
    "power_study": run_power_study,
    "synth_eval": run_synth_eval,
}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> MetricsTable:
    try:
        runner = RUNNERS[cfg.experiment_id]
    except KeyError:
        raise ValueError(f"unknown experiment_id {cfg.experiment_id!r}") from None
    table = runner(cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "figures").mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / f"{cfg.experiment_id}.csv")
        table.to_csv(out_dir / "figures" / f"{cfg.experiment_id}_long.csv")
        from . import __version__

        cfg_json = cfg.to_json()
        manifest = {
            "experiment_id": cfg.experiment_id,
            "config": json.loads(cfg_json),
            "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
            "master_seed": cfg.master_seed,
            "version": __version__,
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return table
