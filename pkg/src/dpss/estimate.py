"""Post-processing inference from a released statistic.

Everything here consumes only the ReleasedStatistic and public model
structure (never raw data, except the explicitly non-private oracle), so
the privacy guarantee of the release carries over unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri

from .expfam import PARAM_BOX, Dataset, ExpFamModel, SolverDivergedError
from .privacy import ReleasedStatistic

VARIANCE_DIAG_CAP = 1e6  # divided by n when applied


class FisherSingularError(np.linalg.LinAlgError):
    """Fisher information is singular even after regularization."""


class InvalidVarianceError(ValueError):
    """Variance matrix has a negative diagonal entry."""


class NoiseAwareDivergedError(RuntimeError):
    """Noise-aware optimizer failed; carries the best iterate."""

    def __init__(self, message, best_iterate):
        super().__init__(message)
        self.best_iterate = np.asarray(best_iterate, dtype=float)


class BootstrapUnstableError(RuntimeError):
    """Too many bootstrap inner solves failed."""


@dataclass
class EstimateReport:
    theta_hat: np.ndarray
    variance: np.ndarray
    cis: list[tuple[float, float]]
    alpha: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta_hat": list(np.asarray(self.theta_hat, dtype=float)),
                "variance": [list(row) for row in np.asarray(self.variance, dtype=float)],
                "cis": [[lo, hi] for lo, hi in self.cis],
                "alpha": self.alpha,
                "method": self.method,
                "diagnostics": self.diagnostics,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        obj = json.loads(text)
        return cls(
            theta_hat=np.array(obj["theta_hat"], dtype=float),
            variance=np.array(obj["variance"], dtype=float),
            cis=[(lo, hi) for lo, hi in obj["cis"]],
            alpha=obj["alpha"],
            method=obj["method"],
            diagnostics=obj.get("diagnostics", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


@dataclass
class BootstrapConfig:
    b_boot: int = 500
    alpha: float = 0.05

    def __post_init__(self):
        if self.b_boot < 2:
            raise ValueError("b_boot must be at least 2")


def _regularizer(sigma: float) -> float:
    return max(1e-6, 0.01 * sigma**2)


def plugin_mle(model: ExpFamModel, rel: ReleasedStatistic) -> np.ndarray:
    """Invert the mean map at the noisy statistic as if it were clean."""
    if rel.d != model.d:
        raise ValueError("release dimension disagrees with model")
    return model.inverse_mean_map(rel.s_tilde)


def noise_aware_mle(model: ExpFamModel, rel: ReleasedStatistic) -> np.ndarray:
    """GLS estimator weighting the residual by sampling + privacy covariance.

    Minimizes
        (S - mu(theta))' (I_lam(theta)/n + sigma^2 I)^{-1} (S - mu(theta))
            + 0.1 sigma^2 ||theta - theta_plug||^2
    over the box, started at the plug-in point.  The Tikhonov term
    I_lam = I + lam I with lam = max(1e-6, 0.01 sigma^2) and the anchor
    penalty are stabilizers only; they vanish (or are inert) as sigma -> 0.
    """
    plug = plugin_mle(model, rel)
    sigma, n, d = rel.sigma, rel.n, model.d
    lam = _regularizer(sigma)
    s = rel.s_tilde
    eye = np.eye(d)

    def objective(theta):
        r = s - model.grad_log_partition(theta)
        cov = (model.fisher_info(theta) + lam * eye) / n + sigma**2 * eye
        gls = float(r @ np.linalg.solve(cov, r))
        diff = theta - plug
        return gls + 0.1 * sigma**2 * float(diff @ diff)

    res = minimize(
        objective,
        plug,
        method="L-BFGS-B",
        bounds=[(-PARAM_BOX, PARAM_BOX)] * d,
        options={"maxiter": 200, "gtol": 1e-8, "ftol": 1e-14},
    )
    if not res.success and res.status == 1:  # maxiter exceeded
        raise NoiseAwareDivergedError("na_diverged", res.x)
    return np.clip(res.x, -PARAM_BOX, PARAM_BOX)


def dp_variance(model: ExpFamModel, theta_hat: np.ndarray, rel: ReleasedStatistic) -> np.ndarray:
    """Variance of the DP estimator: inverse-Fisher/n plus the privacy inflation.

    Uses I_hat = I(theta_hat) + lam I, returns I_hat^{-1}/n + sigma^2 I_hat^{-2},
    with diagonal entries capped at 1e6/n.
    """
    lam = _regularizer(rel.sigma)
    ihat = model.fisher_info(theta_hat) + lam * np.eye(model.d)
    try:
        iinv = np.linalg.inv(ihat)
    except np.linalg.LinAlgError as exc:
        raise FisherSingularError("fisher_singular") from exc
    if not np.all(np.isfinite(iinv)):
        raise FisherSingularError("fisher_singular")
    var = iinv / rel.n + rel.sigma**2 * (iinv @ iinv)
    var = 0.5 * (var + var.T)
    cap = VARIANCE_DIAG_CAP / rel.n
    np.fill_diagonal(var, np.minimum(np.diag(var), cap))
    return var


def wald_ci(theta_hat: np.ndarray, variance: np.ndarray, alpha: float) -> list[tuple[float, float]]:
    """Per-coordinate theta_j +/- z_{1-alpha/2} sqrt(Var_jj)."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    diag = np.diag(np.atleast_2d(variance))
    if np.any(diag < 0):
        raise InvalidVarianceError("invalid_variance")
    z = ndtri(1.0 - alpha / 2.0)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    half = z * np.sqrt(diag)
    return [(float(t - h), float(t + h)) for t, h in zip(theta_hat, half)]


def wald_test(
    theta_hat: np.ndarray,
    variance: np.ndarray,
    theta0: np.ndarray,
    alpha: float,
) -> list[dict]:
    """Two-sided z-test per coordinate of H0: theta_j = theta0_j."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    diag = np.diag(np.atleast_2d(variance))
    if np.any(diag < 0):
        raise InvalidVarianceError("invalid_variance")
    zcrit = ndtri(1.0 - alpha / 2.0)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    out = []
    for t, t0, v in zip(theta_hat, theta0, diag):
        diff = abs(t - t0)
        if v == 0.0:
            score = 0.0 if diff == 0.0 else np.inf
        else:
            score = diff / np.sqrt(v)
        out.append({"reject": bool(score > zcrit), "p_value": float(2.0 * ndtr(-score))})
    return out


def parametric_bootstrap(
    model: ExpFamModel,
    rel: ReleasedStatistic,
    cfg: BootstrapConfig,
    rng: np.random.Generator,
) -> EstimateReport:
    """Percentile bootstrap from the CLT-regime distribution of the release.

    Draws S*_b ~ N(mu(theta_hat), I(theta_hat)/n + sigma^2 I) and re-estimates
    with the plug-in map; first-order equivalence makes the plug-in and
    noise-aware re-estimates interchangeable here, and the plug-in is far
    cheaper over hundreds of draws.
    """
    theta_hat = plugin_mle(model, rel)
    mu = model.grad_log_partition(theta_hat)
    cov = model.fisher_info(theta_hat) / rel.n + rel.sigma**2 * np.eye(model.d)
    chol = np.linalg.cholesky(cov + 1e-15 * np.eye(model.d))
    draws = np.empty((cfg.b_boot, model.d))
    failures = 0
    for b in range(cfg.b_boot):
        s_star = mu + chol @ rng.standard_normal(model.d)
        try:
            draws[b] = model.inverse_mean_map(s_star)
        except SolverDivergedError:
            # retry once with the statistic projected back onto the feasible ball
            norm = np.linalg.norm(s_star)
            s_proj = s_star * (rel.B / norm) if norm > rel.B else s_star
            try:
                draws[b] = model.inverse_mean_map(s_proj)
            except SolverDivergedError:
                failures += 1
                draws[b] = theta_hat
    if failures >= 0.1 * cfg.b_boot:
        raise BootstrapUnstableError("bootstrap_unstable")
    lo = np.quantile(draws, cfg.alpha / 2.0, axis=0)
    hi = np.quantile(draws, 1.0 - cfg.alpha / 2.0, axis=0)
    centered = draws - draws.mean(axis=0)
    variance = centered.T @ centered / (cfg.b_boot - 1)
    return EstimateReport(
        theta_hat=theta_hat,
        variance=variance,
        cis=[(float(a), float(b)) for a, b in zip(lo, hi)],
        alpha=cfg.alpha,
        method="bootstrap",
        diagnostics={"b_boot": cfg.b_boot, "failures": failures},
    )


def nonprivate_mle(model: ExpFamModel, data: Dataset, alpha: float) -> EstimateReport:
    """Oracle baseline: classical MLE with inverse-Fisher/n Wald intervals."""
    m = model.with_design(data.x) if data.y is not None else model
    s_bar = m.mean_suff_stat(data)
    theta_hat = m.inverse_mean_map(s_bar)
    try:
        variance = np.linalg.inv(m.fisher_info(theta_hat)) / data.n
    except np.linalg.LinAlgError as exc:
        raise FisherSingularError("fisher_singular") from exc
    variance = 0.5 * (variance + variance.T)
    return EstimateReport(
        theta_hat=theta_hat,
        variance=variance,
        cis=wald_ci(theta_hat, variance, alpha),
        alpha=alpha,
        method="nonprivate_mle",
        diagnostics={"n": data.n},
    )


def estimate_report(
    model: ExpFamModel,
    rel: ReleasedStatistic,
    method: str,
    alpha: float,
) -> EstimateReport:
    """Run the chosen DP estimator with its Wald interval in one call."""
    if method == "plugin":
        theta_hat = plugin_mle(model, rel)
        tag = "plugin_wald"
    elif method == "noise_aware":
        theta_hat = noise_aware_mle(model, rel)
        tag = "noise_aware_wald"
    else:
        raise ValueError(f"unknown method {method!r}")
    variance = dp_variance(model, theta_hat, rel)
    return EstimateReport(
        theta_hat=theta_hat,
        variance=variance,
        cis=wald_ci(theta_hat, variance, alpha),
        alpha=alpha,
        method=tag,
        diagnostics={"lambda": _regularizer(rel.sigma), "sigma": rel.sigma},
    )
