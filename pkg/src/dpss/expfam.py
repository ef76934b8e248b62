"""Exponential-family models with bounded sufficient statistics.

Three concrete families are provided: Gaussian mean with known variance,
logistic regression with a public design, and Poisson regression with a
public design.  Each model exposes the sufficient-statistic map, the mean
map (gradient of the log-partition), the Fisher information, a sampler,
a clipping rule that enforces the L2 bound on the per-record statistic,
and the inverse mean map used by the plug-in estimator.

Regression designs are treated as public: only sum(y_i * x_i) carries
private information, and the Fisher information is computed from the
design after the release.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

PARAM_BOX = 10.0  # box constraint |theta_j| <= 10 for all solvers


class EmptyDatasetError(ValueError):
    """Raised when an operation receives a dataset with no records."""


class MeanOverflowError(FloatingPointError):
    """Raised when a log-link mean exp(x.theta) would overflow."""


class SolverDivergedError(RuntimeError):
    """Inverse mean map failed to converge; carries the last iterate."""

    def __init__(self, message, last_iterate):
        super().__init__(message)
        self.last_iterate = np.asarray(last_iterate, dtype=float)


@dataclass(frozen=True)
class ClipBounds:
    """L2 bounds enforced on per-record sufficient statistics.

    ``B`` is the overall bound on ||s(record)||_2.  For regression models
    ``B_X`` bounds the feature norm; for Poisson ``B_Y`` caps the count,
    so the effective bound is B = B_X * B_Y.
    """

    B: float
    B_X: float | None = None
    B_Y: float | None = None

    def __post_init__(self):
        if self.B <= 0:
            raise ValueError("clip bound B must be positive")


@dataclass
class Dataset:
    """A batch of records.

    Gaussian mean: ``x`` has shape (n,) and ``y`` is None.
    Regression: ``x`` has shape (n, d) and ``y`` shape (n,).
    """

    x: np.ndarray
    y: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if len(self.y) != len(self.x):
                raise ValueError("x and y lengths disagree")

    @property
    def n(self) -> int:
        return len(self.x)


class ExpFamModel(abc.ABC):
    """Common interface for the supported exponential families."""

    model_id: str
    d: int
    clip_bounds: ClipBounds

    # -- data handling -------------------------------------------------

    @abc.abstractmethod
    def clip(self, data: Dataset) -> Dataset:
        """Return a copy of ``data`` with every record inside the clip bounds.

        Idempotent; records already inside the bounds pass through unchanged.
        """

    @abc.abstractmethod
    def suff_stats(self, data: Dataset) -> np.ndarray:
        """Per-record sufficient statistics, shape (n, d)."""

    def mean_suff_stat(self, data: Dataset) -> np.ndarray:
        """Arithmetic mean of s over (pre-clipped) records, shape (d,)."""
        if data.n == 0:
            raise EmptyDatasetError("empty_dataset")
        return self.suff_stats(data).mean(axis=0)

    # -- family structure ----------------------------------------------

    @abc.abstractmethod
    def grad_log_partition(self, theta: np.ndarray) -> np.ndarray:
        """Mean parameter mu(theta), the gradient of the log-partition."""

    @abc.abstractmethod
    def fisher_info(self, theta: np.ndarray) -> np.ndarray:
        """Fisher information I(theta) = Jacobian of the mean map, (d, d)."""

    @abc.abstractmethod
    def sample(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> Dataset:
        """Draw n i.i.d. records at theta.  Draws are not clipped."""

    def with_design(self, design: np.ndarray) -> "ExpFamModel":
        """Model bound to a different public design (no-op for gaussian)."""
        return self

    # -- inverse mean map ----------------------------------------------

    def inverse_mean_map(self, s: np.ndarray, max_iter: int = 100) -> np.ndarray:
        """Solve grad_log_partition(theta) = s over the box [-10, 10]^d.

        Damped Newton with the Fisher information as Jacobian; falls back
        to box-constrained quasi-Newton on the least-squares objective,
        which resolves statistics outside the attainable mean range to
        boundary-constrained minimizers instead of erroring.
        """
        s = np.asarray(s, dtype=float)
        theta = np.zeros(self.d)
        tol = 1e-8 * max(1.0, float(np.linalg.norm(s)))
        resid = self.grad_log_partition(theta) - s
        for _ in range(max_iter):
            rnorm = np.linalg.norm(resid)
            if rnorm <= tol:
                return theta
            J = self.fisher_info(theta)
            try:
                step = np.linalg.solve(J + 1e-12 * np.eye(self.d), -resid)
            except np.linalg.LinAlgError:
                break
            # backtrack on the residual norm, up to 30 halvings
            t = 1.0
            improved = False
            for _ in range(30):
                cand = np.clip(theta + t * step, -PARAM_BOX, PARAM_BOX)
                try:
                    cand_resid = self.grad_log_partition(cand) - s
                except MeanOverflowError:
                    t *= 0.5
                    continue
                if np.linalg.norm(cand_resid) < rnorm:
                    theta, resid = cand, cand_resid
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
        if np.linalg.norm(resid) <= tol:
            return theta
        return self._inverse_mean_map_fallback(s, theta)

    def _inverse_mean_map_fallback(self, s: np.ndarray, theta0: np.ndarray) -> np.ndarray:
        def objective(theta):
            try:
                r = self.grad_log_partition(theta) - s
                return 0.5 * float(r @ r), self.fisher_info(theta) @ r
            except MeanOverflowError:
                return 1e300, np.zeros(self.d)

        res = minimize(
            objective,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=[(-PARAM_BOX, PARAM_BOX)] * self.d,
            options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-12},
        )
        theta = np.clip(res.x, -PARAM_BOX, PARAM_BOX)
        grad = self.fisher_info(theta) @ (self.grad_log_partition(theta) - s)
        # at a box optimum the projected gradient vanishes even though the
        # residual may not; only a large projected gradient is a failure
        proj = _projected_gradient(theta, grad)
        if np.linalg.norm(proj) > 1e-5 * max(1.0, np.linalg.norm(s)):
            raise SolverDivergedError("solver_diverged", theta)
        return theta


def _projected_gradient(theta, grad):
    proj = grad.copy()
    proj[(theta >= PARAM_BOX - 1e-12) & (grad < 0)] = 0.0
    proj[(theta <= -PARAM_BOX + 1e-12) & (grad > 0)] = 0.0
    return proj


class GaussianMeanModel(ExpFamModel):
    """Gaussian mean with known variance; s(x) = x, theta = mu / sigma0^2."""

    model_id = "gaussian_mean"

    def __init__(self, sigma0_sq: float = 1.0, B: float = 5.0):
        if sigma0_sq <= 0:
            raise ValueError("sigma0_sq must be positive")
        self.sigma0_sq = float(sigma0_sq)
        self.d = 1
        self.clip_bounds = ClipBounds(B=float(B))

    def clip(self, data: Dataset) -> Dataset:
        B = self.clip_bounds.B
        return Dataset(np.clip(data.x, -B, B), meta=dict(data.meta))

    def suff_stats(self, data: Dataset) -> np.ndarray:
        return data.x.reshape(-1, 1)

    def log_partition(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        return 0.5 * self.sigma0_sq * float(theta[0] ** 2)

    def grad_log_partition(self, theta: np.ndarray) -> np.ndarray:
        return self.sigma0_sq * np.asarray(theta, dtype=float)

    def fisher_info(self, theta: np.ndarray) -> np.ndarray:
        return np.array([[self.sigma0_sq]])

    def inverse_mean_map(self, s: np.ndarray, max_iter: int = 100) -> np.ndarray:
        # the mean map is linear, so the box-constrained solution is closed form
        s = np.asarray(s, dtype=float)
        return np.clip(s / self.sigma0_sq, -PARAM_BOX, PARAM_BOX)

    def sample(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> Dataset:
        mu = self.sigma0_sq * float(np.asarray(theta, dtype=float)[0])
        return Dataset(rng.normal(mu, np.sqrt(self.sigma0_sq), size=n))


class _RegressionModel(ExpFamModel):
    """Shared machinery for models with s(x, y) = y * x and a public design."""

    def __init__(self, design: np.ndarray):
        design = np.atleast_2d(np.asarray(design, dtype=float))
        self.design = self._clip_features(design)
        self.d = self.design.shape[1]

    def _clip_features(self, X: np.ndarray) -> np.ndarray:
        B_X = self.clip_bounds.B_X
        norms = np.linalg.norm(X, axis=1)
        # the tolerance makes clipping exactly idempotent: rescaled rows
        # land within an ulp of the bound and must not be rescaled again
        scale = np.where(norms > B_X * (1.0 + 1e-14), B_X / np.maximum(norms, 1e-300), 1.0)
        return X * scale[:, None]

    def suff_stats(self, data: Dataset) -> np.ndarray:
        return data.x * data.y[:, None]

    def _design_for_sampling(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # reuse the design when sizes match; otherwise resample rows uniformly
        if n == len(self.design):
            return self.design
        idx = rng.integers(0, len(self.design), size=n)
        return self.design[idx]


class LogisticModel(_RegressionModel):
    """Logistic regression with y in {0, 1}; ||y x||_2 <= ||x||_2 = B_X."""

    model_id = "logistic"

    def __init__(self, design: np.ndarray, B_X: float = 3.0):
        self.clip_bounds = ClipBounds(B=float(B_X), B_X=float(B_X))
        super().__init__(design)

    def clip(self, data: Dataset) -> Dataset:
        return Dataset(self._clip_features(data.x), data.y, meta=dict(data.meta))

    def grad_log_partition(self, theta: np.ndarray) -> np.ndarray:
        p = expit(self.design @ np.asarray(theta, dtype=float))
        return (p[:, None] * self.design).mean(axis=0)

    def fisher_info(self, theta: np.ndarray) -> np.ndarray:
        p = expit(self.design @ np.asarray(theta, dtype=float))
        w = p * (1.0 - p)
        return (self.design.T * w) @ self.design / len(self.design)

    def sample(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> Dataset:
        X = self._design_for_sampling(n, rng)
        p = expit(X @ np.asarray(theta, dtype=float))
        y = (rng.random(n) < p).astype(float)
        return Dataset(X.copy(), y)

    def with_design(self, design: np.ndarray) -> "LogisticModel":
        return LogisticModel(design, B_X=self.clip_bounds.B_X)


class PoissonModel(_RegressionModel):
    """Poisson regression with log link; counts capped at B_Y by clipping."""

    model_id = "poisson"

    def __init__(self, design: np.ndarray, B_X: float = 3.0, B_Y: float = 20.0):
        self.clip_bounds = ClipBounds(B=float(B_X) * float(B_Y), B_X=float(B_X), B_Y=float(B_Y))
        super().__init__(design)

    def clip(self, data: Dataset) -> Dataset:
        return Dataset(
            self._clip_features(data.x),
            np.minimum(data.y, self.clip_bounds.B_Y),
            meta=dict(data.meta),
        )

    def _rates(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        eta = X @ np.asarray(theta, dtype=float)
        if np.max(eta) > 700.0:
            raise MeanOverflowError("mean_overflow")
        return np.exp(eta)

    def grad_log_partition(self, theta: np.ndarray) -> np.ndarray:
        lam = self._rates(theta, self.design)
        return (lam[:, None] * self.design).mean(axis=0)

    def fisher_info(self, theta: np.ndarray) -> np.ndarray:
        lam = self._rates(theta, self.design)
        return (self.design.T * lam) @ self.design / len(self.design)

    def sample(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> Dataset:
        X = self._design_for_sampling(n, rng)
        lam = self._rates(theta, X)
        return Dataset(X.copy(), rng.poisson(lam).astype(float))

    def with_design(self, design: np.ndarray) -> "PoissonModel":
        return PoissonModel(design, B_X=self.clip_bounds.B_X, B_Y=self.clip_bounds.B_Y)


# ---------------------------------------------------------------------- #
# Config and CSV I/O
# ---------------------------------------------------------------------- #

def load_model_config(path: str | Path) -> ExpFamModel:
    """Build a model from a JSON config.

    Schema: {model_id, d, sigma0_sq?, clip: {B | B_X, B_Y}, design_csv?}.
    ``design_csv`` is resolved relative to the config file and holds
    headerless rows of d decimal floats.
    """
    path = Path(path)
    cfg = json.loads(path.read_text())
    model_id = cfg["model_id"]
    clip = cfg.get("clip", {})
    if model_id == "gaussian_mean":
        return GaussianMeanModel(sigma0_sq=cfg.get("sigma0_sq", 1.0), B=clip["B"])
    if "design_csv" not in cfg:
        raise ValueError(f"model {model_id!r} requires a design_csv")
    design = np.loadtxt(path.parent / cfg["design_csv"], delimiter=",", ndmin=2)
    if design.shape[1] != cfg["d"]:
        raise ValueError("design column count disagrees with d")
    if model_id == "logistic":
        return LogisticModel(design, B_X=clip["B_X"])
    if model_id == "poisson":
        return PoissonModel(design, B_X=clip["B_X"], B_Y=clip["B_Y"])
    raise ValueError(f"unknown model_id {model_id!r}")


def dataset_from_csv(path: str | Path, model: ExpFamModel) -> Dataset:
    """Read a dataset CSV: one column x (gaussian) or d features then y."""
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    if arr.size == 0:
        raise EmptyDatasetError("empty_dataset")
    if model.model_id == "gaussian_mean":
        if arr.shape[1] != 1:
            raise ValueError("gaussian data must have exactly one column")
        return Dataset(arr[:, 0])
    if arr.shape[1] != model.d + 1:
        raise ValueError(f"expected {model.d} feature columns plus y")
    return Dataset(arr[:, :-1], arr[:, -1])


def dataset_to_csv(data: Dataset, path: str | Path) -> None:
    if data.y is None:
        arr = data.x.reshape(-1, 1)
    else:
        arr = np.column_stack([data.x, data.y])
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")
