"""
Per-cluster generalized linear models fitted by Fisher scoring.

Each cluster is treated as an ordinary GLM (no random effects). The fit
returns the summaries a two-step mixed-model method consumes: the cluster
size, the coefficient estimate, the maximized average log-likelihood and
the Hessian of the average log-likelihood at the optimum.

Only canonical links are supported, so Fisher scoring and Newton-Raphson
coincide and the observed and expected information are equal.
"""

from __future__ import annotations

import enum
import warnings
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Hashable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit, gammaln, logit

from .exceptions import (
    DegenerateDesign,
    DomainError,
    FitError,
    NonFiniteIterate,
    TooFewObservations,
)

if TYPE_CHECKING:
    from .criterion import ModelSpec

__all__ = [
    "Family",
    "ClusterData",
    "ClusterFit",
    "FitControl",
    "fit_cluster",
    "fit_clusters",
    "loglik",
    "score",
    "cluster_aic",
]

_LOG_2PI = np.log(2.0 * np.pi)


class Family(enum.Enum):
    """Exponential family with its canonical link.

    Poisson and Bernoulli have dispersion fixed at 1. The Gaussian family
    profiles its variance, which then counts as one extra AIC parameter.
    """

    POISSON = "poisson"
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        key = str(name).strip().lower().split("-")[0]
        aliases = {"binomial": "bernoulli", "logistic": "bernoulli", "normal": "gaussian"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown family {name!r}") from None

    @property
    def link_name(self) -> str:
        return {"poisson": "log", "bernoulli": "logit", "gaussian": "identity"}[self.value]

    @property
    def profiles_dispersion(self) -> bool:
        return self is Family.GAUSSIAN

    def link(self, mu):
        if self is Family.POISSON:
            return np.log(mu)
        if self is Family.BERNOULLI:
            return logit(mu)
        return np.asarray(mu, dtype=float)

    def inverse_link(self, eta):
        if self is Family.POISSON:
            return np.exp(eta)
        if self is Family.BERNOULLI:
            return expit(eta)
        return np.asarray(eta, dtype=float)

    def variance(self, mu):
        """Unit variance V(mu); equals d mu / d eta under the canonical link."""
        if self is Family.POISSON:
            return mu
        if self is Family.BERNOULLI:
            return mu * (1.0 - mu)
        return np.ones_like(mu)

    def log_kernel(self, y, eta, dispersion=1.0):
        """The part of log f(y; eta) that depends on eta."""
        if self is Family.POISSON:
            return y * eta - np.exp(eta)
        if self is Family.BERNOULLI:
            return y * eta - np.logaddexp(0.0, eta)
        return -0.5 * (y - eta) ** 2 / dispersion

    def log_base(self, y, dispersion=1.0):
        """The part of log f(y; eta) free of eta (log y!, normalizers)."""
        if self is Family.POISSON:
            return -gammaln(np.asarray(y, dtype=float) + 1.0)
        if self is Family.BERNOULLI:
            return np.zeros_like(y, dtype=float)
        return np.full_like(y, -0.5 * (_LOG_2PI + np.log(dispersion)), dtype=float)

    def logpdf(self, y, eta, dispersion=1.0):
        return self.log_kernel(y, eta, dispersion) + self.log_base(y, dispersion)

    def invalid_responses(self, y) -> np.ndarray:
        """Boolean mask of response values outside the family's support."""
        y = np.asarray(y, dtype=float)
        bad = ~np.isfinite(y)
        if self is Family.POISSON:
            bad |= (y < 0) | (y != np.round(y))
        elif self is Family.BERNOULLI:
            bad |= (y != 0) & (y != 1)
        return bad

    def start_intercept(self, y):
        """Intercept start g(ybar), with ybar nudged inside the link domain.

        ``y`` may be 2-D, one row per cluster.
        """
        y = np.asarray(y, dtype=float)
        ybar = y.mean(axis=-1)
        n = y.shape[-1]
        if self is Family.POISSON:
            return np.log(np.maximum(ybar, 0.5 / n))
        if self is Family.BERNOULLI:
            return logit((ybar * n + 0.5) / (n + 1.0))
        return ybar


@dataclass(frozen=True, eq=False)
class ClusterData:
    """Response vector and design matrix of one cluster.

    Column 0 of ``X`` is the intercept and must be identically one;
    columns ``1..r`` are the covariates that model specs refer to.
    """

    cluster_id: Hashable
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        X = np.array(self.X, dtype=float)
        if y.ndim != 1:
            raise ValueError("y must be one-dimensional")
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X has shape {X.shape}, expected ({y.shape[0]}, r+1)")
        if y.shape[0] < 1:
            raise ValueError("a cluster needs at least one observation")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError(f"cluster {self.cluster_id!r} has non-finite values")
        if not np.all(X[:, 0] == 1.0):
            raise ValueError("column 0 of X must be the all-ones intercept column")
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1] - 1

    @cached_property
    def canonical_order(self) -> np.ndarray:
        # lexicographic row order of (X, y); makes fits invariant to row permutation
        return np.lexsort(np.column_stack([self.X, self.y]).T[::-1])

    def design(self, active_columns: Sequence[int]) -> np.ndarray:
        return self.X[:, [0, *active_columns]]


@dataclass(frozen=True)
class FitControl:
    max_iter: int = 50
    deviance_tol: float = 1e-8
    score_tol: float = 1e-6
    coef_bound: float = 30.0
    rank_tol: float = 1e-10
    max_halvings: int = 30


@dataclass(frozen=True, eq=False)
class ClusterFit:
    """Summary of one cluster's GLM fit.

    ``hessian`` is the Hessian of the *average* log-likelihood at
    ``beta_hat``; ``max_loglik`` is on the sum scale and derived from the
    stored average.
    """

    cluster_id: Hashable
    n: int
    beta_hat: np.ndarray
    max_avg_loglik: float
    hessian: np.ndarray
    converged: bool
    iterations: int
    n_params: int
    dispersion: float = 1.0

    @property
    def max_loglik(self) -> float:
        return self.n * self.max_avg_loglik


# --------------------------------------------------------------------- #
# batched Fisher scoring
# --------------------------------------------------------------------- #


def _row_loglik(family: Family, y, eta, base):
    """Sum-scale log-likelihood of each row of a (B, n) batch."""
    if family is Family.GAUSSIAN:
        n = y.shape[-1]
        with np.errstate(divide="ignore"):
            phi = ((y - eta) ** 2).sum(axis=-1) / n
            return -0.5 * n * (_LOG_2PI + np.log(phi) + 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        return family.log_kernel(y, eta).sum(axis=-1) + base


def _row_dispersion(family: Family, y, eta):
    if family is Family.GAUSSIAN:
        return ((y - eta) ** 2).mean(axis=-1)
    return np.ones(y.shape[:-1])


def _irls(y: np.ndarray, X: np.ndarray, family: Family, ctrl: FitControl):
    """Fisher scoring on a batch of equally sized clusters.

    Converged or diverged rows are frozen while the rest keep iterating,
    so each row's result does not depend on its batch mates' progress.
    """
    B, n, p = X.shape
    base = family.log_base(y).sum(axis=-1)
    beta = np.zeros((B, p))
    beta[:, 0] = family.start_intercept(y)
    eta = np.einsum("bnp,bp->bn", X, beta)
    dev = -2.0 * _row_loglik(family, y, eta, base)
    prev_dev = np.full(B, np.inf)

    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    diverged = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)

    for it in range(ctrl.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Xa, ya, ba = X[idx], y[idx], beta[idx]
        eta = np.einsum("bnp,bp->bn", Xa, ba)
        mu = family.inverse_link(eta)
        resid = ya - mu
        phi = _row_dispersion(family, ya, eta)
        raw_score = np.einsum("bnp,bn->bp", Xa, resid)
        with np.errstate(divide="ignore", invalid="ignore"):
            avg_score = raw_score / (n * phi)[:, None]
        rel = np.abs(dev[idx] - prev_dev[idx]) / (np.abs(dev[idx]) + 0.1)
        done = (rel < ctrl.deviance_tol) & (np.max(np.abs(avg_score), axis=1) < ctrl.score_tol)
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == ctrl.max_iter:
            break
        keep = ~done
        idx, Xa, ya, ba = idx[keep], Xa[keep], ya[keep], ba[keep]
        if idx.size == 0:
            break
        w = family.variance(mu[keep])
        info = np.einsum("bnp,bn,bnq->bpq", Xa, w, Xa)
        try:
            step = np.linalg.solve(info, raw_score[keep][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(a, s, rcond=None)[0] for a, s in zip(info, raw_score[keep])])

        old = dev[idx]
        new_beta = ba + step
        new_dev = -2.0 * _row_loglik(family, ya, np.einsum("bnp,bp->bn", Xa, new_beta), base[idx])
        bad = ~(new_dev <= old + 1e-10 * np.abs(old))
        for _ in range(ctrl.max_halvings):
            if not bad.any():
                break
            step[bad] *= 0.5
            new_beta[bad] = ba[bad] + step[bad]
            eta_bad = np.einsum("bnp,bp->bn", Xa[bad], new_beta[bad])
            new_dev[bad] = -2.0 * _row_loglik(family, ya[bad], eta_bad, base[idx][bad])
            bad = ~(new_dev <= old + 1e-10 * np.abs(old))
        # a step that cannot decrease the deviance is already at numerical optimum
        new_beta[bad] = ba[bad]
        new_dev[bad] = old[bad]

        beta[idx] = new_beta
        prev_dev[idx] = old
        dev[idx] = new_dev
        iterations[idx] = it + 1
        blown = ~np.all(np.isfinite(new_beta), axis=1) | ~np.isfinite(new_dev)
        if family is not Family.GAUSSIAN:
            blown |= np.any(np.abs(new_beta) > ctrl.coef_bound, axis=1)
        diverged[idx[blown]] = True
        active[idx[blown]] = False

    eta = np.einsum("bnp,bp->bn", X, beta)
    mu = family.inverse_link(eta)
    phi = _row_dispersion(family, y, eta)
    w = family.variance(mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        hessian = -np.einsum("bnp,bn,bnq->bpq", X, w, X) / (n * phi)[:, None, None]
    loglik_sum = _row_loglik(family, y, eta, base)
    return beta, loglik_sum, hessian, phi, converged, diverged, iterations


def _rank_problem(Xc: np.ndarray, columns: Sequence[int], tol: float):
    """Return the offending columns if ``Xc`` is rank deficient, else None.

    Pivoted QR of the design is equivalent to pivoted Cholesky of the
    normal equations, whose pivots are the squared diagonal of R.
    """
    R, piv = scipy.linalg.qr(Xc, mode="r", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return tuple(columns)
    rank = int(np.sum(d**2 > tol * d[0] ** 2))
    if rank == Xc.shape[1]:
        return None
    return tuple(sorted(columns[j] for j in piv[rank:]))


def fit_clusters(
    clusters: Sequence[ClusterData],
    model: "ModelSpec",
    ctrl: FitControl | None = None,
) -> list[ClusterFit | FitError]:
    """Fit ``model`` independently in every cluster.

    Clusters of equal size are fitted together in one vectorized batch.
    Per-cluster failures are returned in place (as exception instances)
    rather than raised, so callers can apply their own skip policy.
    """
    ctrl = ctrl or FitControl()
    family = model.family
    columns = (0, *model.active_columns)
    p = len(columns)
    n_params = p + (1 if family.profiles_dispersion else 0)
    results: list = [None] * len(clusters)
    groups: dict[int, list[int]] = defaultdict(list)

    for k, c in enumerate(clusters):
        if max(columns) >= c.X.shape[1]:
            raise IndexError(
                f"model uses column {max(columns)} but cluster {c.cluster_id!r} has {c.X.shape[1]} columns"
            )
        if family.invalid_responses(c.y).any():
            raise DomainError(f"cluster {c.cluster_id!r} has responses invalid for {family.value}")
        if c.n < p:
            results[k] = TooFewObservations(
                f"cluster {c.cluster_id!r}: {c.n} observations for {p} coefficients", c.cluster_id
            )
        else:
            groups[c.n].append(k)

    for n, members in groups.items():
        Xs = np.stack([clusters[k].X[clusters[k].canonical_order][:, columns] for k in members])
        ys = np.stack([clusters[k].y[clusters[k].canonical_order] for k in members])

        s = np.linalg.svd(Xs, compute_uv=False)
        ok = np.ones(len(members), dtype=bool)
        for j in np.flatnonzero(s[:, -1] <= 1e-3 * s[:, 0]):
            bad_cols = _rank_problem(Xs[j], columns, ctrl.rank_tol)
            if bad_cols is not None:
                cid = clusters[members[j]].cluster_id
                results[members[j]] = DegenerateDesign(
                    f"cluster {cid!r}: design rank deficient in columns {list(bad_cols)}", bad_cols, cid
                )
                ok[j] = False
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        beta, ll, hess, phi, conv, div, iters = _irls(ys[sel], Xs[sel], family, ctrl)

        for row, j in enumerate(sel):
            k = members[j]
            cid = clusters[k].cluster_id
            if div[row]:
                results[k] = NonFiniteIterate(
                    f"cluster {cid!r}: coefficients diverged (possible separation)", cid
                )
            elif family is Family.GAUSSIAN and not phi[row] > 0.0:
                results[k] = FitError(f"cluster {cid!r}: zero residual variance", cid)
            else:
                beta[row].setflags(write=False)
                results[k] = ClusterFit(
                    cluster_id=cid,
                    n=n,
                    beta_hat=beta[row],
                    max_avg_loglik=float(ll[row] / n),
                    hessian=hess[row],
                    converged=bool(conv[row]),
                    iterations=int(iters[row]),
                    n_params=n_params,
                    dispersion=float(phi[row]),
                )
    return results


def fit_cluster(data: ClusterData, model: "ModelSpec", ctrl: FitControl | None = None) -> ClusterFit:
    """Fit one cluster, raising the fit error if there is one.

    Examples
    --------
    >>> from meanaic.criterion import ModelSpec
    >>> c = ClusterData("a", [1, 2, 3], [[1], [1], [1]])
    >>> fit = fit_cluster(c, ModelSpec((), Family.POISSON))
    >>> round(float(fit.beta_hat[0]), 6)
    0.693147
    """
    (result,) = fit_clusters([data], model, ctrl)
    if isinstance(result, Exception):
        raise result
    return result


# --------------------------------------------------------------------- #
# likelihood evaluation at arbitrary coefficients
# --------------------------------------------------------------------- #


def _eta(data: ClusterData, model: "ModelSpec", beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    X = data.design(model.active_columns)
    if beta.shape != (X.shape[1],):
        raise ValueError(f"beta has shape {beta.shape}, model needs ({X.shape[1]},)")
    return X @ beta


def loglik(data: ClusterData, model: "ModelSpec", beta, average: bool = False) -> float:
    """Exact log-likelihood of ``beta`` in one cluster, constants included.

    The Gaussian family uses its profiled variance RSS(beta)/n.
    """
    family = model.family
    eta = _eta(data, model, beta)
    if family is Family.GAUSSIAN:
        phi = float(np.mean((data.y - eta) ** 2))
        if not phi > 0.0:
            raise DomainError("profiled Gaussian variance is zero")
        total = float(np.sum(family.logpdf(data.y, eta, phi)))
    else:
        total = float(np.sum(family.logpdf(data.y, eta)))
    return total / data.n if average else total


def score(data: ClusterData, model: "ModelSpec", beta) -> np.ndarray:
    """Gradient of the average log-likelihood with respect to beta."""
    family = model.family
    eta = _eta(data, model, beta)
    X = data.design(model.active_columns)
    resid = data.y - family.inverse_link(eta)
    phi = float(np.mean((data.y - eta) ** 2)) if family is Family.GAUSSIAN else 1.0
    return X.T @ resid / (data.n * phi)


def cluster_aic(fit: ClusterFit, p_effective: int | None = None) -> float:
    """``-2 * max_loglik + 2 * p_effective``.

    ``p_effective`` defaults to the fit's own parameter count (coefficients,
    plus the profiled variance for Gaussian fits).
    """
    if not fit.converged:
        warnings.warn(f"cluster {fit.cluster_id!r} did not converge; AIC uses the last iterate", RuntimeWarning)
    p = fit.n_params if p_effective is None else p_effective
    return -2.0 * fit.max_loglik + 2.0 * p
