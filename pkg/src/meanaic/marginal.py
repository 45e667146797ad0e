"""
Marginal AIC baseline: random-intercept GLMM by adaptive Gauss-Hermite quadrature.

The random intercept of each cluster is integrated out numerically. For
every cluster the quadrature rule is centred at the mode of the integrand
and scaled by its curvature there, so a modest number of nodes gives an
essentially exact integral for the cluster sizes used here.

The optimizer works on ``theta = (beta, log sigma0^2)`` (plus
``log dispersion`` for the Gaussian family) and takes Newton steps whose
gradient and Hessian come from Louis' identity: posterior-weighted
complete-data derivatives evaluated at the quadrature nodes.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .criterion import ModelScore, ModelSpec, SelectionReport, choose_best
from .exceptions import QuadratureModeFailure
from .glm import ClusterData, Family, FitControl, _irls

__all__ = [
    "MarginalControl",
    "MarginalFit",
    "gauss_hermite_log_integral",
    "marginal_loglik",
    "marginal_score",
    "fit_marginal",
    "maic_select",
]

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class MarginalControl:
    nodes: int = 15
    max_iter: int = 100
    tol: float = 1e-12
    mode_tol: float = 1e-10
    mode_max_iter: int = 200
    boundary: float = 1e-6
    # force the observation-level evaluation even where a fast path exists
    generic: bool = False
    glm: FitControl = field(default_factory=FitControl)


@dataclass(frozen=True, eq=False)
class MarginalFit:
    model: ModelSpec
    beta_hat: np.ndarray
    sigma0_sq_hat: float
    marginal_loglik: float
    mAIC: float
    quadrature_nodes: int
    converged: bool
    boundary: bool
    iterations: int
    dispersion: float = 1.0


# --------------------------------------------------------------------- #
# quadrature primitives
# --------------------------------------------------------------------- #


@functools.lru_cache(maxsize=32)
def _hermite(nodes: int):
    t, w = np.polynomial.hermite.hermgauss(nodes)
    t.setflags(write=False)
    log_w = np.log(w) + t**2
    log_w.setflags(write=False)
    return t, log_w


def _agh_log_terms(log_f_at_nodes, log_w, scale):
    """Log of each node's contribution; the integral is their logsumexp."""
    return log_w + log_f_at_nodes + np.log(_SQRT2 * scale)[..., None]


def gauss_hermite_log_integral(
    log_f: Callable[[np.ndarray], np.ndarray],
    mode: float,
    curvature: float,
    nodes: int = 15,
) -> float:
    """``log  integral exp(log_f(b)) db`` by adaptive Gauss-Hermite.

    ``curvature`` is ``-d^2 log_f / db^2`` at ``mode``. The rule is exact
    when ``log_f`` is quadratic.

    >>> s2 = 0.4
    >>> lf = lambda b: b - 0.5 * b**2 / s2 - 0.5 * np.log(2 * np.pi * s2)
    >>> round(gauss_hermite_log_integral(lf, s2, 1 / s2, 20), 12)
    0.2
    """
    t, log_w = _hermite(nodes)
    scale = 1.0 / math.sqrt(curvature)
    b = mode + _SQRT2 * scale * t
    return float(logsumexp(_agh_log_terms(np.asarray(log_f(b)), log_w, np.asarray(scale))))


class _Stacked:
    """All clusters concatenated, with segment bookkeeping for per-cluster sums."""

    def __init__(self, data: Sequence[ClusterData], model: ModelSpec):
        if not data:
            raise ValueError("no clusters")
        self.family = model.family
        self.model = model
        self.y = np.concatenate([c.y for c in data])
        self.X = np.concatenate([c.design(model.active_columns) for c in data])
        self.sizes = np.array([c.n for c in data])
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.index = np.repeat(np.arange(len(data)), self.sizes)
        self.K = len(data)
        self.p = self.X.shape[1]
        if self.family.invalid_responses(self.y).any():
            raise ValueError(f"responses invalid for family {self.family.value}")
        self._base = self.segsum(self.family.log_base(self.y))
        self.y_sum = self.segsum(self.y)
        self.xy = self.segsum(self.X * self.y[:, None])

    def segsum(self, a):
        return np.add.reduceat(a, self.starts, axis=0)

    def base(self, phi):
        if self.family is Family.GAUSSIAN:
            return -0.5 * self.sizes * (_LOG_2PI + math.log(phi))
        return self._base

    def unpack(self, theta):
        beta = theta[: self.p]
        sigma_sq = math.exp(theta[self.p])
        phi = math.exp(theta[self.p + 1]) if self.family is Family.GAUSSIAN else 1.0
        return beta, sigma_sq, phi


def _find_modes(st: _Stacked, eta, sigma_sq, phi, b, ctrl: MarginalControl):
    """Per-cluster mode of the log integrand in b, by damped Newton."""
    fam = st.family
    for _ in range(ctrl.mode_max_iter):
        mu = fam.inverse_link(eta + b[st.index])
        grad = st.segsum(st.y - mu) / phi - b / sigma_sq
        curv = st.segsum(fam.variance(mu)) / phi + 1.0 / sigma_sq
        step = np.clip(grad / curv, -2.0, 2.0)
        b = b + step
        if not np.all(np.isfinite(b)):
            break
        if np.max(np.abs(step)) < ctrl.mode_tol * (1.0 + np.max(np.abs(b))):
            mu = fam.inverse_link(eta + b[st.index])
            curv = st.segsum(fam.variance(mu)) / phi + 1.0 / sigma_sq
            return b, curv
    raise QuadratureModeFailure("inner mode search for the random intercepts did not converge")


def _evaluate(st: _Stacked, theta, ctrl: MarginalControl, b_start=None, derivatives=True):
    """Marginal log-likelihood (per cluster) and, optionally, its score and Hessian."""
    if st.family is Family.POISSON and not ctrl.generic:
        return _evaluate_poisson(st, theta, ctrl, b_start, derivatives)
    return _evaluate_generic(st, theta, ctrl, b_start, derivatives)


def _evaluate_poisson(st: _Stacked, theta, ctrl: MarginalControl, b_start=None, derivatives=True):
    """Poisson/log fast path.

    With a log link the cluster kernel at intercept shift ``b`` is
    ``sum(y*eta) + b*sum(y) - exp(b)*sum(exp(eta))``, so everything the
    quadrature needs reduces to per-cluster sums computed once per theta.
    """
    beta, sigma_sq, _ = st.unpack(theta)
    X = st.X
    eta = X @ beta
    e = np.exp(eta)
    y_sum = st.y_sum
    m = st.segsum(e)
    a = st.segsum(st.y * eta)

    b = np.zeros(st.K) if b_start is None else b_start
    for _ in range(ctrl.mode_max_iter):
        eb = np.exp(b) * m
        step = np.clip((y_sum - eb - b / sigma_sq) / (eb + 1.0 / sigma_sq), -2.0, 2.0)
        b = b + step
        if not np.all(np.isfinite(b)):
            raise QuadratureModeFailure("inner mode search for the random intercepts diverged")
        if np.max(np.abs(step)) < ctrl.mode_tol * (1.0 + np.max(np.abs(b))):
            break
    else:
        raise QuadratureModeFailure("inner mode search for the random intercepts did not converge")
    curv = np.exp(b) * m + 1.0 / sigma_sq

    t, log_w = _hermite(ctrl.nodes)
    scale = 1.0 / np.sqrt(curv)
    nodes = b[:, None] + _SQRT2 * scale[:, None] * t[None, :]  # (K, Q)
    enodes = np.exp(nodes)
    kernel = a[:, None] + nodes * y_sum[:, None] - enodes * m[:, None]
    log_prior = -0.5 * nodes**2 / sigma_sq - 0.5 * (_LOG_2PI + math.log(sigma_sq))
    terms = _agh_log_terms(kernel + log_prior, log_w, scale)
    norm = logsumexp(terms, axis=1, keepdims=True)
    per_cluster = norm[:, 0] + st.base(1.0)
    if not derivatives:
        return per_cluster, b

    post = np.exp(terms - norm)
    xm = st.segsum(X * e[:, None])  # (K, p)
    xxm = st.segsum(X[:, :, None] * X[:, None, :] * e[:, None, None])  # (K, p, p)
    s_beta = st.xy[:, None, :] - enodes[:, :, None] * xm[:, None, :]
    s_tau = 0.5 * nodes**2 / sigma_sq - 0.5
    s = np.concatenate([s_beta, s_tau[:, :, None]], axis=2)
    mean_s = np.einsum("kq,kqd->kd", post, s)
    score = mean_s.sum(axis=0)
    p = st.p
    hessian = np.einsum("kq,kqd,kqe->de", post, s, s) - mean_s.T @ mean_s
    hessian[:p, :p] -= np.einsum("k,kpq->pq", np.sum(post * enodes, axis=1), xxm)
    hessian[p, p] -= np.sum(post * 0.5 * nodes**2 / sigma_sq)
    return per_cluster, b, score, 0.5 * (hessian + hessian.T)


def _evaluate_generic(st: _Stacked, theta, ctrl: MarginalControl, b_start=None, derivatives=True):
    fam = st.family
    beta, sigma_sq, phi = st.unpack(theta)
    eta = st.X @ beta
    b0 = np.zeros(st.K) if b_start is None else b_start
    b_hat, curv = _find_modes(st, eta, sigma_sq, phi, b0, ctrl)

    t, log_w = _hermite(ctrl.nodes)
    scale = 1.0 / np.sqrt(curv)
    nodes = b_hat[:, None] + _SQRT2 * scale[:, None] * t[None, :]  # (K, Q)
    eta_q = eta[:, None] + nodes[st.index]  # (N, Q)
    mu_q = fam.inverse_link(eta_q)
    if fam is Family.POISSON:
        kernel = st.segsum(st.y[:, None] * eta_q - mu_q)
    else:
        kernel = st.segsum(fam.log_kernel(st.y[:, None], eta_q, phi))
    log_prior = -0.5 * nodes**2 / sigma_sq - 0.5 * (_LOG_2PI + math.log(sigma_sq))
    terms = _agh_log_terms(kernel + log_prior, log_w, scale)
    per_cluster = logsumexp(terms, axis=1) + st.base(phi)
    if not derivatives:
        return per_cluster, b_hat

    post = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))  # (K, Q)
    post_obs = post[st.index]  # (N, Q)
    resid_q = st.y[:, None] - mu_q

    # complete-data scores at every node: (K, Q, d)
    s_beta = st.segsum(resid_q[:, :, None] * st.X[:, None, :]) / phi
    s_tau = 0.5 * nodes**2 / sigma_sq - 0.5
    parts = [s_beta, s_tau[:, :, None]]
    gaussian = fam is Family.GAUSSIAN
    if gaussian:
        rss_q = st.segsum(resid_q**2)
        s_psi = 0.5 * rss_q / phi - 0.5 * st.sizes[:, None]
        parts.append(s_psi[:, :, None])
    s = np.concatenate(parts, axis=2)
    mean_s = np.einsum("kq,kqd->kd", post, s)
    score = mean_s.sum(axis=0)

    d = s.shape[2]
    p = st.p
    cov = np.einsum("kq,kqd,kqe->de", post, s, s) - mean_s.T @ mean_s
    expected = np.zeros((d, d))
    v_bar = np.sum(post_obs * fam.variance(mu_q), axis=1)
    expected[:p, :p] = -(st.X.T * v_bar) @ st.X / phi
    expected[p, p] = -np.sum(post * 0.5 * nodes**2 / sigma_sq)
    if gaussian:
        r_bar = np.sum(post_obs * resid_q, axis=1)
        cross = -(st.X.T @ r_bar) / phi
        expected[:p, p + 1] = cross
        expected[p + 1, :p] = cross
        expected[p + 1, p + 1] = -np.sum(post * 0.5 * rss_q / phi)
    hessian = expected + cov
    return per_cluster, b_hat, score, 0.5 * (hessian + hessian.T)


# --------------------------------------------------------------------- #
# public likelihood API
# --------------------------------------------------------------------- #


def _theta(st: _Stacked, beta, sigma0_sq, dispersion):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (st.p,):
        raise ValueError(f"beta has shape {beta.shape}, model needs ({st.p},)")
    extra = [math.log(dispersion)] if st.family is Family.GAUSSIAN else []
    return np.concatenate([beta, [math.log(sigma0_sq)], extra])


def marginal_loglik(
    data: Sequence[ClusterData],
    model: ModelSpec,
    beta,
    sigma0_sq: float,
    nodes: int = 15,
    dispersion: float = 1.0,
    per_cluster: bool = False,
):
    """Random-intercept marginal log-likelihood, summed over clusters.

    ``dispersion`` is the residual variance and is only used by the
    Gaussian family. ``sigma0_sq = 0`` gives the pooled GLM likelihood.
    """
    if sigma0_sq < 0:
        raise ValueError("sigma0_sq must be non-negative")
    if nodes < 1:
        raise ValueError("need at least one quadrature node")
    if dispersion <= 0:
        raise ValueError("dispersion must be positive")
    st = _Stacked(data, model)
    if sigma0_sq == 0.0:
        beta = np.asarray(beta, dtype=float)
        ll = st.family.logpdf(st.y, st.X @ beta, dispersion)
        out = st.segsum(ll)
    else:
        out, _ = _evaluate(st, _theta(st, beta, sigma0_sq, dispersion), MarginalControl(nodes=nodes), derivatives=False)
    return out if per_cluster else float(np.sum(out))


def marginal_score(
    data: Sequence[ClusterData],
    model: ModelSpec,
    beta,
    sigma0_sq: float,
    nodes: int = 15,
    dispersion: float = 1.0,
) -> np.ndarray:
    """Gradient of :func:`marginal_loglik` in ``(beta, log sigma0_sq[, log dispersion])``."""
    if sigma0_sq <= 0:
        raise ValueError("the score is taken on the log-variance scale; sigma0_sq must be positive")
    st = _Stacked(data, model)
    _, _, g, _ = _evaluate(st, _theta(st, beta, sigma0_sq, dispersion), MarginalControl(nodes=nodes))
    return g


# --------------------------------------------------------------------- #
# maximum likelihood
# --------------------------------------------------------------------- #


def _pooled_fit(st: _Stacked, ctrl: MarginalControl):
    beta, ll, _, phi, _, diverged, _ = _irls(st.y[None, :], st.X[None, :, :], st.family, ctrl.glm)
    return beta[0], float(ll[0]), float(phi[0]), bool(diverged[0])


def _newton_direction(grad, hessian):
    vals, vecs = np.linalg.eigh(-hessian)
    floor = 1e-8 * max(1.0, float(np.max(np.abs(vals))))
    vals = np.maximum(np.abs(vals), floor)
    return vecs @ ((vecs.T @ grad) / vals)


def fit_marginal(
    data: Sequence[ClusterData],
    model: ModelSpec,
    ctrl: MarginalControl | None = None,
) -> MarginalFit:
    """Maximum-likelihood fit of the random-intercept GLMM.

    The search starts from the pooled GLM, then takes safeguarded Newton
    steps on ``(beta, log sigma0^2)``. If the variance heads to zero the
    boundary model (``sigma0^2 = 0``, pooled GLM coefficients) is returned
    and flagged. The returned fit never has a lower likelihood than that
    boundary model.
    """
    ctrl = ctrl or MarginalControl()
    st = _Stacked(data, model)
    fam = st.family
    pooled_beta, pooled_ll, pooled_phi, pooled_bad = _pooled_fit(st, ctrl)
    n_params = st.p + 1 + (1 if fam is Family.GAUSSIAN else 0)

    # one-step per-cluster intercept shifts give a moment start for sigma0^2
    eta0 = st.X @ pooled_beta
    mu0 = fam.inverse_link(eta0)
    info = st.segsum(fam.variance(mu0)) / pooled_phi
    shift = st.segsum(st.y - mu0) / pooled_phi / info
    sigma_start = float(np.clip(np.var(shift) - np.mean(1.0 / info), 0.01, 4.0))
    theta = np.concatenate([pooled_beta, [math.log(sigma_start)]])
    if fam is Family.GAUSSIAN:
        theta = np.append(theta, math.log(max(pooled_phi, 1e-12)))

    log_floor = math.log(ctrl.boundary)
    converged = False
    hit_boundary = False
    iterations = 0
    per, b_hat, grad, hess = _evaluate(st, theta, ctrl)
    value = float(np.sum(per))
    for iterations in range(1, ctrl.max_iter + 1):
        direction = _newton_direction(grad, hess)
        if 0.5 * float(grad @ direction) < ctrl.tol * (1.0 + abs(value)):
            converged = True
            break
        step = 1.0
        accepted = False
        for _ in range(40):
            trial = theta + step * direction
            trial[st.p] = max(trial[st.p], log_floor - 2.0)
            try:
                t_per, t_b, t_grad, t_hess = _evaluate(st, trial, ctrl, b_hat)
            except QuadratureModeFailure:
                t_per = None
            if t_per is not None and np.isfinite(np.sum(t_per)) and np.sum(t_per) >= value - 1e-12 * abs(value):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        gain = float(np.sum(t_per)) - value
        theta, per, b_hat, grad, hess = trial, t_per, t_b, t_grad, t_hess
        value = float(np.sum(per))
        if theta[st.p] < log_floor:
            hit_boundary = True
            break
        if abs(gain) < 1e-14 * (1.0 + abs(value)) and np.max(np.abs(step * direction)) < 1e-10:
            converged = True
            break

    beta, sigma_sq, phi = st.unpack(theta)
    if not pooled_bad and (hit_boundary or pooled_ll >= value):
        beta, sigma_sq, phi, value = pooled_beta, 0.0, pooled_phi, pooled_ll
        hit_boundary = True
        converged = True
    beta = np.array(beta)
    beta.setflags(write=False)
    return MarginalFit(
        model=model,
        beta_hat=beta,
        sigma0_sq_hat=sigma_sq,
        marginal_loglik=value,
        mAIC=-2.0 * value + 2.0 * n_params,
        quadrature_nodes=ctrl.nodes,
        converged=converged,
        boundary=hit_boundary,
        iterations=iterations,
        dispersion=phi,
    )


def maic_select(
    data: Sequence[ClusterData],
    models: Sequence[ModelSpec],
    ctrl: MarginalControl | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Score each model by the random-intercept marginal AIC."""
    if not models:
        raise ValueError("no models to compare")
    ctrl = ctrl or MarginalControl()

    def run(model):
        try:
            return fit_marginal(data, model, ctrl)
        except QuadratureModeFailure as exc:
            return exc

    if workers > 1 and len(models) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(run, models))
    else:
        fits = [run(m) for m in models]

    scores = []
    for model, fit in zip(models, fits):
        if isinstance(fit, Exception):
            scores.append(ModelScore(model, math.inf, None, failures={"all": str(fit)}))
            continue
        scores.append(
            ModelScore(
                model,
                fit.mAIC,
                None,
                n_nonconverged=0 if fit.converged else 1,
                extra={"sigma0_sq": fit.sigma0_sq_hat, "boundary": fit.boundary, "fit": fit},
            )
        )
    return SelectionReport(
        per_model=scores,
        best=choose_best(scores),
        criterion="mAIC-RI",
        K=len(data),
        cluster_ids=[c.cluster_id for c in data],
    )
