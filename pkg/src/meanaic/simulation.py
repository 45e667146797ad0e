"""
Simulation study: clustered Poisson data with a random intercept and slope.

Cluster ``i`` has log mean ``0.3 + b0_i + (beta1 + b1_i) * x1`` with
``x1 ~ Bernoulli(0.5)`` and a decoy ``x2 ~ Uniform(0, 1)`` that never enters
the mean. Each replicate is scored over the four submodels of ``{x1, x2}``
and a criterion is correct when it picks ``{x1}``.

Random numbers come from Philox streams keyed by
``(base_seed, replicate, cluster)``, so any replicate can be regenerated
on its own and the worker count never changes the draws.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .criterion import ModelSpec, enumerate_models, select
from .exceptions import MeanAICError
from .glm import ClusterData, Family
from .marginal import MarginalControl, maic_select

log = logging.getLogger(__name__)

__all__ = [
    "RE_LAWS",
    "CRITERIA",
    "Scenario",
    "SimReport",
    "draw_random_effect",
    "cluster_rng",
    "generate_dataset",
    "run_replicate",
    "run_scenario",
    "lattice",
]

RE_LAWS = ("normal", "gamma", "t")
CRITERIA = ("meanAIC", "mAIC-RI", "GIC")
GAMMA_SHAPE = 4.0
T_DF = 3.0
INTERCEPT = 0.3

_LAW_ALIASES = {
    "normal": "normal",
    "gaussian": "normal",
    "gamma": "gamma",
    "shifted-gamma": "gamma",
    "shifted_gamma": "gamma",
    "t": "t",
    "student-t": "t",
    "student_t": "t",
}
_CRITERION_ALIASES = {
    "meanaic": "meanAIC",
    "maic": "mAIC-RI",
    "maic-ri": "mAIC-RI",
    "gic": "GIC",
}


def parse_law(name: str) -> str:
    try:
        return _LAW_ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown random-effect law {name!r}; use one of {RE_LAWS}") from None


def parse_criterion(name: str) -> str:
    key = str(name).strip()
    if key in CRITERIA:
        return key
    try:
        return _CRITERION_ALIASES[key.lower()]
    except KeyError:
        raise ValueError(f"unknown criterion {name!r}; use one of {CRITERIA}") from None


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration.

    ``cluster_sizes`` holds one value for fixed-size clusters, or several
    values from which each cluster's size is drawn uniformly.
    """

    K: int = 20
    cluster_sizes: tuple[int, ...] = (80,)
    beta1: float = 0.2
    sigma0_sq: float = 0.005
    sigma1_sq: float = 0.005
    re_law: str = "normal"
    replicates: int = 500
    base_seed: int = 0

    def __post_init__(self):
        sizes = self.cluster_sizes
        if isinstance(sizes, (int, np.integer)):
            sizes = (sizes,)
        object.__setattr__(self, "cluster_sizes", tuple(int(n) for n in sizes))
        object.__setattr__(self, "re_law", parse_law(self.re_law))
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not self.cluster_sizes or min(self.cluster_sizes) < 1:
            raise ValueError("cluster sizes must be positive")
        if self.sigma0_sq < 0 or self.sigma1_sq < 0:
            raise ValueError("random-effect variances must be non-negative")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")

    @property
    def size_label(self) -> str:
        if len(self.cluster_sizes) == 1:
            return str(self.cluster_sizes[0])
        return "{" + ",".join(str(n) for n in self.cluster_sizes) + "}"


@dataclass
class SimReport:
    scenario: Scenario
    criteria: tuple[str, ...]
    models: list[ModelSpec]
    proportion_correct: dict[str, float]
    selection_histogram: dict[str, dict[str, int]]
    failures: dict[str, int]
    per_replicate_log: list[dict] | None = None
    wall_time: float = 0.0
    gic_lambda: float | None = None

    def standard_error(self, criterion: str) -> float:
        p = self.proportion_correct[criterion]
        return math.sqrt(p * (1.0 - p) / self.scenario.replicates)


def draw_random_effect(law: str, variance: float, rng: np.random.Generator, size=None):
    """Mean-zero random effect with the given variance.

    ``gamma`` is Gamma(shape 4, scale theta) - 4 theta with theta = sd/2;
    ``t`` is a t(3) draw times sd/sqrt(3).
    """
    law = parse_law(law)
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if variance == 0:
        return 0.0 if size is None else np.zeros(size)
    sd = math.sqrt(variance)
    if law == "normal":
        return rng.normal(0.0, sd, size)
    if law == "gamma":
        theta = sd / math.sqrt(GAMMA_SHAPE)
        return rng.gamma(GAMMA_SHAPE, theta, size) - GAMMA_SHAPE * theta
    return rng.standard_t(T_DF, size) * sd / math.sqrt(T_DF / (T_DF - 2.0))


def cluster_rng(base_seed: int, replicate: int, cluster: int) -> np.random.Generator:
    seq = np.random.SeedSequence(base_seed, spawn_key=(replicate, cluster))
    return np.random.Generator(np.random.Philox(seq))


def generate_dataset(s: Scenario, replicate_index: int) -> list[ClusterData]:
    """Draw one replicate. Columns of ``X`` are ``[1, x1, x2]``."""
    clusters = []
    for i in range(s.K):
        rng = cluster_rng(s.base_seed, replicate_index, i)
        b0 = draw_random_effect(s.re_law, s.sigma0_sq, rng)
        b1 = draw_random_effect(s.re_law, s.sigma1_sq, rng)
        n = s.cluster_sizes[0] if len(s.cluster_sizes) == 1 else int(rng.choice(s.cluster_sizes))
        x1 = rng.binomial(1, 0.5, n).astype(float)
        x2 = rng.uniform(0.0, 1.0, n)
        y = rng.poisson(np.exp(INTERCEPT + b0 + (s.beta1 + b1) * x1))
        clusters.append(ClusterData(i, y, np.column_stack([np.ones(n), x1, x2])))
    return clusters


def lattice() -> list[ModelSpec]:
    return enumerate_models([1, 2], family=Family.POISSON)


TRUE_MODEL = ModelSpec((1,), Family.POISSON)


def run_replicate(
    s: Scenario,
    replicate_index: int,
    criteria: Sequence[str] = ("meanAIC", "mAIC-RI"),
    gic_lambda: float | None = None,
    marginal_ctrl: MarginalControl | None = None,
) -> dict:
    """Generate and score one replicate; returns a log record."""
    data = generate_dataset(s, replicate_index)
    models = lattice()
    record: dict = {"replicate": replicate_index, "winner": {}, "values": {}, "errors": {}}
    for crit in criteria:
        try:
            if crit == "meanAIC":
                report = select(data, models)
            elif crit == "GIC":
                report = select(data, models, penalty=gic_lambda)
            else:
                report = maic_select(data, models, marginal_ctrl)
        except (MeanAICError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, %s failed: %s", replicate_index, crit, exc)
            record["winner"][crit] = None
            record["errors"][crit] = f"{type(exc).__name__}: {exc}"
            continue
        record["winner"][crit] = report.best_model.label
        record["values"][crit] = [float(v) for v in report.values]
        if getattr(report, "dropped", None):
            record.setdefault("dropped", {})[crit] = len(report.dropped)
    return record


def _run_chunk(args):
    s, indices, criteria, gic_lambda, marginal_ctrl = args
    return [run_replicate(s, r, criteria, gic_lambda, marginal_ctrl) for r in indices]


def run_scenario(
    s: Scenario,
    criteria: Sequence[str] = ("meanAIC", "mAIC-RI"),
    workers: int = 1,
    gic_lambda: float | None = None,
    keep_log: bool = False,
    marginal_ctrl: MarginalControl | None = None,
) -> SimReport:
    """Run every replicate of ``s`` and tabulate how often each criterion is right.

    Replicates are distributed over ``workers`` processes; results are
    reduced in replicate order, so the report is identical for any
    worker count.
    """
    criteria = tuple(parse_criterion(c) for c in criteria)
    if not criteria:
        raise ValueError("no criteria requested")
    if "GIC" in criteria and gic_lambda is None:
        raise ValueError("the GIC criterion needs gic_lambda")
    start = time.perf_counter()
    indices = list(range(s.replicates))
    if workers > 1 and s.replicates > 1:
        n_chunks = min(s.replicates, 4 * workers)
        chunks = [indices[k::n_chunks] for k in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_run_chunk, [(s, c, criteria, gic_lambda, marginal_ctrl) for c in chunks])
            records = sorted((r for part in parts for r in part), key=lambda r: r["replicate"])
    else:
        records = _run_chunk((s, indices, criteria, gic_lambda, marginal_ctrl))

    models = lattice()
    labels = [m.label for m in models]
    histogram = {c: {label: 0 for label in labels} | {"failed": 0} for c in criteria}
    failures = {c: 0 for c in criteria}
    for rec in records:
        for c in criteria:
            winner = rec["winner"][c]
            if winner is None:
                histogram[c]["failed"] += 1
                failures[c] += 1
            else:
                histogram[c][winner] += 1
    proportions = {c: histogram[c][TRUE_MODEL.label] / s.replicates for c in criteria}
    return SimReport(
        scenario=s,
        criteria=criteria,
        models=models,
        proportion_correct=proportions,
        selection_histogram=histogram,
        failures=failures,
        per_replicate_log=records if keep_log else None,
        wall_time=time.perf_counter() - start,
        gic_lambda=gic_lambda,
    )


def expand_grid(base: Scenario, sigma0_values: Sequence[float], sigma1_values: Sequence[float]) -> list[Scenario]:
    """Cross product of intercept and slope variances, sigma0^2 varying slowest."""
    return [replace(base, sigma0_sq=float(a), sigma1_sq=float(b)) for a in sigma0_values for b in sigma1_values]
