"""
Covariate selection by meanAIC: the average of cluster-level GLM AICs.

Every candidate model is fitted separately in each cluster; the cluster
AICs are averaged with equal weights and the model with the smallest
average wins. No random-effect structure has to be specified.
"""

from __future__ import annotations

import enum
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import AllClustersSkipped, FitError, LatticeTooLarge
from .glm import ClusterData, ClusterFit, Family, FitControl, fit_clusters

__all__ = [
    "ModelSpec",
    "SkipPolicy",
    "ModelScore",
    "SelectionReport",
    "enumerate_models",
    "mean_aic",
    "generalized_ic",
    "select",
    "MAX_CANDIDATES",
    "TIE_RTOL",
]

MAX_CANDIDATES = 20
# criterion values closer than this (relative) count as a tie
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class ModelSpec:
    """A fixed-effect covariate subset. The intercept is always included.

    Two specs with the same active set and family compare equal whatever
    their labels.
    """

    active_columns: tuple[int, ...]
    family: Family = Family.POISSON
    label: str = field(default="", compare=False)

    def __post_init__(self):
        cols = tuple(int(c) for c in self.active_columns)
        if any(c < 1 for c in cols):
            raise ValueError("covariate columns are numbered from 1 (0 is the intercept)")
        if len(set(cols)) != len(cols):
            raise ValueError(f"duplicate covariate columns in {cols}")
        object.__setattr__(self, "active_columns", tuple(sorted(cols)))
        object.__setattr__(self, "family", Family.parse(self.family))
        if not self.label:
            object.__setattr__(self, "label", self.describe())

    @property
    def n_coefficients(self) -> int:
        return len(self.active_columns) + 1

    @property
    def n_params(self) -> int:
        return self.n_coefficients + (1 if self.family.profiles_dispersion else 0)

    def describe(self, names: Sequence[str] | None = None) -> str:
        if not self.active_columns:
            return "(intercept only)"
        if names is None:
            return " + ".join(f"x{c}" for c in self.active_columns)
        return " + ".join(names[c - 1] for c in self.active_columns)


class SkipPolicy(enum.Enum):
    """What to do with clusters whose fit fails under some model."""

    FAIL_FAST = "fail-fast"
    DROP = "drop-cluster-from-all-models"
    IMPUTE_WORST = "impute-worst"

    @classmethod
    def parse(cls, value: "str | SkipPolicy") -> "SkipPolicy":
        if isinstance(value, SkipPolicy):
            return value
        aliases = {"drop": cls.DROP, "fail": cls.FAIL_FAST, "impute": cls.IMPUTE_WORST}
        return aliases.get(value) or cls(value)


def enumerate_models(
    candidates: Iterable[int],
    forced: Iterable[int] = (),
    family: Family | str = Family.POISSON,
    names: Sequence[str] | None = None,
) -> list[ModelSpec]:
    """All subsets of ``candidates``, each joined with ``forced``.

    Ordered by subset size, then lexicographically by candidate columns.

    >>> [m.active_columns for m in enumerate_models([1, 2])]
    [(), (1,), (2,), (1, 2)]
    """
    candidates = sorted(set(int(c) for c in candidates))
    forced = sorted(set(int(c) for c in forced))
    if set(candidates) & set(forced):
        raise ValueError(f"columns {sorted(set(candidates) & set(forced))} are both candidate and forced")
    if len(candidates) > MAX_CANDIDATES:
        raise LatticeTooLarge(f"{len(candidates)} candidates exceed the cap of {MAX_CANDIDATES}")
    family = Family.parse(family)
    models = []
    for size in range(len(candidates) + 1):
        for subset in itertools.combinations(candidates, size):
            spec = ModelSpec(tuple(forced) + subset, family)
            if names is not None:
                spec = ModelSpec(spec.active_columns, family, spec.describe(names))
            models.append(spec)
    return models


def generalized_ic(fits: Sequence[ClusterFit], p_effective: int | None = None, penalty: float = 2.0) -> float:
    """Average over clusters of ``-2 * max_loglik + penalty * p_effective``.

    ``penalty=2`` is meanAIC; ``penalty=log(n)`` gives a BIC-type average.
    """
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    if not fits:
        raise AllClustersSkipped("no cluster fits to average")
    total = 0.0
    for f in fits:
        p = f.n_params if p_effective is None else p_effective
        total += -2.0 * f.max_loglik + penalty * p
    return total / len(fits)


def mean_aic(fits: Sequence[ClusterFit], p_effective: int | None = None) -> float:
    """Equal-weight average of the cluster AICs."""
    return generalized_ic(fits, p_effective, 2.0)


@dataclass
class ModelScore:
    model: ModelSpec
    value: float
    cluster_aic: np.ndarray | None
    n_nonconverged: int = 0
    failures: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass
class SelectionReport:
    """Criterion values for every model and the chosen one.

    ``cluster_aic`` vectors (when present) always have length ``K``; a
    cluster whose fit failed holds NaN there, and clusters left out of the
    averages are listed in ``dropped``.
    """

    per_model: list[ModelScore]
    best: int
    criterion: str
    K: int
    cluster_ids: list
    dropped: list = field(default_factory=list)
    imputed: dict = field(default_factory=dict)

    @property
    def best_model(self) -> ModelSpec:
        return self.per_model[self.best].model

    @property
    def values(self) -> np.ndarray:
        return np.array([m.value for m in self.per_model])

    def ranking(self) -> list[int]:
        """Model indices from best to worst; ``best`` always comes first."""
        rest = sorted((i for i in range(len(self.per_model)) if i != self.best), key=lambda i: _rank_key(self.per_model, i))
        return [self.best, *rest]


def _rank_key(scores: Sequence[ModelScore], i: int):
    v = scores[i].value
    if not math.isfinite(v):
        return (1, math.inf, 0, (), i)
    return (0, v, len(scores[i].model.active_columns), scores[i].model.active_columns, i)


def choose_best(scores: Sequence[ModelScore]) -> int:
    """Index of the minimal criterion value with parsimony tie-breaking.

    Values within ``TIE_RTOL`` of the minimum are ties; among ties the
    model with fewest covariates wins, then the lexicographically smallest
    active set, then the earliest position.
    """
    finite = [i for i, s in enumerate(scores) if math.isfinite(s.value)]
    if not finite:
        raise AllClustersSkipped("no model has a finite criterion value")
    vmin = min(scores[i].value for i in finite)
    tied = [i for i in finite if scores[i].value - vmin <= TIE_RTOL * max(1.0, abs(vmin))]
    return min(tied, key=lambda i: (len(scores[i].model.active_columns), scores[i].model.active_columns, i))


def _fit_all(data, models, ctrl, workers):
    if workers <= 1 or len(models) == 1:
        return [fit_clusters(data, m, ctrl) for m in models]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda m: fit_clusters(data, m, ctrl), models))


def select(
    data: Sequence[ClusterData],
    models: Sequence[ModelSpec],
    ctrl: FitControl | None = None,
    policy: SkipPolicy | str = SkipPolicy.DROP,
    penalty: float = 2.0,
    fixed_params: int | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Score every model by the average cluster-level information criterion.

    Parameters
    ----------
    data : sequence of ClusterData
    models : sequence of ModelSpec
    ctrl : FitControl, optional
    policy : SkipPolicy
        ``DROP`` (default) removes a cluster that failed under any model
        from every model's average. ``IMPUTE_WORST`` gives a failed cluster
        its worst AIC among the models where it was fitted. ``FAIL_FAST``
        re-raises the first failure.
    penalty : float
        Per-parameter penalty; 2 gives meanAIC.
    fixed_params : int, optional
        Use this parameter count for every model instead of each model's
        own dimension (the literal "2(r+1)" penalty of the full model).
    workers : int
        Models are fitted concurrently on this many threads. The reduction
        order is fixed, so results do not depend on it.
    """
    if not models:
        raise ValueError("no models to compare")
    if not data:
        raise ValueError("no clusters")
    ctrl = ctrl or FitControl()
    policy = SkipPolicy.parse(policy)
    K = len(data)
    all_fits = _fit_all(data, models, ctrl, workers)

    failed = np.zeros((len(models), K), dtype=bool)
    aic = np.full((len(models), K), np.nan)
    for m, (model, fits) in enumerate(zip(models, all_fits)):
        p = model.n_params if fixed_params is None else fixed_params
        for i, f in enumerate(fits):
            if isinstance(f, FitError):
                if policy is SkipPolicy.FAIL_FAST:
                    raise f
                failed[m, i] = True
            else:
                aic[m, i] = -2.0 * f.max_loglik + penalty * p

    used = np.ones(K, dtype=bool)
    imputed: dict = {}
    if policy is SkipPolicy.DROP:
        used = ~failed.any(axis=0)
    elif policy is SkipPolicy.IMPUTE_WORST:
        used = ~failed.all(axis=0)
        for i in np.flatnonzero(failed.any(axis=0) & used):
            worst = float(np.nanmax(aic[:, i]))
            imputed[data[i].cluster_id] = worst
    if not used.any():
        raise AllClustersSkipped("every cluster failed under at least one model")

    scores = []
    for m, (model, fits) in enumerate(zip(models, all_fits)):
        vals = aic[m].copy()
        for i in np.flatnonzero(failed[m] & used):
            vals[i] = imputed[data[i].cluster_id]
        total = 0.0
        for i in np.flatnonzero(used):
            total += vals[i]
        scores.append(
            ModelScore(
                model=model,
                value=total / int(used.sum()),
                cluster_aic=aic[m],
                n_nonconverged=sum(1 for f in fits if isinstance(f, ClusterFit) and not f.converged),
                failures={data[i].cluster_id: str(fits[i]) for i in np.flatnonzero(failed[m])},
            )
        )

    name = "meanAIC" if penalty == 2.0 and fixed_params is None else f"GIC(lambda={penalty:g})"
    return SelectionReport(
        per_model=scores,
        best=choose_best(scores),
        criterion=name,
        K=K,
        cluster_ids=[c.cluster_id for c in data],
        dropped=[data[i].cluster_id for i in np.flatnonzero(~used)],
        imputed=imputed,
    )

