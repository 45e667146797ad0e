"""Covariate selection for clustered GLM data by averaged cluster-level AIC."""

from .criterion import (
    ModelSpec,
    SelectionReport,
    SkipPolicy,
    enumerate_models,
    generalized_ic,
    mean_aic,
    select,
)
from .glm import ClusterData, ClusterFit, Family, FitControl, cluster_aic, fit_cluster, fit_clusters, loglik

__version__ = "0.1.0"
