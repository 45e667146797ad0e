"""Reading clustered datasets and scenario files; writing reports."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .criterion import SelectionReport
from .exceptions import ConfigError, InvalidResponse, MissingColumn, ParseError
from .glm import ClusterData, Family
from .simulation import Scenario, SimReport, parse_criterion, parse_law

__all__ = [
    "DatasetSchema",
    "load_clusters",
    "cluster_row_counts",
    "write_clusters",
    "write_selection_report",
    "format_ranking",
    "load_scenario_config",
    "write_sim_reports",
    "format_sim_table",
]


@dataclass(frozen=True)
class DatasetSchema:
    cluster_column: str
    response_column: str
    covariate_columns: tuple[str, ...]
    family: Family = Family.POISSON

    def __post_init__(self):
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        object.__setattr__(self, "family", Family.parse(self.family))
        names = [self.cluster_column, self.response_column, *self.covariate_columns]
        dupes = [n for n, k in Counter(names).items() if k > 1]
        if dupes:
            raise ValueError(f"columns used more than once: {dupes}")


def _delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def _parse_response(text: str, family: Family, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InvalidResponse(f"response {text!r} is not a number", line) from None
    if family.invalid_responses(np.array([value]))[0]:
        expected = {
            Family.POISSON: "a non-negative integer count",
            Family.BERNOULLI: "0 or 1",
            Family.GAUSSIAN: "a finite number",
        }[family]
        raise InvalidResponse(f"response {text!r} is not {expected}", line)
    return value


def load_clusters(path, schema: DatasetSchema) -> list[ClusterData]:
    """Read a comma- or tab-delimited file and group rows into clusters.

    Clusters appear in order of first occurrence; rows keep file order
    within a cluster. Line numbers in errors count the header as line 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ParseError("missing header row", 1)
        delim = _delimiter(header_line)
        header = next(csv.reader([header_line], delimiter=delim))
        header = [h.strip() for h in header]
        position = {name: k for k, name in enumerate(header)}
        wanted = [schema.cluster_column, schema.response_column, *schema.covariate_columns]
        missing = [c for c in wanted if c not in position]
        if missing:
            raise MissingColumn(f"column(s) {missing} not in header {header}", 1)
        ci, yi = position[schema.cluster_column], position[schema.response_column]
        xi = [position[c] for c in schema.covariate_columns]

        groups: dict[str, tuple[list, list]] = {}
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
            label = row[ci].strip()
            y = _parse_response(row[yi].strip(), schema.family, lineno)
            try:
                x = [float(row[k]) for k in xi]
            except ValueError:
                raise ParseError("non-numeric covariate value", lineno) from None
            if not all(math.isfinite(v) for v in x):
                raise ParseError("non-finite covariate value", lineno)
            ys, xs = groups.setdefault(label, ([], []))
            ys.append(y)
            xs.append([1.0, *x])
    if not groups:
        raise ParseError("no data rows", 2)
    return [ClusterData(label, np.array(ys), np.array(xs).reshape(len(ys), -1)) for label, (ys, xs) in groups.items()]


def cluster_row_counts(clusters: Sequence[ClusterData]) -> dict:
    return {c.cluster_id: c.n for c in clusters}


def _fmt(value: float) -> str:
    """Shortest round-tripping text for a float; integers without a decimal point."""
    if float(value).is_integer() and abs(value) < 2**53:
        return str(int(value))
    return repr(float(value))


def write_clusters(
    path,
    clusters: Sequence[ClusterData],
    covariate_names: Sequence[str] | None = None,
    cluster_column: str = "cluster",
    response_column: str = "y",
) -> None:
    r = clusters[0].n_covariates
    names = list(covariate_names) if covariate_names else [f"x{k}" for k in range(1, r + 1)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cluster_column, response_column, *names])
        for c in clusters:
            for j in range(c.n):
                w.writerow([c.cluster_id, _fmt(c.y[j]), *(repr(float(v)) for v in c.X[j, 1:])])


# --------------------------------------------------------------------- #
# selection reports
# --------------------------------------------------------------------- #


def _aligned(rows: list[list[str]], right: set[int]) -> str:
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [c.rjust(w) if k in right else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_ranking(report: SelectionReport) -> str:
    """Human-readable ranking; criterion values at two decimals, best starred."""
    best_value = report.per_model[report.best].value
    rows = [["rank", "model", report.criterion, "delta", ""]]
    for rank, i in enumerate(report.ranking(), start=1):
        s = report.per_model[i]
        rows.append(
            [
                str(rank),
                s.model.label,
                f"{s.value:.2f}" if math.isfinite(s.value) else "failed",
                f"{s.value - best_value:.2f}" if math.isfinite(s.value) else "",
                "*" if i == report.best else "",
            ]
        )
    return _aligned(rows, right={0, 2, 3})


def write_selection_report(report: SelectionReport, out_dir) -> dict[str, Path]:
    """Write ``ranking.txt``, ``ranking.csv`` and (for meanAIC-type criteria) ``cluster_aic.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ranking_txt": out / "ranking.txt", "ranking_csv": out / "ranking.csv"}
    paths["ranking_txt"].write_text(format_ranking(report), encoding="utf-8")

    best_value = report.per_model[report.best].value
    with paths["ranking_csv"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "model", "criterion", "value", "delta", "best", "n_nonconverged", "n_failed"])
        for rank, i in enumerate(report.ranking(), start=1):
            s = report.per_model[i]
            w.writerow(
                [
                    rank,
                    s.model.label,
                    report.criterion,
                    repr(float(s.value)),
                    repr(float(s.value - best_value)),
                    int(i == report.best),
                    s.n_nonconverged,
                    len(s.failures),
                ]
            )

    if all(s.cluster_aic is not None for s in report.per_model):
        paths["cluster_aic"] = out / "cluster_aic.csv"
        dropped = set(report.dropped)
        with paths["cluster_aic"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster", "used", *(s.model.label for s in report.per_model)])
            for k, cid in enumerate(report.cluster_ids):
                vals = [repr(float(s.cluster_aic[k])) if np.isfinite(s.cluster_aic[k]) else "" for s in report.per_model]
                w.writerow([cid, int(cid not in dropped), *vals])
    return paths


# --------------------------------------------------------------------- #
# scenario configuration
# --------------------------------------------------------------------- #

_SCENARIO_KEYS = {
    "K",
    "cluster_sizes",
    "beta1",
    "sigma0_sq",
    "sigma1_sq",
    "re_law",
    "replicates",
    "base_seed",
    "criteria",
    "gic_lambda",
}


def _number(value, key, kind=float, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", key)
    if kind is int and not float(value).is_integer():
        raise ConfigError(f"expected an integer, got {value!r}", key)
    value = kind(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}", key)
    return value


def _number_list(value, key, kind=float, minimum=None) -> list:
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError("empty list", key)
    return [_number(v, f"{key}[{k}]" if isinstance(value, list) else key, kind, minimum) for k, v in enumerate(items)]


def load_scenario_config(path) -> dict[str, Any]:
    """Parse and validate a YAML scenario file.

    Variances may be lists (for grid runs). Returns a normalized dict with
    ``sigma0_sq``/``sigma1_sq`` as lists and everything else scalar.
    """
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    return normalize_config(raw)


def normalize_config(raw: dict) -> dict[str, Any]:
    unknown = sorted(set(raw) - _SCENARIO_KEYS)
    if unknown:
        raise ConfigError(f"unknown key (allowed: {sorted(_SCENARIO_KEYS)})", unknown[0])
    defaults = Scenario()
    cfg: dict[str, Any] = {}
    cfg["K"] = _number(raw.get("K", defaults.K), "K", int, 1)
    cfg["cluster_sizes"] = tuple(_number_list(raw.get("cluster_sizes", list(defaults.cluster_sizes)), "cluster_sizes", int, 1))
    cfg["beta1"] = _number(raw.get("beta1", defaults.beta1), "beta1")
    cfg["sigma0_sq"] = _number_list(raw.get("sigma0_sq", defaults.sigma0_sq), "sigma0_sq", float, 0.0)
    cfg["sigma1_sq"] = _number_list(raw.get("sigma1_sq", defaults.sigma1_sq), "sigma1_sq", float, 0.0)
    try:
        cfg["re_law"] = parse_law(raw.get("re_law", defaults.re_law))
    except ValueError as exc:
        raise ConfigError(str(exc), "re_law") from None
    cfg["replicates"] = _number(raw.get("replicates", defaults.replicates), "replicates", int, 1)
    cfg["base_seed"] = _number(raw.get("base_seed", defaults.base_seed), "base_seed", int, 0)
    crit = raw.get("criteria", ["meanAIC", "mAIC-RI"])
    if isinstance(crit, str):
        crit = [c for c in crit.split(",") if c.strip()]
    if not isinstance(crit, list) or not crit:
        raise ConfigError("expected a non-empty list of criteria", "criteria")
    parsed = []
    for k, c in enumerate(crit):
        try:
            parsed.append(parse_criterion(c))
        except ValueError as exc:
            raise ConfigError(str(exc), f"criteria[{k}]") from None
    cfg["criteria"] = parsed
    lam = raw.get("gic_lambda")
    cfg["gic_lambda"] = None if lam is None else _number(lam, "gic_lambda", float, 0.0)
    if "GIC" in parsed and cfg["gic_lambda"] is None:
        raise ConfigError("the GIC criterion needs gic_lambda", "gic_lambda")
    return cfg


# --------------------------------------------------------------------- #
# simulation reports
# --------------------------------------------------------------------- #


def _sim_columns(reports: Sequence[SimReport]) -> list[str]:
    crits: list[str] = []
    for r in reports:
        for c in r.criteria:
            if c not in crits:
                crits.append(c)
    return crits


def format_sim_table(reports: Sequence[SimReport]) -> str:
    crits = _sim_columns(reports)
    rows = [["n_i", "law", "beta1", "sigma0^2", "sigma1^2", *crits]]
    for r in reports:
        s = r.scenario
        rows.append(
            [
                s.size_label,
                s.re_law,
                f"{s.beta1:g}",
                f"{s.sigma0_sq:g}",
                f"{s.sigma1_sq:g}",
                *(f"{r.proportion_correct[c]:.3f}" if c in r.proportion_correct else "" for c in crits),
            ]
        )
    return _aligned(rows, right=set(range(2, len(rows[0]))))


def write_sim_reports(reports: Sequence[SimReport], out_dir, metadata: dict | None = None) -> dict[str, Path]:
    """Write ``table.txt``, ``table.csv``, ``histogram.csv`` and ``metadata.json``.

    Only ``metadata.json`` carries timings and timestamps; the other files
    depend on the inputs alone.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table_txt": out / "table.txt",
        "table_csv": out / "table.csv",
        "histogram_csv": out / "histogram.csv",
        "metadata": out / "metadata.json",
    }
    paths["table_txt"].write_text(format_sim_table(reports), encoding="utf-8")
    crits = _sim_columns(reports)
    with paths["table_csv"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "cluster_sizes", "re_law", "beta1", "sigma0_sq", "sigma1_sq", "replicates", "base_seed", *crits, *(f"{c}_failed" for c in crits)])
        for r in reports:
            s = r.scenario
            w.writerow(
                [
                    s.K,
                    " ".join(str(n) for n in s.cluster_sizes),
                    s.re_law,
                    repr(s.beta1),
                    repr(s.sigma0_sq),
                    repr(s.sigma1_sq),
                    s.replicates,
                    s.base_seed,
                    *(repr(r.proportion_correct[c]) if c in r.proportion_correct else "" for c in crits),
                    *(r.failures.get(c, "") for c in crits),
                ]
            )
    with paths["histogram_csv"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma0_sq", "sigma1_sq", "criterion", "model", "count"])
        for r in reports:
            for c in r.criteria:
                for label, count in r.selection_histogram[c].items():
                    w.writerow([repr(r.scenario.sigma0_sq), repr(r.scenario.sigma1_sq), c, label, count])
    meta = dict(metadata or {})
    meta["wall_time_seconds"] = [r.wall_time for r in reports]
    paths["metadata"].write_text(json.dumps(meta, indent=2, default=str) + "\n", encoding="utf-8")
    return paths
