"""Command-line entry point: ``meanaic select`` and ``meanaic simulate``."""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import platform
import sys

from . import __version__
from .criterion import SkipPolicy, enumerate_models, select
from .exceptions import (
    AllClustersSkipped,
    ConfigError,
    DataError,
    DomainError,
    FitError,
    LatticeTooLarge,
)
from .glm import Family
from .io import (
    DatasetSchema,
    format_ranking,
    format_sim_table,
    load_clusters,
    load_scenario_config,
    write_selection_report,
    write_sim_reports,
)
from .marginal import maic_select
from .simulation import Scenario, expand_grid, parse_criterion, run_scenario

log = logging.getLogger("meanaic")

EXIT_OK = 0
EXIT_DATA = 2
EXIT_FIT = 3
THREADS_ENV = "MEANAIC_THREADS"


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def _names(text: str | None) -> list[str]:
    if not text:
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meanaic", description="Covariate selection for clustered GLM data by averaged cluster AICs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    sel = sub.add_parser("select", help="rank all covariate subsets on a dataset")
    sel.add_argument("--data", required=True, help="comma- or tab-delimited file with a header row")
    sel.add_argument("--cluster", required=True, help="cluster label column")
    sel.add_argument("--response", required=True, help="response column")
    sel.add_argument("--family", default="poisson", choices=["poisson", "bernoulli", "gaussian"])
    sel.add_argument("--candidates", required=True, help="comma-separated covariates to select among")
    sel.add_argument("--forced", default="", help="comma-separated covariates kept in every model")
    sel.add_argument("--criterion", default="meanaic", choices=["meanaic", "maic-ri", "gic"])
    sel.add_argument("--lambda", dest="lam", type=float, default=None, help="per-parameter penalty for --criterion gic")
    sel.add_argument(
        "--penalty",
        default="per-model",
        choices=["per-model", "fixed-r"],
        help="per-model dimension (default) or the full model's dimension for every submodel",
    )
    sel.add_argument("--skip-policy", default="drop", choices=["drop", "fail", "impute"])
    sel.add_argument("--out", default=None, help="directory for ranking and per-cluster files")
    sel.add_argument("--threads", type=_positive_int, default=None)

    sim = sub.add_parser("simulate", help="run a simulation scenario from a YAML file")
    sim.add_argument("--scenario", required=True, help="YAML scenario file")
    sim.add_argument("--replicates", type=_positive_int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--criteria", default=None, help="comma-separated, e.g. meanAIC,mAIC-RI")
    sim.add_argument("--lambda", dest="lam", type=float, default=None, help="penalty for the GIC criterion")
    sim.add_argument("--threads", type=_positive_int, default=None)
    sim.add_argument("--grid", action="store_true", help="cross all listed sigma0_sq and sigma1_sq values")
    sim.add_argument("--out", default=None, help="directory for table, histogram and metadata files")
    return parser


def cmd_select(args) -> int:
    candidates, forced = _names(args.candidates), _names(args.forced)
    if not candidates:
        log.error("--candidates needs at least one column")
        return EXIT_DATA
    overlap = set(candidates) & set(forced)
    if overlap:
        log.error("columns %s are both candidate and forced", sorted(overlap))
        return EXIT_DATA
    if args.criterion == "gic" and args.lam is None:
        log.error("--criterion gic needs --lambda")
        return EXIT_DATA
    threads = args.threads or _default_threads()
    covariates = candidates + forced
    family = Family.parse(args.family)
    try:
        schema = DatasetSchema(args.cluster, args.response, tuple(covariates), family)
        data = load_clusters(args.data, schema)
        models = enumerate_models(
            range(1, len(candidates) + 1),
            forced=range(len(candidates) + 1, len(covariates) + 1),
            family=family,
            names=covariates,
        )
    except (DataError, DomainError, LatticeTooLarge, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    log.info("loaded %d clusters, %d rows; %d models", len(data), sum(c.n for c in data), len(models))

    policy = SkipPolicy.parse(args.skip_policy)
    try:
        if args.criterion == "maic-ri":
            report = maic_select(data, models, workers=threads)
        else:
            penalty = 2.0 if args.criterion == "meanaic" else args.lam
            fixed = len(covariates) + 1 + int(family.profiles_dispersion) if args.penalty == "fixed-r" else None
            report = select(data, models, policy=policy, penalty=penalty, fixed_params=fixed, workers=threads)
    except FitError as exc:
        where = f" (cluster {exc.cluster_id})" if exc.cluster_id is not None else ""
        log.error("fit failed%s: %s", where, exc)
        return EXIT_FIT
    except AllClustersSkipped as exc:
        log.error("%s", exc)
        return EXIT_FIT
    except DomainError as exc:
        log.error("%s", exc)
        return EXIT_DATA

    if report.dropped:
        log.warning("dropped %d cluster(s) from every model: %s", len(report.dropped), ", ".join(map(str, report.dropped)))
    for cid, value in report.imputed.items():
        log.warning("cluster %s: failed fits given the worst AIC %.6g", cid, value)
    for s in report.per_model:
        if s.n_nonconverged:
            log.warning("%s: %d cluster fit(s) did not converge", s.model.label, s.n_nonconverged)

    sys.stdout.write(format_ranking(report))
    if args.out:
        write_selection_report(report, args.out)
    return EXIT_OK


def _scenarios(cfg: dict, grid: bool) -> list[Scenario]:
    base = Scenario(
        K=cfg["K"],
        cluster_sizes=cfg["cluster_sizes"],
        beta1=cfg["beta1"],
        sigma0_sq=cfg["sigma0_sq"][0],
        sigma1_sq=cfg["sigma1_sq"][0],
        re_law=cfg["re_law"],
        replicates=cfg["replicates"],
        base_seed=cfg["base_seed"],
    )
    if grid:
        return expand_grid(base, cfg["sigma0_sq"], cfg["sigma1_sq"])
    for key in ("sigma0_sq", "sigma1_sq"):
        if len(cfg[key]) > 1:
            raise ConfigError("several values listed; pass --grid to cross them", key)
    return [base]


def cmd_simulate(args) -> int:
    started = dt.datetime.now(dt.timezone.utc)
    try:
        cfg = load_scenario_config(args.scenario)
        if args.replicates is not None:
            cfg["replicates"] = args.replicates
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("must be non-negative", "base_seed")
            cfg["base_seed"] = args.seed
        if args.criteria is not None:
            try:
                cfg["criteria"] = [parse_criterion(c) for c in _names(args.criteria)]
            except ValueError as exc:
                raise ConfigError(str(exc), "criteria") from None
            if not cfg["criteria"]:
                raise ConfigError("no criteria given", "criteria")
        if args.lam is not None:
            cfg["gic_lambda"] = args.lam
        if "GIC" in cfg["criteria"] and cfg["gic_lambda"] is None:
            raise ConfigError("the GIC criterion needs gic_lambda", "gic_lambda")
        scenarios = _scenarios(cfg, args.grid)
    except (ConfigError, ValueError) as exc:
        log.error("%s: %s", args.scenario, exc)
        return EXIT_DATA

    threads = args.threads or _default_threads()
    reports = []
    for s in scenarios:
        log.info("scenario sigma0^2=%g sigma1^2=%g n=%s", s.sigma0_sq, s.sigma1_sq, s.size_label)
        r = run_scenario(s, cfg["criteria"], workers=threads, gic_lambda=cfg["gic_lambda"])
        for c, k in r.failures.items():
            if k:
                log.warning("sigma0^2=%g sigma1^2=%g: %s failed in %d replicate(s)", s.sigma0_sq, s.sigma1_sq, c, k)
        reports.append(r)

    sys.stdout.write(format_sim_table(reports))
    if args.out:
        meta = {
            "version": __version__,
            "python": platform.python_version(),
            "argv": sys.argv[1:],
            "threads": threads,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
            "started": started.isoformat(),
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        }
        write_sim_reports(reports, args.out, meta)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # diagnostics go to the current stderr whatever logging the host configured
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("meanaic: %(levelname)s: %(message)s"))
    pkg_log = logging.getLogger("meanaic")
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    pkg_log.propagate = False
    try:
        if args.command == "select":
            return cmd_select(args)
        return cmd_simulate(args)
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.propagate = True


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
