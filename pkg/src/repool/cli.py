"""Command-line interface.

Subcommands::

    ne               equilibrium commitments for a model and prices
    check-condition  equilibrium existence condition for a model
    allocate         settle one instance through the pool
    audit            ex-post stability audits for one instance
    counterexample   prices that break the equilibrium candidate, if any
    simulate         fit, commit, and settle a market history; write reports

Options may come from a TOML config file (``--config``); command-line flags
override config values. Exit codes: 0 success, 1 audit violation, 2 invalid
configuration or input, 3 existence condition fails, 4 capacity exceeded.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .market import PriceSystem, allocate_payoffs
from .models import EmpiricalJointModel, GaussianJointModel
from .equilibrium import (
    EquilibriumExistenceWarning,
    check_ne_condition,
    find_counterexample_prices,
    nash_commitments,
)
from .coalition import (
    CapacityError,
    audit_expost_core,
    competitive_equilibrium,
    no_collusion_differences,
)
from .simulate import (
    HistoryFormatError,
    MarketHistory,
    SimOptions,
    fit_error_model,
    run_all_cases,
)
from . import reports

EXIT_OK = 0
EXIT_AUDIT = 1
EXIT_CONFIG = 2
EXIT_CONDITION = 3
EXIT_CAPACITY = 4


class ConfigError(ValueError):
    """Unusable command configuration."""


@dataclass
class RunConfig:
    """Effective options of one invocation after merging config and flags."""

    command: str
    model_file: str | None = None
    mu: list | None = None
    sigma: list | None = None
    prices: tuple | None = None
    seed: int | None = None
    samples: int = 100_000
    out: str | None = None
    sampled: bool = False
    physical: bool = False
    tie_tol: float = 1e-9
    unit: int | None = None
    allocation: str = "pam"
    commitments_file: str | None = None
    realizations_file: str | None = None
    payoffs_file: str | None = None
    history_file: str | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.tie_tol <= 0:
            raise ConfigError("tie tolerance must be positive")
        if self.allocation not in ("pam", "proportional"):
            raise ConfigError(f"unknown allocation rule {self.allocation!r}")

    def effective(self) -> dict:
        """Deterministic dict of everything that shapes the run, for hashing."""
        return {
            "command": self.command,
            "model_file": self.model_file,
            "mu": self.mu,
            "sigma": self.sigma,
            "prices": list(self.prices) if self.prices else None,
            "seed": self.seed,
            "samples": self.samples,
            "sampled": self.sampled,
            "physical": self.physical,
            "tie_tol": self.tie_tol,
            "unit": self.unit,
            "allocation": self.allocation,
            "commitments_file": self.commitments_file,
            "realizations_file": self.realizations_file,
            "payoffs_file": self.payoffs_file,
            "history_file": self.history_file,
        }

    def provenance(self) -> dict:
        return reports.provenance(self.effective(), self.seed)

    def require_prices(self) -> PriceSystem:
        if self.prices is None:
            raise ConfigError("prices are required (--prices p_f,p_rb,p_rs[,p_star])")
        try:
            return PriceSystem(*self.prices)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def require_model(self):
        if self.mu is not None or self.sigma is not None:
            if self.mu is None or self.sigma is None:
                raise ConfigError("inline model needs both mu and sigma")
            try:
                return GaussianJointModel(self.mu, self.sigma)
            except ValueError as exc:
                raise ConfigError(f"invalid model: {exc}") from None
        if self.model_file is None:
            raise ConfigError("a model is required (--model FILE or [model] in config)")
        return load_model(self.model_file)


def load_model(path):
    """Load a model: TOML with mu/sigma, or a CSV scenario matrix."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"model file not found: {path}")
    if p.suffix.lower() == ".csv":
        try:
            scen = np.loadtxt(p, delimiter=",", ndmin=2)
            return EmpiricalJointModel(scen)
        except ValueError as exc:
            raise ConfigError(f"invalid scenario file {path}: {exc}") from None
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    table = data.get("model", data)
    if "mu" not in table or "sigma" not in table:
        raise ConfigError(f"{path} must define mu and sigma")
    try:
        return GaussianJointModel(table["mu"], table["sigma"])
    except ValueError as exc:
        raise ConfigError(f"invalid model in {path}: {exc}") from None


def _read_vector(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {path}")
    tokens = p.read_text().replace(",", " ").split()
    if not tokens:
        raise ConfigError(f"{path} contains no values")
    try:
        return np.array([float(t) for t in tokens])
    except ValueError:
        raise ConfigError(f"{path} contains non-numeric entries") from None


def _parse_prices(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (3, 4):
        raise ConfigError("prices must be p_f,p_rb,p_rs or p_f,p_rb,p_rs,p_star")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"non-numeric price in {text!r}") from None
    return values


def _merge_config(args: argparse.Namespace) -> RunConfig:
    file_cfg: dict = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(p, "rb") as fh:
                file_cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {args.config}: {exc}") from None

    model_tbl = file_cfg.get("model", {})
    prices_tbl = file_cfg.get("prices", {})
    run_tbl = file_cfg.get("run", {})
    files_tbl = file_cfg.get("files", {})

    prices = None
    if all(k in prices_tbl for k in ("p_f", "p_rb", "p_rs")):
        prices = (prices_tbl["p_f"], prices_tbl["p_rb"], prices_tbl["p_rs"])
        if "p_star" in prices_tbl:
            prices += (prices_tbl["p_star"],)
    if getattr(args, "prices", None):
        prices = _parse_prices(args.prices)

    def pick(flag_name, table, key, default):
        flag = getattr(args, flag_name, None)
        if flag is not None:
            return flag
        return table.get(key, default)

    return RunConfig(
        command=args.command,
        model_file=pick("model", files_tbl, "model", None),
        mu=model_tbl.get("mu"),
        sigma=model_tbl.get("sigma"),
        prices=prices,
        seed=pick("seed", run_tbl, "seed", None),
        samples=int(pick("samples", run_tbl, "samples", 100_000)),
        out=pick("out", run_tbl, "out", None),
        sampled=bool(getattr(args, "sampled", False) or run_tbl.get("sampled", False)),
        physical=bool(getattr(args, "physical", False) or run_tbl.get("physical", False)),
        tie_tol=float(pick("tie_tol", run_tbl, "tie_tol", 1e-9)),
        unit=pick("unit", run_tbl, "unit", None),
        allocation=pick("allocation", run_tbl, "allocation", "pam"),
        commitments_file=pick("commitments", files_tbl, "commitments", None),
        realizations_file=pick("realizations", files_tbl, "realizations", None),
        payoffs_file=pick("payoffs", files_tbl, "payoffs", None),
        history_file=getattr(args, "history", None) or files_tbl.get("history"),
    )


def _emit(payload: dict, cfg: RunConfig, filename: str | None = None) -> None:
    """Print the report, and write it under --out if one was given."""
    text = reports.write_json(payload)
    if cfg.out and filename:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)
    elif cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(text)
    sys.stdout.write(text)


def cmd_ne(cfg: RunConfig) -> int:
    model = cfg.require_model()
    prices = cfg.require_prices()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EquilibriumExistenceWarning)
        eq = nash_commitments(model, prices)
    payload = {
        "commitments": eq.commitments,
        "total_commitment": eq.total_commitment,
        "fractile": eq.fractile,
        "slopes": eq.condition.slopes.slopes,
        "max_slope": eq.condition.max_slope,
        "condition_satisfied": eq.condition.satisfied,
        "provenance": cfg.provenance(),
    }
    _emit(payload, cfg)
    return EXIT_OK if eq.condition.satisfied else EXIT_CONDITION


def cmd_check_condition(cfg: RunConfig) -> int:
    model = cfg.require_model()
    report = check_ne_condition(model)
    payload = {
        "slopes": report.slopes.slopes,
        "max_slope": report.max_slope,
        "condition_satisfied": report.satisfied,
        "provenance": cfg.provenance(),
    }
    _emit(payload, cfg)
    return EXIT_OK if report.satisfied else EXIT_CONDITION


def _instance(cfg: RunConfig):
    if cfg.commitments_file is None or cfg.realizations_file is None:
        raise ConfigError("commitments and realizations files are required")
    c = _read_vector(cfg.commitments_file)
    x = _read_vector(cfg.realizations_file)
    if c.size != x.size:
        raise ConfigError(f"length mismatch: {c.size} commitments vs {x.size} realizations")
    return c, x


def cmd_allocate(cfg: RunConfig) -> int:
    c, x = _instance(cfg)
    prices = cfg.require_prices()
    try:
        alloc = allocate_payoffs(c, x, prices, tie_tol=cfg.tie_tol)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    payload = {
        "payoffs": alloc.payoffs,
        "aggregate": alloc.aggregate,
        "branch": alloc.branch,
        "budget_residual": alloc.budget_residual,
        "provenance": cfg.provenance(),
    }
    _emit(payload, cfg)
    return EXIT_OK


def cmd_audit(cfg: RunConfig) -> int:
    c, x = _instance(cfg)
    prices = cfg.require_prices()
    pam = allocate_payoffs(c, x, prices, tie_tol=cfg.tie_tol)
    if cfg.payoffs_file:
        payoffs = _read_vector(cfg.payoffs_file)
        if payoffs.size != c.size:
            raise ConfigError("payoffs length must match commitments")
    elif cfg.allocation == "proportional":
        if abs(c.sum()) < 1e-12:
            raise ConfigError("proportional split undefined for zero total commitment")
        payoffs = pam.aggregate * c / c.sum()
    else:
        payoffs = pam.payoffs

    core = audit_expost_core(payoffs, c, x, prices, sampled=cfg.sampled,
                             n_subsets=cfg.samples, seed=cfg.seed)
    scale = core.scale
    if cfg.sampled:
        collusion_max = None
        collusion_ok = True
    else:
        diffs = no_collusion_differences(c, x, prices)
        collusion_max = float(np.abs(diffs).max())
        collusion_ok = collusion_max <= 1e-9 * scale
    ce = competitive_equilibrium(c, x, prices, tie_tol=cfg.tie_tol)
    ce_residual = float(np.abs(ce.payoffs - pam.payoffs).max())
    ce_ok = ce_residual <= 1e-9 * scale
    passed = core.passed and collusion_ok and ce_ok

    payload = {
        "core": {
            "passed": core.passed,
            "min_slack": core.min_slack,
            "worst_subset": core.worst.mask,
            "worst_members": list(core.worst.members),
            "subsets_checked": len(core.reports),
            "sampled": core.sampled,
        },
        "no_collusion": {"passed": collusion_ok, "max_abs_difference": collusion_max},
        "competitive_equilibrium": {
            "passed": ce_ok,
            "price": ce.price,
            "branch": ce.branch,
            "max_abs_residual_vs_pool_rule": ce_residual,
        },
        "allocation_rule": cfg.allocation if not cfg.payoffs_file else "file",
        "passed": passed,
        "provenance": cfg.provenance(),
    }
    _emit(payload, cfg, filename="audit.json")
    if cfg.out:
        out = Path(cfg.out)
        if out.is_dir():
            reports.coalition_reports_csv(core.reports, out / "coalition_reports.csv")
    return EXIT_OK if passed else EXIT_AUDIT


def cmd_counterexample(cfg: RunConfig) -> int:
    model = cfg.require_model()
    units = [cfg.unit] if cfg.unit is not None else list(range(model.n_units))
    found = None
    for unit in units:
        prices = find_counterexample_prices(model, unit)
        if prices is not None:
            found = (unit, prices)
            break
    if found is None:
        payload = {"found": False, "provenance": cfg.provenance()}
        _emit(payload, cfg)
        return EXIT_CONDITION
    unit, prices = found
    payload = {
        "found": True,
        "unit": unit,
        "prices": {
            "p_f": prices.day_ahead,
            "p_rb": prices.rt_buy,
            "p_rs": prices.rt_sell,
            "p_star": prices.tie_price,
        },
        "fractile": (prices.day_ahead - prices.rt_sell) / prices.spread,
        "provenance": cfg.provenance(),
    }
    _emit(payload, cfg)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.history_file is None:
        raise ConfigError("a history CSV is required")
    if cfg.out is None:
        raise ConfigError("--out directory is required for simulate")
    history = MarketHistory.from_csv(cfg.history_file)
    if cfg.mu is not None or cfg.model_file is not None:
        model = cfg.require_model()
    else:
        model = fit_error_model(history)
    options = SimOptions(physical=cfg.physical, tie_tol=cfg.tie_tol)
    results = run_all_cases(history, model, options)
    paths = reports.write_simulation_outputs(cfg.out, history, results, cfg.provenance())
    summary_text = (Path(cfg.out) / "summary.json").read_text()
    sys.stdout.write(summary_text)
    sys.stderr.write("wrote: " + ", ".join(str(paths[k]) for k in sorted(paths)) + "\n")
    return EXIT_OK


_HANDLERS = {
    "ne": cmd_ne,
    "check-condition": cmd_check_condition,
    "allocate": cmd_allocate,
    "audit": cmd_audit,
    "counterexample": cmd_counterexample,
    "simulate": cmd_simulate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repool", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file; flags override it")
        p.add_argument("--prices", help="p_f,p_rb,p_rs[,p_star]")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--samples", type=int, default=None,
                       help="sample count for sampled/stochastic paths")
        p.add_argument("--out", default=None, help="output file or directory")
        p.add_argument("--tie-tol", dest="tie_tol", type=float, default=None)

    p = sub.add_parser("ne", help="equilibrium commitments")
    common(p)
    p.add_argument("--model", help="model TOML (mu/sigma) or scenario CSV")

    p = sub.add_parser("check-condition", help="existence condition verdict")
    common(p)
    p.add_argument("--model")

    p = sub.add_parser("allocate", help="settle one instance through the pool")
    common(p)
    p.add_argument("--commitments", help="text file of per-member commitments")
    p.add_argument("--realizations", help="text file of per-member actuals")

    p = sub.add_parser("audit", help="ex-post stability audits")
    common(p)
    p.add_argument("--commitments")
    p.add_argument("--realizations")
    p.add_argument("--payoffs", help="audit an explicit allocation from file")
    p.add_argument("--allocation", choices=("pam", "proportional"), default=None,
                   help="allocation rule to audit (default: the pool rule)")
    p.add_argument("--sampled", action="store_true",
                   help="sampled subset audit (needed above 24 members)")

    p = sub.add_parser("counterexample", help="prices that break the candidate")
    common(p)
    p.add_argument("--model")
    p.add_argument("--unit", type=int, default=None)

    p = sub.add_parser("simulate", help="fit, commit, settle a market history")
    common(p)
    p.add_argument("history", nargs="?", help="history CSV")
    p.add_argument("--model", help="override the fitted error model")
    p.add_argument("--physical", action="store_true",
                   help="clip negative commitments at zero")

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _merge_config(args)
        return _HANDLERS[args.command](cfg)
    except CapacityError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CAPACITY
    except (ConfigError, HistoryFormatError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
