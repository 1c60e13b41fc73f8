"""Command-line interface.

    nvrotor [--config FILE] [--out DIR] [--section.key VALUE ...] COMMAND ...

Commands: ``params``, ``echo``, ``oracle``, ``sweep SPECFILE``, ``figure ID``.
Configuration is a sectioned key-value file in SI units; the bundled
``fig1.cfg`` is used when neither ``--config`` nor ``$NVROTOR_CONFIG`` is set.
Exit codes: 0 success, 2 configuration or usage error, 3 computation domain
error, 4 oracle non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DomainError, NvRotorError, TruncationError
from .fock_oracle import MAX_DIM, oracle_trace
from .su11_echo import DephasingSpec, ThermalSpec, probability_trace
from .sweep_engine import (
    FIGURE_IDS,
    Range,
    Series,
    SweepOptions,
    SweepSpec,
    Table,
    preset,
    run_sweep,
    write_table,
)
from .system_model import (
    Branch,
    DispersiveRates,
    FieldSpinConfig,
    Geometry,
    SystemConfig,
    TrapConfig,
    dispersive_rates,
    find_anti_crossing,
    find_bstar,
    secular_rates,
    validity_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DOMAIN = 3
EXIT_CONVERGENCE = 4

CONFIG_ENV = "NVROTOR_CONFIG"
TWO_PI = 2.0 * math.pi

REQUIRED = {
    "geometry": ("a", "b", "mass_density"),
    "trap": ("epsilon", "delta", "udc_over_uac", "omega0"),
    "field": ("b0", "gamma_e", "d_nv"),
}
OPTIONAL = {
    "thermal": ("n_gamma", "n_beta"),
    "dephasing": ("t2", "gamma2"),
    "protocol": ("include_beta", "branch"),
    "rates": ("freq_beta", "freq_gamma", "chi_beta", "chi_gamma"),
}
# bare --key flags resolve to the unique section holding the key
BARE_KEYS = {k: s for sec in (REQUIRED, OPTIONAL) for s, keys in sec.items() for k in keys}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    system: SystemConfig
    thermal: ThermalSpec
    dephasing: DephasingSpec
    include_beta: bool = True
    branch: Branch | None = None
    rate_overrides: dict = field(default_factory=dict)
    output_dir: Path = Path(".")
    overrides: dict = field(default_factory=dict)

    def rates(self) -> DispersiveRates:
        r = dispersive_rates(self.system)
        if self.branch is not None and r.branch is not self.branch:
            raise _BranchMismatch(r.branch, self.branch, self.system.field.b0)
        if self.rate_overrides:
            r = replace(r, **self.rate_overrides)
        return r


class _BranchMismatch(NvRotorError):
    def __init__(self, actual, wanted, b0):
        super().__init__(f"B0 = {b0 * 1e3:.6g} mT gives {actual.value} rates; "
                         f"requested {wanted.value}")


# ---------------------------------------------------------------------------
# configuration


def default_config_path():
    env = os.environ.get(CONFIG_ENV)
    if env:
        return Path(env)
    return resources.files("nvrotor") / "data" / "fig1.cfg"


def _read_parser(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text(encoding="utf-8") if isinstance(path, (str, Path)) \
            else path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parser


def _apply_overrides(parser, overrides):
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if not section:
            if name not in BARE_KEYS:
                raise ConfigError(f"unknown option --{name}")
            section = BARE_KEYS[name]
        known = REQUIRED.get(section) or OPTIONAL.get(section)
        if known is None or name not in known:
            raise ConfigError(f"unknown option --{section}.{name}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)


def _float(parser, section, key, default=None):
    if not parser.has_option(section, key):
        if default is None:
            raise ConfigError(f"missing key '{key}' in section [{section}]")
        return default
    raw = parser.get(section, key)
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None


def build_run_config(path=None, overrides=None, output_dir=".") -> RunConfig:
    overrides = dict(overrides or {})
    parser = _read_parser(path or default_config_path())
    _apply_overrides(parser, overrides)
    for section, keys in REQUIRED.items():
        for key in keys:
            if not parser.has_option(section, key):
                raise ConfigError(f"missing key '{key}' in section [{section}]")
    try:
        system = SystemConfig(
            geometry=Geometry(**{k: _float(parser, "geometry", k) for k in REQUIRED["geometry"]}),
            trap=TrapConfig(**{k: _float(parser, "trap", k) for k in REQUIRED["trap"]}),
            field=FieldSpinConfig(**{k: _float(parser, "field", k) for k in REQUIRED["field"]}),
        )
        n_beta = (_float(parser, "thermal", "n_beta")
                  if parser.has_option("thermal", "n_beta") else None)
        thermal = ThermalSpec(n_gamma=_float(parser, "thermal", "n_gamma", 0.0), n_beta=n_beta)
        if parser.has_option("dephasing", "gamma2"):
            deph = DephasingSpec.from_rate(_float(parser, "dephasing", "gamma2"))
        else:
            deph = DephasingSpec.from_t2(_float(parser, "dephasing", "t2", math.inf))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    include_beta = True
    branch = None
    if parser.has_section("protocol"):
        try:
            include_beta = parser.getboolean("protocol", "include_beta", fallback=True)
        except ValueError as exc:
            raise ConfigError(f"[protocol] include_beta: {exc}") from exc
        if parser.has_option("protocol", "branch"):
            try:
                branch = Branch.parse(parser.get("protocol", "branch"))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    rate_overrides = {}
    if parser.has_section("rates"):
        for key in parser.options("rates"):
            if key not in OPTIONAL["rates"]:
                raise ConfigError(f"unknown key '{key}' in section [rates]")
            rate_overrides[key] = _float(parser, "rates", key)
    return RunConfig(system=system, thermal=thermal, dephasing=deph,
                     include_beta=include_beta, branch=branch,
                     rate_overrides=rate_overrides, output_dir=Path(output_dir),
                     overrides=overrides)


# ---------------------------------------------------------------------------
# commands


def _hz(x):
    return f"{x:.6e} rad/s ({x / TWO_PI:.6e} Hz)"


def cmd_params(cfg: RunConfig, write_csv=False, out=sys.stdout) -> int:
    s = cfg.system
    sec = secular_rates(s)
    val = validity_report(s)
    lines = [f"B0                 {s.field.b0:.6e} T"]
    lines += [
        f"omega_L            {_hz(sec.omega_l)}",
        f"Delta              {_hz(sec.delta_q)}",
        f"omega_alpha        {_hz(sec.omega_alpha)}",
        f"omega_beta         {_hz(sec.omega_beta)}",
        f"omega_gamma        {_hz(sec.omega_gamma)}",
        f"g_beta             {_hz(sec.g_beta)}",
        f"g_gamma            {_hz(sec.g_gamma)}",
        f"g_beta/omega_beta  {sec.g_beta / sec.omega_beta:.6e}",
        f"g_gamma/omega_gamma {sec.g_gamma / sec.omega_gamma:.6e}",
    ]
    row = {"b0": (s.field.b0, "T"), "delta_2pi": (sec.delta_q / TWO_PI, "Hz"),
           "omega_beta_2pi": (sec.omega_beta / TWO_PI, "Hz"),
           "omega_gamma_2pi": (sec.omega_gamma / TWO_PI, "Hz")}
    try:
        r = cfg.rates()
        lines += [
            f"branch             {r.branch.value}",
            f"freq_beta          {_hz(r.freq_beta)}",
            f"freq_gamma         {_hz(r.freq_gamma)}",
            f"chi_beta           {_hz(r.chi_beta)}",
            f"chi_gamma          {_hz(r.chi_gamma)}",
            f"beta stable        {r.beta_stable}",
            f"revival time       {math.pi / r.freq_gamma:.6e} s",
        ]
        row.update({"freq_beta_2pi": (r.freq_beta / TWO_PI, "Hz"),
                    "freq_gamma_2pi": (r.freq_gamma / TWO_PI, "Hz"),
                    "chi_beta_2pi": (r.chi_beta / TWO_PI, "Hz"),
                    "chi_gamma_2pi": (r.chi_gamma / TWO_PI, "Hz")})
    except NvRotorError as exc:
        lines.append(f"dispersive rates   unavailable ({exc})")
        row.update({k: (math.nan, "Hz") for k in
                    ("freq_beta_2pi", "freq_gamma_2pi", "chi_beta_2pi", "chi_gamma_2pi")})
    terms = ", ".join(f"{t:.3e}" for t in val.dispersive_terms)
    lines += [
        f"dispersive terms   {terms} (threshold {val.threshold:g})",
        f"dispersive valid   {val.dispersive_ok}",
        f"secular valid      epsilon {val.epsilon_ok}, Udc/Uac {val.udc_ratio_ok}",
    ]
    b_ac = find_anti_crossing(s)
    b_star = find_bstar(s)
    lines += [
        f"anti-crossing      {b_ac:.6e} T ({b_ac * 1e3:.4f} mT)",
        f"B*                 {b_star:.6e} T ({b_star * 1e3:.4f} mT)",
    ]
    row.update({"anti_crossing": (b_ac, "T"), "bstar": (b_star, "T")})
    print("\n".join(lines), file=out)
    if write_csv:
        finite = all(math.isfinite(v) for v, _ in row.values())
        table = Table(columns=[(k, u) for k, (_, u) in row.items()] + [("valid", "1")],
                      rows=[[v for v, _ in row.values()]
                            + [1.0 if finite and val.dispersive_ok else 0.0]],
                      provenance=_config_provenance(cfg, "params"))
        _write(table, cfg.output_dir / "params.csv", out)
    return EXIT_OK


def _tau_grid(args, rates):
    unit = math.pi / rates.freq_gamma if args.tau_unit == "revival" else 1.0
    stop = args.tau_stop if args.tau_stop is not None else (
        1.2 if args.tau_unit == "revival" else 1.2 * math.pi / rates.freq_gamma)
    if args.tau_start != 0.0:
        raise ConfigError("the tau grid must start at 0 (the overlap phase is tracked from tau = 0)")
    if args.tau_points < 2 or not stop > 0:
        raise ConfigError("the tau grid needs at least 2 points and a positive stop")
    return np.linspace(0.0, stop, args.tau_points) * unit


def _protocol_setup(cfg, args):
    rates = cfg.rates()
    if rates.branch is Branch.NEGATIVE_DELTA and cfg.branch is None:
        raise DomainError(
            f"B0 = {cfg.system.field.b0 * 1e3:.6g} mT lies above the anti-crossing; "
            "pass --branch negative to run the high-field protocol")
    include_beta = cfg.include_beta and not args.no_beta
    return rates, include_beta


def cmd_echo(cfg: RunConfig, args, out=sys.stdout) -> int:
    rates, include_beta = _protocol_setup(cfg, args)
    taus = _tau_grid(args, rates)
    pts = probability_trace(rates, cfg.thermal, cfg.dephasing, taus, include_beta)
    rows = [[p.tau, p.tau * rates.freq_gamma / math.pi, p.p_up, p.p_down,
             p.overlap_gamma.real, p.overlap_gamma.imag, p.overlap_beta.real,
             p.overlap_beta.imag, 1.0] for p in pts]
    table = Table(columns=[("tau", "s"), ("tau_over_revival", "1"), ("p_up", "1"),
                           ("p_down", "1"), ("overlap_gamma_re", "1"), ("overlap_gamma_im", "1"),
                           ("overlap_beta_re", "1"), ("overlap_beta_im", "1"), ("valid", "1")],
                  rows=rows,
                  provenance=_config_provenance(cfg, "echo", include_beta=include_beta))
    _write(table, cfg.output_dir / "echo.csv", out)
    print(f"P_up at tau = {pts[-1].tau:.6e} s: {pts[-1].p_up:.9f}", file=out)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args, out=sys.stdout) -> int:
    rates, include_beta = _protocol_setup(cfg, args)
    taus = _tau_grid(args, rates)
    tol = args.tol
    oracle_tol = args.oracle_tol if args.oracle_tol is not None else tol / 4.0
    closed = probability_trace(rates, cfg.thermal, cfg.dephasing, taus, include_beta)
    exact, records = oracle_trace(rates, cfg.thermal, cfg.dephasing, taus, include_beta,
                                  tol=oracle_tol, max_dim=args.max_dim)
    rows = []
    worst = 0.0
    for c, o, rec in zip(closed, exact, records):
        diff = abs(c.p_up - o.p_up)
        worst = max(worst, diff)
        rows.append([c.tau, c.p_up, o.p_up, diff, float(rec.final_dim), 1.0])
    table = Table(columns=[("tau", "s"), ("p_up_closed", "1"), ("p_up_oracle", "1"),
                           ("abs_diff", "1"), ("final_dim", "1"), ("valid", "1")],
                  rows=rows,
                  provenance=_config_provenance(cfg, "oracle", include_beta=include_beta)
                  + [f"tolerance: {tol!r} oracle step tolerance: {oracle_tol!r}",
                     f"max |difference|: {worst!r}"])
    _write(table, cfg.output_dir / "oracle.csv", out)
    print(f"max |P_closed - P_oracle| = {worst:.3e} (tol {tol:g})", file=out)
    return EXIT_OK if worst < tol else EXIT_DOMAIN


def _series_arg(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def cmd_figure(cfg: RunConfig, args, out=sys.stdout) -> int:
    try:
        spec = preset(args.fig_id, base=cfg.system,
                      n_gamma_series=_series_arg(args.n_gamma_series) if args.n_gamma_series
                      else None,
                      t2_series=_series_arg(args.t2_series) if args.t2_series else None)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    if args.workers > 1:
        spec = replace(spec, options=replace(spec.options, workers=args.workers))
    table = run_sweep(spec)
    _write(table, cfg.output_dir / f"{spec.name}.csv", out)
    return EXIT_OK


def load_sweep_spec(path, base: SystemConfig) -> SweepSpec:
    """Sweep description file: ``[sweep]`` plus optional ``[range2]`` and ``[series]``."""
    parser = _read_parser(path)
    if not parser.has_section("sweep"):
        raise ConfigError(f"{path}: missing [sweep] section")
    sw = parser["sweep"]

    def rng(section):
        try:
            return Range(start=float(section["start"]), stop=float(section["stop"]),
                         points=int(section["points"]), scale=section.get("scale", "linear"))
        except KeyError as exc:
            raise ConfigError(f"{path}: missing range key {exc.args[0]!r}") from None

    for name in ("geometry", "trap", "field"):
        if parser.has_section(name):
            changes = {k: float(v) for k, v in parser[name].items()}
            base = replace(base, **{name: replace(getattr(base, name), **changes)})
    series = None
    if parser.has_section("series"):
        series = Series(param=parser["series"]["param"],
                        values=_series_arg(parser["series"]["values"]))
    branch = sw.get("branch")
    options = SweepOptions(
        include_beta=sw.getboolean("include_beta", fallback=True),
        branch=Branch.parse(branch) if branch else None,
        n_gamma=float(sw.get("n_gamma", "1")),
        t2=float(sw.get("t2", "inf")),
        tau_unit=sw.get("tau_unit", "s"),
        series=series,
        workers=int(sw.get("workers", "1")),
    )
    outputs = tuple(x.strip() for x in sw.get("outputs", "").split(",") if x.strip())
    return SweepSpec(base=base, variable=sw.get("variable", ""), range=rng(sw),
                     outputs=outputs, options=options,
                     range2=rng(parser["range2"]) if parser.has_section("range2") else None,
                     name=sw.get("name", Path(path).stem))


def cmd_sweep(cfg: RunConfig, args, out=sys.stdout) -> int:
    try:
        spec = load_sweep_spec(args.specfile, cfg.system)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.specfile}: {exc}") from exc
    table = run_sweep(spec)
    _write(table, cfg.output_dir / f"{spec.name}.csv", out)
    return EXIT_OK


def _write(table, path, out):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, path)
    print(f"wrote {path}", file=out)


def _config_provenance(cfg, command, include_beta=None):
    s = cfg.system
    g, t, f = s.geometry, s.trap, s.field
    lines = [
        f"nvrotor {__import__('nvrotor').__version__} {command}",
        f"geometry: a={g.a!r} b={g.b!r} mass_density={g.mass_density!r}",
        f"trap: epsilon={t.epsilon!r} delta={t.delta!r} udc_over_uac={t.udc_over_uac!r} "
        f"omega0={t.omega0!r}",
        f"field: b0={f.b0!r} gamma_e={f.gamma_e!r} d_nv={f.d_nv!r}",
        f"thermal: n_gamma={cfg.thermal.n_gamma!r}"
        + (f" n_beta={cfg.thermal.n_beta!r}" if cfg.thermal.n_beta is not None else ""),
        f"dephasing: gamma2={cfg.dephasing.gamma2!r}",
    ]
    if include_beta is not None:
        lines.append(f"include_beta: {include_beta}")
    if cfg.rate_overrides:
        lines.append("rates override: " + " ".join(
            f"{k}={v!r}" for k, v in sorted(cfg.rate_overrides.items())))
    return lines


# ---------------------------------------------------------------------------
# argument handling


def _split_overrides(argv):
    """Pull ``--section.key value`` and bare ``--key value`` config overrides out of argv."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and arg != "--":
            name, eq, value = arg[2:].partition("=")
            key = name.replace("-", "_")
            bare = key.rpartition(".")[2]
            if "." in key or (bare in BARE_KEYS and key == bare):
                if not eq:
                    if i + 1 >= len(argv):
                        raise ConfigError(f"--{name} needs a value")
                    value = argv[i + 1]
                    i += 1
                overrides[key] = value
                i += 1
                continue
        rest.append(arg)
        i += 1
    return rest, overrides


def _add_tau_flags(p, default_points):
    p.add_argument("--tau-start", type=float, default=0.0,
                   help="first tau (must be 0)")
    p.add_argument("--tau-stop", type=float, default=None,
                   help="last tau; default 1.2 revival times")
    p.add_argument("--tau-points", type=int, default=default_points)
    p.add_argument("--tau-unit", choices=("s", "revival"), default="s",
                   help="units of the tau flags: seconds or pi / freq_gamma")
    p.add_argument("--no-beta", action="store_true", help="leave the beta mode out")


def build_parser():
    p = argparse.ArgumentParser(
        prog="nvrotor",
        description="Spin-libration parameters, echo interference and figure sweeps.",
        epilog="Config overrides: --<section>.<key> VALUE, or --<key> VALUE for unique keys "
               f"(e.g. --b0 90e-3, --t2 0.5e-3). Default config: ${CONFIG_ENV} or bundled fig1.cfg.")
    p.add_argument("--config", help="configuration file")
    p.add_argument("--out", default=".", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("params", help="derived rates, validity, anti-crossing and B*")
    pp.add_argument("--csv", action="store_true", help="also write params.csv")

    pe = sub.add_parser("echo", help="closed-form P(tau) trace")
    _add_tau_flags(pe, 200)

    po = sub.add_parser("oracle", help="closed form against the truncated Fock oracle")
    _add_tau_flags(po, 50)
    po.add_argument("--tol", type=float, default=1e-4,
                    help="pass threshold on max |P_closed - P_oracle|")
    po.add_argument("--oracle-tol", type=float, default=None,
                    help="truncation step tolerance (default tol/4)")
    po.add_argument("--max-dim", type=int, default=MAX_DIM)

    ps = sub.add_parser("sweep", help="run a sweep description file")
    ps.add_argument("specfile")

    pf = sub.add_parser("figure", help="run a figure preset")
    pf.add_argument("fig_id", help="one of: " + ", ".join(FIGURE_IDS))
    pf.add_argument("--n-gamma-series", help="comma-separated n_gamma values")
    pf.add_argument("--t2-series", help="comma-separated T2 values (s)")
    pf.add_argument("--workers", type=int, default=1)
    return p


COMMANDS = {
    "params": lambda cfg, a, out: cmd_params(cfg, a.csv, out),
    "echo": cmd_echo,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "figure": cmd_figure,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = _split_overrides(argv)
        try:
            args = build_parser().parse_args(rest)
        except SystemExit as exc:
            return EXIT_OK if exc.code == 0 else EXIT_CONFIG
        cfg = build_run_config(args.config, overrides, args.out)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except (ConvergenceError, TruncationError) as exc:
        print(f"oracle did not converge: {exc}", file=err)
        return EXIT_CONVERGENCE
    except NvRotorError as exc:
        print(f"computation error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"invalid input: {exc}", file=err)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=err)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
