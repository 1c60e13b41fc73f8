"""Declarative parameter sweeps and the CSV table format.

A :class:`SweepSpec` names one swept variable (or a B0 x omega0 grid), a range,
the output columns and evaluation options.  :func:`run_sweep` evaluates every
grid point; points where the dispersive approximation fails or an evaluation
raises are kept as rows with ``valid = 0`` instead of being dropped.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import __version__
from .errors import DomainError, NvRotorError
from .su11_echo import (
    DephasingSpec,
    ThermalSpec,
    probability_trace,
    protocol_probability,
    revival_time,
)
from .system_model import (
    DEFAULT_DELTA_FLOOR,
    DISPERSIVE_THRESHOLD,
    Branch,
    SystemConfig,
    dispersive_rates,
    find_bstar,
    fig1_config,
    secular_rates,
    validity_report,
)

TWO_PI = 2.0 * math.pi


class Variable(enum.Enum):
    B0 = "B0"
    TAU = "Tau"
    NGAMMA = "NGamma"
    T2 = "T2"
    OMEGA0 = "Omega0"
    GRID2D = "Grid2D"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).strip().lower():
                return v
        raise ValueError(f"unknown sweep variable {value!r}; "
                         f"expected one of {[v.value for v in cls]}")


@dataclass(frozen=True)
class Range:
    start: float
    stop: float
    points: int
    scale: str = "linear"

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("a range needs at least 2 points")
        if not self.start < self.stop:
            raise ValueError(f"range start {self.start!r} must be below stop {self.stop!r}")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"scale must be 'linear' or 'log', got {self.scale!r}")
        if self.scale == "log" and self.start <= 0:
            raise ValueError("log range needs a positive start")

    def values(self):
        if self.scale == "log":
            return np.geomspace(self.start, self.stop, self.points)
        return np.linspace(self.start, self.stop, self.points)


@dataclass(frozen=True)
class Series:
    """Repeat the protocol columns for each value of ``param`` (n_gamma or t2)."""

    param: str
    values: tuple

    def __post_init__(self):
        if self.param not in ("n_gamma", "t2"):
            raise ValueError(f"series parameter must be n_gamma or t2, got {self.param!r}")
        if not self.values:
            raise ValueError("series needs at least one value")


@dataclass(frozen=True)
class SweepOptions:
    include_beta: bool = True
    branch: Branch | None = None
    n_gamma: float = 1.0
    t2: float = math.inf
    # Tau ranges in seconds, or in units of the revival time pi / freq_gamma
    tau_unit: str = "s"
    series: Series | None = None
    delta_floor: float = DEFAULT_DELTA_FLOOR
    threshold: float = DISPERSIVE_THRESHOLD
    workers: int = 1


@dataclass(frozen=True)
class SweepSpec:
    base: SystemConfig
    variable: Variable
    range: Range
    outputs: tuple
    options: SweepOptions = field(default_factory=SweepOptions)
    range2: Range | None = None
    name: str = "sweep"

    def __post_init__(self):
        object.__setattr__(self, "variable", Variable.parse(self.variable))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if self.variable is Variable.GRID2D and self.range2 is None:
            raise ValueError("Grid2D sweeps need range2 (omega0)")
        if self.options.tau_unit not in ("s", "revival"):
            raise ValueError("tau_unit must be 's' or 'revival'")
        unknown = [c for c in self.outputs if c not in COLUMNS]
        if unknown:
            raise ValueError(f"unknown output columns {unknown}; known: {sorted(COLUMNS)}")
        if not self.outputs:
            raise ValueError("no output columns requested")
        trace_only = [c for c in self.outputs if COLUMNS[c].trace]
        if trace_only and self.variable is not Variable.TAU:
            raise ValueError(f"columns {trace_only} need a Tau sweep")


@dataclass
class Table:
    columns: list
    rows: list
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row arity does not match the columns")

    @property
    def names(self):
        return [c[0] for c in self.columns]

    def column(self, name):
        i = self.names.index(name)
        return np.array([row[i] for row in self.rows], dtype=float)


# ---------------------------------------------------------------------------
# per-point context


class _Point:
    """Lazily derived quantities at one grid point."""

    def __init__(self, config, thermal, deph, options, tau=None):
        self.config = config
        self.thermal = thermal
        self.deph = deph
        self.options = options
        self.tau = tau

    @cached_property
    def secular(self):
        return secular_rates(self.config)

    @cached_property
    def rates(self):
        r = dispersive_rates(self.config, self.options.delta_floor, self.secular)
        if self.options.branch is not None and r.branch is not self.options.branch:
            raise DomainError(f"field gives {r.branch.value}, sweep requires "
                              f"{self.options.branch.value}")
        return r

    @cached_property
    def validity(self):
        return validity_report(self.config, self.options.threshold)


@dataclass(frozen=True)
class Column:
    unit: str
    func: object
    trace: bool = False
    protocol: bool = False


def _p_star(pt, thermal, deph):
    r = pt.rates
    return protocol_probability(r, thermal, deph, revival_time(r), pt.options.include_beta).p_up


COLUMNS = {
    "b0": Column("T", lambda p: p.config.field.b0),
    "omega0_2pi": Column("Hz", lambda p: p.config.trap.omega0 / TWO_PI),
    "tau": Column("s", lambda p: p.tau, trace=True),
    "tau_over_revival": Column("1", lambda p: p.tau / revival_time(p.rates), trace=True),
    "n_gamma": Column("1", lambda p: p.thermal.n_gamma),
    "t2": Column("s", lambda p: p.deph.t2),
    "omega_l_2pi": Column("Hz", lambda p: p.secular.omega_l / TWO_PI),
    "delta_2pi": Column("Hz", lambda p: p.secular.delta_q / TWO_PI),
    "omega_alpha_2pi": Column("Hz", lambda p: p.secular.omega_alpha / TWO_PI),
    "omega_beta_2pi": Column("Hz", lambda p: p.secular.omega_beta / TWO_PI),
    "omega_gamma_2pi": Column("Hz", lambda p: p.secular.omega_gamma / TWO_PI),
    "g_beta_2pi": Column("Hz", lambda p: p.secular.g_beta / TWO_PI),
    "g_gamma_2pi": Column("Hz", lambda p: p.secular.g_gamma / TWO_PI),
    "g_beta_over_omega_beta": Column("1", lambda p: p.secular.g_beta / p.secular.omega_beta),
    "g_gamma_over_omega_gamma": Column(
        "1", lambda p: p.secular.g_gamma / p.secular.omega_gamma),
    "freq_beta_2pi": Column("Hz", lambda p: p.rates.freq_beta / TWO_PI),
    "freq_gamma_2pi": Column("Hz", lambda p: p.rates.freq_gamma / TWO_PI),
    "chi_beta_2pi": Column("Hz", lambda p: p.rates.chi_beta / TWO_PI),
    "chi_gamma_2pi": Column("Hz", lambda p: p.rates.chi_gamma / TWO_PI),
    "ratio_gamma_beta": Column("1", lambda p: p.rates.freq_gamma / p.rates.freq_beta),
    "ratio_beta_gamma": Column("1", lambda p: p.rates.freq_beta / p.rates.freq_gamma),
    "delta_omega_beta_over_omega_beta": Column(
        "1", lambda p: p.rates.delta_omega_beta / p.secular.omega_beta),
    "beta_stable": Column("1", lambda p: float(p.rates.beta_stable)),
    "dispersive_beta": Column("1", lambda p: p.validity.dispersive_terms[0]),
    "dispersive_gamma": Column("1", lambda p: p.validity.dispersive_terms[1]),
    "dispersive_third": Column("1", lambda p: p.validity.dispersive_terms[2]),
    "bstar": Column("T", lambda p: find_bstar(p.config)),
    "revival_time": Column("s", lambda p: revival_time(p.rates)),
    "p_star": Column("1", lambda p, th, de: _p_star(p, th, de), protocol=True),
    "p_up": Column("1", None, trace=True, protocol=True),
    "p_down": Column("1", None, trace=True, protocol=True),
}


def _series_variants(spec):
    """(suffix, thermal, dephasing) for each protocol column variant."""
    o = spec.options
    base_thermal = ThermalSpec(n_gamma=o.n_gamma)
    base_deph = DephasingSpec.from_t2(o.t2)
    if o.series is None:
        return [("", base_thermal, base_deph)]
    out = []
    for v in o.series.values:
        if o.series.param == "n_gamma":
            out.append((f"_n_gamma={v:g}", ThermalSpec(n_gamma=float(v)), base_deph))
        else:
            out.append((f"_t2={v:g}", base_thermal, DephasingSpec.from_t2(float(v))))
    return out


def _header(spec):
    cols = []
    for name in spec.outputs:
        c = COLUMNS[name]
        if c.protocol:
            cols.extend((name + sfx, c.unit) for sfx, _, _ in _series_variants(spec))
        else:
            cols.append((name, c.unit))
    cols.append(("valid", "1"))
    return cols


def _row(pt, spec, variants):
    """Values for one point and the error that invalidated it, if any."""
    values, error = [], None
    for name in spec.outputs:
        c = COLUMNS[name]
        targets = variants if c.protocol else [None]
        for var in targets:
            try:
                if c.protocol:
                    _, thermal, deph = var
                    v = c.func(pt, thermal, deph)
                else:
                    v = c.func(pt)
                v = float(v)
            except (NvRotorError, ValueError, ArithmeticError) as exc:
                v = math.nan
                error = error or exc
            values.append(v)
    try:
        valid = pt.validity.dispersive_ok and error is None
    except (NvRotorError, ValueError, ArithmeticError) as exc:
        valid, error = False, error or exc
    if not all(math.isfinite(v) for v in values):
        valid = False
    values.append(1.0 if valid else 0.0)
    return values, error


def _point_inputs(spec):
    o = spec.options
    base_thermal = ThermalSpec(n_gamma=o.n_gamma)
    base_deph = DephasingSpec.from_t2(o.t2)
    xs = spec.range.values()
    v = spec.variable
    if v is Variable.B0:
        return [(spec.base.with_b0(float(x)), base_thermal, base_deph) for x in xs]
    if v is Variable.OMEGA0:
        return [(spec.base.with_omega0(float(x)), base_thermal, base_deph) for x in xs]
    if v is Variable.NGAMMA:
        return [(spec.base, ThermalSpec(n_gamma=float(x)), base_deph) for x in xs]
    if v is Variable.T2:
        return [(spec.base, base_thermal, DephasingSpec.from_t2(float(x))) for x in xs]
    if v is Variable.GRID2D:
        return [(spec.base.with_b0(float(b)).with_omega0(float(w)), base_thermal, base_deph)
                for b in xs for w in spec.range2.values()]
    raise AssertionError(v)


def _tau_rows(spec):
    o = spec.options
    variants = _series_variants(spec)
    rates = _Point(spec.base, variants[0][1], variants[0][2], o).rates
    taus = spec.range.values()
    if o.tau_unit == "revival":
        taus = taus * revival_time(rates)
    # traces are anchored at tau = 0 for branch continuity
    anchored = taus[0] != 0.0
    path = np.concatenate(([0.0], taus)) if anchored else taus
    traces = []
    for _sfx, thermal, deph in variants:
        pts = probability_trace(rates, thermal, deph, path, o.include_beta)
        traces.append(pts[1:] if anchored else pts)
    rows = []
    for i, t in enumerate(taus):
        pt = _Point(spec.base, variants[0][1], variants[0][2], o, tau=float(t))
        values = []
        for name in spec.outputs:
            c = COLUMNS[name]
            if name in ("p_up", "p_down"):
                values.extend(getattr(tr[i], name) for tr in traces)
            elif c.protocol:
                values.extend(c.func(pt, th, de) for _, th, de in variants)
            else:
                values.append(float(c.func(pt)))
        valid = pt.validity.dispersive_ok and all(math.isfinite(v) for v in values)
        rows.append(values + [1.0 if valid else 0.0])
    return rows, []


def run_sweep(spec: SweepSpec) -> Table:
    columns = _header(spec)
    if spec.variable is Variable.TAU:
        try:
            rows, errors = _tau_rows(spec)
        except (NvRotorError, ValueError, ArithmeticError) as exc:
            # a failing trace invalidates every row
            rows = [[math.nan] * (len(columns) - 1) + [0.0] for _ in range(spec.range.points)]
            errors = [(i, exc) for i in range(len(rows))]
    else:
        variants = _series_variants(spec)
        inputs = _point_inputs(spec)

        def evaluate(args):
            config, thermal, deph = args
            return _row(_Point(config, thermal, deph, spec.options), spec, variants)

        if spec.options.workers > 1:
            with ThreadPoolExecutor(max_workers=spec.options.workers) as pool:
                results = list(pool.map(evaluate, inputs))
        else:
            results = [evaluate(a) for a in inputs]
        rows = [r for r, _ in results]
        errors = [(i, e) for i, (_, e) in enumerate(results) if e is not None]
    return Table(columns=columns, rows=rows,
                 provenance=_provenance(spec) + _error_summary(errors))


# ---------------------------------------------------------------------------
# provenance


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _provenance(spec):
    s = spec.base
    o = spec.options
    lines = [
        f"nvrotor {__version__}",
        f"sweep: {spec.name}",
        f"variable: {spec.variable.value}",
        f"range: start={_fmt(spec.range.start)} stop={_fmt(spec.range.stop)} "
        f"points={spec.range.points} scale={spec.range.scale}",
    ]
    if spec.range2 is not None:
        r = spec.range2
        lines.append(f"range2 (omega0): start={_fmt(r.start)} stop={_fmt(r.stop)} "
                     f"points={r.points} scale={r.scale}")
    g, t, f = s.geometry, s.trap, s.field
    lines += [
        f"geometry: a={_fmt(g.a)} b={_fmt(g.b)} mass_density={_fmt(g.mass_density)}",
        f"trap: epsilon={_fmt(t.epsilon)} delta={_fmt(t.delta)} "
        f"udc_over_uac={_fmt(t.udc_over_uac)} omega0={_fmt(t.omega0)}",
        f"field: b0={_fmt(f.b0)} gamma_e={_fmt(f.gamma_e)} d_nv={_fmt(f.d_nv)}",
        f"options: include_beta={o.include_beta} "
        f"branch={o.branch.value if o.branch else 'auto'} n_gamma={_fmt(o.n_gamma)} "
        f"t2={_fmt(o.t2)} tau_unit={o.tau_unit} delta_floor={_fmt(o.delta_floor)} "
        f"threshold={_fmt(o.threshold)}",
    ]
    if o.series is not None:
        lines.append(f"series: {o.series.param} = "
                     + " ".join(_fmt(float(v)) for v in o.series.values))
    return lines


def _error_summary(errors):
    groups = {}
    for i, exc in errors:
        key = f"{type(exc).__name__}: {exc}" if len(errors) == 1 else type(exc).__name__
        groups.setdefault(key, []).append(i)
    lines = []
    for key, idx in groups.items():
        lines.append(f"flagged rows ({key}): {_ranges(idx)}")
    return lines


def _ranges(idx):
    parts, start, prev = [], idx[0], idx[0]
    for i in idx[1:] + [None]:
        if i is not None and i == prev + 1:
            prev = i
            continue
        parts.append(str(start) if start == prev else f"{start}-{prev}")
        if i is not None:
            start = prev = i
    return ",".join(parts)


# ---------------------------------------------------------------------------
# CSV


def _format_value(name, v):
    if name == "valid":
        return str(int(v))
    return "%.8e" % v


def format_table(t: Table) -> str:
    buf = io.StringIO()
    for line in t.provenance:
        buf.write(f"# {line}\n")
    buf.write(",".join(f"{n}[{u}]" for n, u in t.columns) + "\n")
    names = t.names
    for row in t.rows:
        buf.write(",".join(_format_value(n, v) for n, v in zip(names, row)) + "\n")
    return buf.getvalue()


def write_table(t: Table, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(format_table(t))
    except OSError as exc:
        raise OSError(f"cannot write table to {path}: {exc}") from exc


def read_table(path) -> Table:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    provenance = [ln[2:] if ln.startswith("# ") else ln[1:] for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise ValueError(f"{path}: no header row")
    columns = []
    for cell in next(csv.reader([body[0]])):
        name, _, unit = cell.partition("[")
        columns.append((name, unit.rstrip("]")))
    rows = [[float(x) for x in rec] for rec in csv.reader(body[1:])]
    return Table(columns=columns, rows=rows, provenance=provenance)


# ---------------------------------------------------------------------------
# figure presets

MT = 1e-3
MHZ = TWO_PI * 1e6

FIGURE_IDS = ("fig1c", "fig1d", "fig1e", "fig2c", "fig2d", "fig2e", "fig2f", "figS1",
              "figS2a", "figS2b", "figS2c", "figS2d", "figS3a", "figS3b", "figS3c")

DEFAULT_N_GAMMA_SERIES = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_T2_SERIES = (0.05e-3, 0.1e-3, 0.5e-3, 1e-3)


def _canonical_id(fig_id):
    key = str(fig_id).strip().lower()
    for f in FIGURE_IDS:
        if f.lower() == key:
            return f
    raise KeyError(f"unknown figure id {fig_id!r}; valid ids: {', '.join(FIGURE_IDS)}")


def preset(fig_id, base: SystemConfig | None = None, n_gamma_series=None,
           t2_series=None) -> SweepSpec:
    """Sweep reproducing one figure panel.

    ``base`` defaults to the reference parameter set at 90 mT; series values
    not fixed by the figure captions can be overridden.
    """
    fid = _canonical_id(fig_id)
    base = fig1_config() if base is None else base
    ng = tuple(n_gamma_series or DEFAULT_N_GAMMA_SERIES)
    t2s = tuple(t2_series or DEFAULT_T2_SERIES)
    wide = Range(1 * MT, 200 * MT, 400)
    p_star_range = Range(2 * MT, 90 * MT, 400, "log")
    around_revival = Range(0.9, 1.1, 401)

    def spec(variable, rng, outputs, range2=None, **opts):
        return SweepSpec(base=base, variable=variable, range=rng, outputs=outputs,
                         options=SweepOptions(**opts), range2=range2, name=fid)

    if fid == "fig1c":
        return spec("B0", wide, ("b0", "omega_beta_2pi", "omega_gamma_2pi", "omega_alpha_2pi"))
    if fid == "fig1d":
        return spec("B0", Range(90 * MT, 115 * MT, 501), ("b0", "delta_2pi"))
    if fid == "fig1e":
        return spec("B0", wide, ("b0", "g_beta_2pi", "g_gamma_2pi", "g_beta_over_omega_beta",
                                 "g_gamma_over_omega_gamma"))
    if fid == "fig2c":
        return spec("Tau", Range(0.0, 3.0, 601), ("tau", "tau_over_revival", "p_up", "p_down"),
                    include_beta=False, n_gamma=1.0, tau_unit="revival")
    if fid == "fig2d":
        return spec("B0", p_star_range, ("b0", "ratio_beta_gamma", "p_star"),
                    t2=0.5e-3, series=Series("n_gamma", ng))
    if fid == "fig2e":
        return spec("Tau", around_revival, ("tau", "tau_over_revival", "p_up"),
                    t2=0.5e-3, tau_unit="revival", series=Series("n_gamma", ng))
    if fid == "fig2f":
        return spec("Tau", around_revival, ("tau", "tau_over_revival", "p_up"),
                    n_gamma=100.0, tau_unit="revival", series=Series("t2", t2s))
    if fid == "figS1":
        return spec("B0", Range(90 * MT, 115 * MT, 1001),
                    ("b0", "dispersive_beta", "dispersive_gamma", "dispersive_third"))
    if fid == "figS2a":
        return spec("B0", Range(0.1 * MT, 100 * MT, 400, "log"),
                    ("b0", "freq_beta_2pi", "freq_gamma_2pi", "chi_beta_2pi", "chi_gamma_2pi"),
                    branch=Branch.POSITIVE_DELTA)
    if fid == "figS2b":
        return spec("Omega0", Range(0.5 * MHZ, 20 * MHZ, 100, "log"), ("omega0_2pi", "bstar"))
    if fid == "figS2c":
        return spec("B0", Range(105 * MT, 200 * MT, 400),
                    ("b0", "freq_beta_2pi", "freq_gamma_2pi", "chi_beta_2pi", "chi_gamma_2pi"),
                    branch=Branch.NEGATIVE_DELTA)
    if fid == "figS2d":
        return spec("B0", Range(105 * MT, 200 * MT, 400), ("b0", "ratio_gamma_beta"),
                    branch=Branch.NEGATIVE_DELTA)
    if fid == "figS3a":
        return spec("Grid2D", Range(1 * MT, 100 * MT, 60), ("b0", "omega0_2pi",
                    "delta_omega_beta_over_omega_beta", "beta_stable"),
                    range2=Range(0.5 * MHZ, 10 * MHZ, 60), branch=Branch.POSITIVE_DELTA)
    if fid == "figS3b":
        return spec("Grid2D", Range(2 * MT, 100 * MT, 40), ("b0", "omega0_2pi", "p_star"),
                    range2=Range(0.5 * MHZ, 10 * MHZ, 40), n_gamma=1000.0, t2=0.5e-3)
    if fid == "figS3c":
        return spec("B0", p_star_range, ("b0", "ratio_beta_gamma", "p_star"),
                    n_gamma=100.0, series=Series("t2", t2s))
    raise AssertionError(fid)


def with_options(spec: SweepSpec, **changes) -> SweepSpec:
    return replace(spec, options=replace(spec.options, **changes))
