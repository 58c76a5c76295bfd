"""Command-line driver: every theory map and simulation protocol as a subcommand.

Parameters resolve in four layers, later ones winning: built-in defaults,
``--preset``, ``--config`` (a JSON ExperimentConfig) and explicit flags. The
resolved config is embedded in every output file.

Exit codes: 0 success, 2 configuration error, 3 theory-domain error
(for example asking for a critical initialisation under additive noise),
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__, traceio
from ._backend import BACKEND
from .activations import Activation
from .errors import DomainError, FitError, NoCriticalInitError
from .meanfield import (
    FLOAT32_MAX,
    FLOAT32_TINY,
    InitSpec,
    NetworkShape,
    chi,
    correlation_fixed_point,
    correlation_step_general,
    correlation_step_relu_critical,
    correlation_trace,
    correlation_trace_relu_critical,
    critical_init,
    depth_scale,
    fit_depth_scale,
    overflow_depth,
    rectifier_slope,
    variance_step,
    variance_trace,
)
from .noise import NoiseSpec, second_moment
from .simulator import (
    SimConfig,
    empirical_correlation_map,
    empirical_correlation_traces,
    empirical_variance_map,
    empirical_variance_trace,
)

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_IO = 0, 2, 3, 4
OUTPUT_DIR_ENV = "NOISYPROP_OUTPUT_DIR"
COMMANDS = ("qmap", "dynamics", "cmap", "depth-scale", "overflow-grid", "critical-init")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _grid(start: float, stop: float, step: float) -> list[float]:
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(n)]


@dataclass
class ExperimentConfig:
    """Every parameter a subcommand reads.

    ``noise``, ``act`` and ``multipliers`` are lists; the series of a run are
    their Cartesian product. ``init`` is ``critical`` (rectifier critical
    tuple) or ``standard`` (sqrt(2/(1+alpha^2)) for rectifiers, (1, 0) for
    tanh); an explicit ``sigma_w`` overrides both. ``multipliers`` scale ``sigma_w``.
    """

    command: str = "dynamics"
    noise: list = field(default_factory=lambda: ["none"])
    act: list = field(default_factory=lambda: ["relu"])
    init: str = "critical"
    sigma_w: float | None = None
    sigma_b: float = 0.0
    multipliers: list = field(default_factory=lambda: [1.0])
    depth: int = 15
    width: int = 1000
    runs: int = 50
    inputs: int = 50
    seed: int = 0
    q0: float = 4.0
    q_max: float = 15.0
    q_step: float = 0.5
    c0: list = field(default_factory=lambda: [0.0, 0.5, 0.9])
    c_step: float = 0.02
    simulate: bool = False
    sweep: str = "dropout"
    sweep_values: list | None = None
    fit_c0: float = 1.0
    fit_floor: float = 3.0
    sigma_w2_min: float = 0.1
    sigma_w2_max: float = 2.5
    sigma_w2_count: int = 25
    precision: str = "float64"
    workers: int | None = None
    out: str | None = None
    format: str | None = None
    preset: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for name in ("noise", "act", "multipliers", "c0"):
            if not isinstance(getattr(self, name), list) or not getattr(self, name):
                raise ConfigError(f"{name} must be a non-empty list")
        if self.init not in ("critical", "standard"):
            raise ConfigError(f"init must be 'critical' or 'standard', got {self.init!r}")
        if self.sweep not in ("dropout", "gaussian"):
            raise ConfigError(f"sweep must be 'dropout' or 'gaussian', got {self.sweep!r}")
        if self.format not in (None, "csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        for name in ("depth", "width", "runs", "inputs", "sigma_w2_count"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.q_step <= 0 or self.c_step <= 0:
            raise ConfigError("grid steps must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


# Named parameter sets for the standard experiments. "fig4" has no canonical
# noise levels; it reuses the two fig3 levels plus the noiseless reference.
PRESETS: dict[str, dict] = {
    "fig2": dict(act=["tanh", "relu"], noise=["none", "add:gaussian(1)"], init="standard",
                 depth=15, width=1000, runs=50, inputs=50, q0=4.0, q_max=15.0, q_step=0.5),
    "fig3-dropout": dict(act=["relu"], noise=["mult:dropout(0.6)"], init="critical",
                         multipliers=[0.85, 1.0, 1.15], depth=15, width=1000, runs=50,
                         inputs=50, q0=4.0),
    "fig3-gaussian": dict(act=["relu"], noise=["mult:gaussian(0.25)"], init="critical",
                          multipliers=[0.75, 1.0, 1.25], depth=15, width=1000, runs=50,
                          inputs=50, q0=4.0),
    "fig4": dict(act=["relu"], noise=["none", "mult:dropout(0.6)", "mult:gaussian(0.25)"],
                 init="critical", c0=[0.0, 0.5, 0.9], depth=15, width=1000, runs=50,
                 inputs=50, q0=4.0),
    "fig5-dropout": dict(act=["relu"], sweep="dropout", init="critical", depth=40, width=1000,
                         runs=50, inputs=50, q0=4.0, fit_c0=1.0, fit_floor=3.0),
    "fig5-gaussian": dict(act=["relu"], sweep="gaussian", init="critical", depth=40, width=1000,
                          runs=50, inputs=50, q0=4.0, fit_c0=1.0, fit_floor=3.0),
    "fig6": dict(act=["relu"], noise=["mult:dropout(0.6)"], depth=1000, width=1000, runs=1,
                 inputs=128, q0=1.0, sigma_w2_min=0.1, sigma_w2_max=2.5, sigma_w2_count=25,
                 precision="float32"),
}


# ---------------------------------------------------------------------------
# resolution helpers
# ---------------------------------------------------------------------------


def _parse_noise(text: str) -> NoiseSpec:
    try:
        return NoiseSpec.parse(text)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def _parse_act(text: str) -> Activation:
    try:
        return Activation.parse(text)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def resolve_init(cfg: ExperimentConfig, noise: NoiseSpec, act: Activation,
                 multiplier: float = 1.0) -> InitSpec:
    """Base init for ``(noise, act)``, with ``sigma_w`` scaled by ``multiplier``."""
    if cfg.sigma_w is not None:
        base = InitSpec(cfg.sigma_w, cfg.sigma_b)
    elif cfg.init == "critical":
        base = critical_init(noise, act)
        base = InitSpec(base.sigma_w, cfg.sigma_b)
    elif act.is_rectifier:
        base = InitSpec(math.sqrt(2.0 / (1.0 + act.alpha**2)), cfg.sigma_b)
    else:
        base = InitSpec(1.0, cfg.sigma_b)
    return InitSpec(base.sigma_w * multiplier, base.sigma_b)


def _series_specs(cfg: ExperimentConfig):
    noises = [_parse_noise(n) for n in cfg.noise]
    acts = [_parse_act(a) for a in cfg.act]
    for act in acts:
        for noise in noises:
            for m in cfg.multipliers:
                yield act, noise, float(m)


def _sim_config(cfg: ExperimentConfig, init, noise, act, depth=None, precision=None) -> SimConfig:
    workers = cfg.workers if cfg.workers is not None else min(4, os.cpu_count() or 1)
    return SimConfig(NetworkShape.constant(cfg.width, depth or cfg.depth), init, noise, act,
                     runs=cfg.runs, seed=cfg.seed, inputs=cfg.inputs,
                     precision=precision or cfg.precision, workers=workers)


def _series_name(act, noise, multiplier) -> str:
    return f"{act}|{noise}|x{multiplier:g}"


def _series_attrs(init: InitSpec, act, noise, multiplier) -> dict:
    return {"activation": str(act), "noise": str(noise), "multiplier": multiplier,
            "sigma_w": init.sigma_w, "sigma_b": init.sigma_b}


def _merge_sim(columns: dict, emp) -> None:
    columns["mean"] = list(emp.mean)
    columns["std"] = list(emp.std)
    columns["n_runs"] = [emp.n_runs] * len(emp.mean)


# ---------------------------------------------------------------------------
# subcommands; each returns a list of series dicts
# ---------------------------------------------------------------------------


def cmd_qmap(cfg: ExperimentConfig) -> list:
    grid = _grid(0.0, cfg.q_max, cfg.q_step)
    out = []
    for act, noise, m in _series_specs(cfg):
        init = resolve_init(cfg, noise, act, m)
        cols = {"q_in": grid, "value": [variance_step(q, init, noise, act) for q in grid]}
        if cfg.simulate:
            _merge_sim(cols, empirical_variance_map(_sim_config(cfg, init, noise, act, 1), grid))
        out.append(traceio.series(_series_name(act, noise, m), cols,
                                  **_series_attrs(init, act, noise, m)))
    return out


def cmd_dynamics(cfg: ExperimentConfig) -> list:
    out = []
    for act, noise, m in _series_specs(cfg):
        init = resolve_init(cfg, noise, act, m)
        tr = variance_trace(cfg.q0, cfg.depth, init, noise, act)
        cols = traceio.theory_columns(tr)
        if cfg.simulate:
            _merge_sim(cols, empirical_variance_trace(_sim_config(cfg, init, noise, act), cfg.q0))
        out.append(traceio.series(_series_name(act, noise, m), cols,
                                  **_series_attrs(init, act, noise, m)))
    return out


def _closed_form_mu2(cfg, init, noise, act):
    """mu2 when the critical ReLU closed forms apply, else None."""
    if act.kind != "relu" or noise.is_additive or init.sigma_b != 0.0:
        return None
    if abs(rectifier_slope(init, noise, act) - 1.0) > 1e-12:
        return None
    return second_moment(noise)


def cmd_cmap(cfg: ExperimentConfig) -> list:
    grid = _grid(0.0, 1.0, cfg.c_step)
    out = []
    for act, noise, m in _series_specs(cfg):
        init = resolve_init(cfg, noise, act, m)
        mu2 = _closed_form_mu2(cfg, init, noise, act)
        attrs = _series_attrs(init, act, noise, m)
        if mu2 is not None:
            values = [correlation_step_relu_critical(c, mu2) for c in grid]
            fp = correlation_fixed_point(mu2)
            attrs.update(mu2=mu2, c_star=fp.value, chi=chi(fp.value, mu2), xi=depth_scale(mu2))
            traces = [correlation_trace_relu_critical(c0, cfg.depth, mu2) for c0 in cfg.c0]
        else:
            values = [correlation_step_general(c, cfg.q0, cfg.q0, init, noise, act)[0] for c in grid]
            attrs.update(mu2=second_moment(noise), c_star=None, chi=None, xi=None)
            traces = [correlation_trace(c0, cfg.q0, cfg.depth, init, noise, act) for c0 in cfg.c0]
        name = _series_name(act, noise, m)
        cols = {"c_in": grid, "value": values}
        sim_traces = None
        if cfg.simulate:
            _merge_sim(cols, empirical_correlation_map(_sim_config(cfg, init, noise, act, 1),
                                                       grid, cfg.q0))
            sim_traces = empirical_correlation_traces(_sim_config(cfg, init, noise, act),
                                                      cfg.c0, cfg.q0)
        out.append(traceio.series(f"{name}|map", cols, kind="map", **attrs))
        for k, (c0, tr) in enumerate(zip(cfg.c0, traces)):
            tcols = traceio.theory_columns(tr)
            if sim_traces is not None:
                _merge_sim(tcols, sim_traces[k])
            out.append(traceio.series(f"{name}|c0={c0:g}", tcols, kind="trace", c0=c0, **attrs))
    return out


def _sweep_noises(cfg: ExperimentConfig) -> list:
    if cfg.sweep == "dropout":
        values = cfg.sweep_values or _grid(0.1, 0.9, 0.1)
        return [(v, NoiseSpec.dropout(v)) for v in values]
    values = cfg.sweep_values or _grid(0.1, 1.9, 0.15)
    return [(v, NoiseSpec.gaussian(v)) for v in values]


def _fit_or_nan(trace, c_star, **kw):
    try:
        f = fit_depth_scale(trace, c_star, **kw)
    except FitError:
        return math.nan, math.nan, 0
    return f.xi, f.r_squared, len(f.layers)


def cmd_depth_scale(cfg: ExperimentConfig) -> list:
    act = _parse_act(cfg.act[0])
    if act.kind != "relu":
        raise DomainError("depth-scale sweeps use the critical ReLU closed forms; use --act relu")
    cols = {k: [] for k in ("param", "mu2", "c_star", "chi", "xi", "xi_fit_theory",
                            "r2_theory", "n_fit_theory")}
    if cfg.simulate:
        cols.update(xi_fit_sim=[], r2_sim=[], n_fit_sim=[])
    for value, noise in _sweep_noises(cfg):
        mu2 = second_moment(noise)
        c_star = correlation_fixed_point(mu2).value
        xi_th = depth_scale(mu2)
        tr = correlation_trace_relu_critical(cfg.fit_c0, cfg.depth, mu2)
        fit = _fit_or_nan(tr, c_star)
        for key, v in zip(("param", "mu2", "c_star", "chi", "xi"),
                          (value, mu2, c_star, chi(c_star, mu2), xi_th)):
            cols[key].append(v)
        cols["xi_fit_theory"].append(fit[0])
        cols["r2_theory"].append(fit[1])
        cols["n_fit_theory"].append(fit[2])
        if cfg.simulate:
            init = resolve_init(cfg, noise, act)
            emp = empirical_correlation_traces(_sim_config(cfg, init, noise, act),
                                               [cfg.fit_c0], cfg.q0)[0]
            sfit = _fit_or_nan(emp, c_star, floor=cfg.fit_floor * emp.stderr, contiguous=True)
            cols["xi_fit_sim"].append(sfit[0])
            cols["r2_sim"].append(sfit[1])
            cols["n_fit_sim"].append(sfit[2])
    return [traceio.series(f"depth-scale|{cfg.sweep}", cols, sweep=cfg.sweep,
                           activation=str(act))]


def cmd_overflow_grid(cfg: ExperimentConfig) -> list:
    act = _parse_act(cfg.act[0])
    noise = _parse_noise(cfg.noise[0])
    grid = list(np.linspace(cfg.sigma_w2_min, cfg.sigma_w2_max, cfg.sigma_w2_count))
    cols = {k: [] for k in ("sigma_w2", "predicted_layer", "K", "observed_layer", "observed_kind")}
    traces = []
    for s2 in grid:
        init = InitSpec.from_variances(float(s2), cfg.sigma_b**2)
        pred = overflow_depth(init, noise, cfg.q0, act=act)
        g = rectifier_slope(init, noise, act)
        K = None if math.isinf(pred) else (FLOAT32_MAX if g > 1.0 else FLOAT32_TINY)
        emp = empirical_variance_trace(_sim_config(cfg, init, noise, act, precision="float32"),
                                       cfg.q0, stop_on_instability=True)
        if emp.overflow_layer is not None:
            obs, kind = emp.overflow_layer, "overflow"
        elif emp.underflow_layer is not None:
            obs, kind = emp.underflow_layer, "underflow"
        else:
            obs, kind = None, "none"
        cols["sigma_w2"].append(float(s2))
        cols["predicted_layer"].append(pred)
        cols["K"].append(K)
        cols["observed_layer"].append(obs)
        cols["observed_kind"].append(kind)
        traces.append({"sigma_w2": float(s2), "mean": list(emp.mean)})
    return [traceio.series("overflow-grid", cols, noise=str(noise), activation=str(act),
                           layer_means=traces)]


def cmd_critical_init(cfg: ExperimentConfig) -> list:
    act = _parse_act(cfg.act[0])
    cols = {k: [] for k in ("noise", "mu2", "sigma_w", "sigma_b", "sigma_w2")}
    failures = []
    for text in cfg.noise:
        noise = _parse_noise(text)
        try:
            init = critical_init(noise, act)
        except NoCriticalInitError as exc:
            failures.append(exc)
            print(f"{noise}: no critical initialisation. {exc}", file=sys.stderr)
            continue
        print(f"{noise}: sigma_w={init.sigma_w!r} sigma_b={init.sigma_b!r}")
        cols["noise"].append(str(noise))
        cols["mu2"].append(second_moment(noise))
        cols["sigma_w"].append(init.sigma_w)
        cols["sigma_b"].append(init.sigma_b)
        cols["sigma_w2"].append(init.sigma_w2)
    if failures:
        raise failures[0]
    return [traceio.series("critical-init", cols, activation=str(act))]


HANDLERS = {
    "qmap": cmd_qmap,
    "dynamics": cmd_dynamics,
    "cmap": cmd_cmap,
    "depth-scale": cmd_depth_scale,
    "overflow-grid": cmd_overflow_grid,
    "critical-init": cmd_critical_init,
}


# ---------------------------------------------------------------------------
# argument parsing and output
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisyprop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"noisyprop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--preset", choices=sorted(PRESETS), default=S)
        p.add_argument("--config", default=S, help="JSON ExperimentConfig file")
        p.add_argument("--noise", action="append", default=S,
                       help="noise spec such as mult:dropout(0.6); repeatable")
        p.add_argument("--act", action="append", default=S, help="relu, tanh or prelu:<a>; repeatable")
        p.add_argument("--init", choices=("critical", "standard"), default=S)
        p.add_argument("--sigma-w", type=float, dest="sigma_w", default=S)
        p.add_argument("--sigma-w2", type=float, dest="sigma_w2", default=S)
        p.add_argument("--sigma-b", type=float, dest="sigma_b", default=S)
        p.add_argument("--multiplier", type=float, action="append", dest="multipliers", default=S)
        p.add_argument("--depth", type=int, default=S)
        p.add_argument("--width", type=int, default=S)
        p.add_argument("--runs", type=int, default=S)
        p.add_argument("--inputs", type=int, default=S)
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--q0", type=float, default=S)
        p.add_argument("--q-max", type=float, dest="q_max", default=S)
        p.add_argument("--q-step", type=float, dest="q_step", default=S)
        p.add_argument("--c0", type=float, action="append", default=S)
        p.add_argument("--c-step", type=float, dest="c_step", default=S)
        p.add_argument("--simulate", action="store_true", default=S)
        p.add_argument("--sweep", choices=("dropout", "gaussian"), default=S)
        p.add_argument("--sweep-value", type=float, action="append", dest="sweep_values", default=S)
        p.add_argument("--fit-c0", type=float, dest="fit_c0", default=S)
        p.add_argument("--fit-floor", type=float, dest="fit_floor", default=S)
        p.add_argument("--sigma-w2-min", type=float, dest="sigma_w2_min", default=S)
        p.add_argument("--sigma-w2-max", type=float, dest="sigma_w2_max", default=S)
        p.add_argument("--sigma-w2-count", type=int, dest="sigma_w2_count", default=S)
        p.add_argument("--precision", choices=("float64", "float32"), default=S)
        p.add_argument("--workers", type=int, default=S)
        p.add_argument("--out", default=S, help="output path; '-' for stdout")
        p.add_argument("--format", choices=("csv", "json"), default=S)
    return parser


def config_from_args(argv) -> ExperimentConfig:
    """Resolve defaults, preset, config file and flags into one config."""
    try:
        ns = vars(build_parser().parse_args(argv))
    except SystemExit as exc:
        if exc.code in (0, None):
            raise
        raise ConfigError("invalid command line") from None
    data = {"command": ns.pop("command")}
    preset = ns.pop("preset", None)
    if preset is not None:
        data.update(PRESETS[preset])
        data["preset"] = preset
    path = ns.pop("config", None)
    if path is not None:
        with open(path) as fh:
            from_file = ExperimentConfig.from_json(fh.read()).to_dict()
        from_file.pop("command", None)
        data.update({k: v for k, v in from_file.items() if v is not None or k not in data})
    if "sigma_w2" in ns:
        if "sigma_w" in ns:
            raise ConfigError("give --sigma-w or --sigma-w2, not both")
        s2 = ns.pop("sigma_w2")
        if not s2 > 0:
            raise ConfigError("--sigma-w2 must be positive")
        ns["sigma_w"] = math.sqrt(s2)
    data.update(ns)
    return ExperimentConfig.from_dict(data)


def _output_path(cfg: ExperimentConfig, fmt: str):
    if cfg.out is not None:
        return cfg.out
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base:
        return os.path.join(base, f"{cfg.command}.{fmt}")
    return None


def render(cfg: ExperimentConfig, series_list: list) -> tuple[str, str]:
    fmt = cfg.format or ("csv" if len(series_list) == 1 else "json")
    meta = {"config": cfg.to_dict(), "version": __version__, "seed": cfg.seed, "backend": BACKEND}
    if fmt == "json":
        return fmt, traceio.render_json(series_list, meta)
    if len(series_list) != 1:
        raise ConfigError(f"{cfg.command} produced {len(series_list)} series; CSV holds one, use --format json")
    s = series_list[0]
    meta["series"] = {k: v for k, v in s.items() if k not in ("columns", "layer_means")}
    return fmt, traceio.render_csv(s["columns"], meta)


def run(cfg: ExperimentConfig) -> None:
    series_list = HANDLERS[cfg.command](cfg)
    if cfg.command == "critical-init" and cfg.out is None and not os.environ.get(OUTPUT_DIR_ENV):
        return
    fmt, text = render(cfg, series_list)
    traceio.atomic_write(_output_path(cfg, fmt), text)


def main(argv=None) -> int:
    try:
        cfg = config_from_args(argv)
    except ConfigError as exc:
        print(f"noisyprop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"noisyprop: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        run(cfg)
    except ConfigError as exc:
        print(f"noisyprop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"noisyprop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"noisyprop: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
