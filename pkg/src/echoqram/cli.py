"""Scenario runner: validates a JSON config, executes one scenario, and
writes figure-ready CSV or JSON artifacts.

Subcommands map one-to-one onto scenarios:

    spectra         transfer and blockade efficiency spectra on a grid
    check-matching  impedance-matching report for a parameter set
    store           single storage integration, full trace export
    echo            storage -> inversion -> retrieval cycle
    blockade        echo cycle with a blockaded read stage + phase check
    address         time-bin addressing protocol state
    sweep           echo-cycle parameter sweep (optionally two axes)

Exit codes: 0 success, 2 config error, 3 numerical failure.  Every
artifact embeds the sha256 of the raw config text and the tool version.
All computation is deterministic; --seed is reserved and unused.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .params import (SystemParams, ParameterError, check_matching,
                     cooperativities, params_from_dict, params_digest,
                     solve_matched_params)
from .spectral import FrequencyGrid, spectral_efficiency
from .dynamics import (PulseSpec, IntegrationError, ensemble_for_params,
                       integrate_storage, run_echo_cycle, blockade_phase_check)
from .addressing import (AddressSpec, BranchEfficiencies, run_addressing,
                         compose_with_dynamics, state_table, state_to_dict,
                         ProtocolError)

OUT_DIR_ENV = "ECHOQRAM_OUT_DIR"

SWEEP_PARAMETERS = ("pulse_duration", "tau", "t2", "g1", "delta_c")


class ConfigError(Exception):
    """Config rejected; carries a source anchor when one is known."""

    def __init__(self, message: str, source: str = "config",
                 line: int | None = None, col: int | None = None):
        self.message = message
        self.source = source
        self.line = line
        self.col = col
        anchor = source
        if line is not None:
            anchor += f":{line}"
            if col is not None:
                anchor += f":{col}"
        super().__init__(f"{anchor}: {message}")


class Scenario(str, Enum):
    SPECTRA = "spectra"
    CHECK_MATCHING = "check_matching"
    STORE = "store"
    ECHO_CYCLE = "echo_cycle"
    BLOCKADE = "blockade"
    ADDRESS = "address"
    SWEEP = "sweep"


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]
    curve_parameter: str | None = None
    curve_values: tuple[float, ...] = ()
    tau_over_duration: float = 5.0


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    params: SystemParams | None = None
    read_params: SystemParams | None = None
    pulse: PulseSpec | None = None
    grid_span: float = 3.0
    grid_n: int = 1201
    grid_center: float = 0.0
    tau: float | None = None
    t_span: tuple[float, float] | None = None
    n_sim: int = 801
    span: float | None = None
    scheme: str = "quantile"
    solver_tol: float = 1e-9
    address: AddressSpec | None = None
    efficiencies: BranchEfficiencies | None = None
    eff_from_dynamics: bool = False
    out_path: str | None = None
    out_format: str | None = None


# -------------------------------------------------------------- config parsing

def _line_of_key(text: str, key: str) -> int | None:
    """Best-effort line anchor: first line that mentions the quoted key."""
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _check_keys(obj: dict, allowed: set[str], required: set[str],
                path: str, text: str, source: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(
            f"unknown key '{path}{k}' (accepted here: {', '.join(sorted(allowed))})",
            source, _line_of_key(text, k))
    missing = required - set(obj)
    if missing:
        raise ConfigError(
            f"missing required key '{path}{sorted(missing)[0]}'", source)


def _as_complex(v, path: str, text: str, source: str) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if (isinstance(v, list) and len(v) == 2
            and all(isinstance(x, (int, float)) for x in v)):
        return complex(v[0], v[1])
    raise ConfigError(f"'{path}' must be a number or [re, im] pair", source)


def _build_params(obj, path: str, text: str, source: str) -> SystemParams:
    if not isinstance(obj, dict):
        raise ConfigError(f"'{path}' must be an object", source)
    if "matched" in obj:
        inner = obj["matched"]
        _check_keys(obj, {"matched"}, {"matched"}, path + ".", text, source)
        allowed = {"kappa", "c_atom", "gamma", "n_atoms", "delta_c", "t2"}
        _check_keys(inner, allowed, {"kappa", "c_atom"}, path + ".matched.",
                    text, source)
        kwargs = {k: inner[k] for k in allowed - {"kappa", "c_atom"} if k in inner}
        if "t2" in kwargs and kwargs["t2"] in ("inf", "Infinity"):
            kwargs["t2"] = math.inf
        try:
            return solve_matched_params(inner["kappa"], inner["c_atom"], **kwargs)
        except (ParameterError, TypeError) as exc:
            raise ConfigError(f"'{path}.matched': {exc}", source,
                              _line_of_key(text, "matched")) from exc
    try:
        return params_from_dict(obj)
    except ParameterError as exc:
        # surface the offending key's line when the message names one
        line = None
        for k in obj:
            if f"'{k}'" in str(exc) or str(exc).startswith(k):
                line = _line_of_key(text, k)
                break
        raise ConfigError(f"'{path}': {exc}", source, line) from exc


def _build_pulse(obj, text: str, source: str) -> PulseSpec:
    allowed = {"shape", "duration", "center", "carrier_detuning"}
    _check_keys(obj, allowed, {"duration"}, "pulse.", text, source)
    try:
        return PulseSpec(**obj)
    except (ParameterError, ValueError) as exc:
        raise ConfigError(f"'pulse': {exc}", source,
                          _line_of_key(text, "pulse")) from exc


def parse_scenario_config(text: str, source: str = "config") -> ScenarioConfig:
    """Validate raw JSON text into a ScenarioConfig.

    Unknown keys are rejected at every nesting level; messages carry the
    source name and, where determinable, a line anchor.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", source,
                          exc.lineno, exc.colno) from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", source)

    top_allowed = {"scenario", "params", "read_params", "pulse", "grid", "tau",
                   "t_span", "n_sim", "span", "scheme", "solver_tol",
                   "address", "efficiencies", "sweep", "output"}
    _check_keys(doc, top_allowed, {"scenario"}, "", text, source)

    try:
        scenario = Scenario(doc["scenario"])
    except ValueError:
        raise ConfigError(
            f"unknown scenario '{doc['scenario']}' (one of: "
            f"{', '.join(s.value for s in Scenario)})",
            source, _line_of_key(text, "scenario")) from None

    kw: dict = {"scenario": scenario}

    if "params" in doc:
        kw["params"] = _build_params(doc["params"], "params", text, source)
    if "read_params" in doc:
        kw["read_params"] = _build_params(doc["read_params"], "read_params",
                                          text, source)
    if "pulse" in doc:
        kw["pulse"] = _build_pulse(doc["pulse"], text, source)
    if "grid" in doc:
        _check_keys(doc["grid"], {"span", "n", "center"}, {"span", "n"},
                    "grid.", text, source)
        kw["grid_span"] = float(doc["grid"]["span"])
        kw["grid_n"] = int(doc["grid"]["n"])
        kw["grid_center"] = float(doc["grid"].get("center", 0.0))
    if "tau" in doc:
        kw["tau"] = float(doc["tau"])
    if "t_span" in doc:
        ts = doc["t_span"]
        if not (isinstance(ts, list) and len(ts) == 2):
            raise ConfigError("'t_span' must be [t0, t1]", source,
                              _line_of_key(text, "t_span"))
        kw["t_span"] = (float(ts[0]), float(ts[1]))
    for key, cast in (("n_sim", int), ("span", float), ("scheme", str),
                      ("solver_tol", float)):
        if key in doc:
            kw[key] = cast(doc[key])
    if "address" in doc:
        _check_keys(doc["address"], {"amplitudes", "bin_spacing", "bin_duration"},
                    {"amplitudes"}, "address.", text, source)
        amps = doc["address"]["amplitudes"]
        if not isinstance(amps, list) or not amps:
            raise ConfigError("'address.amplitudes' must be a nonempty list",
                              source, _line_of_key(text, "amplitudes"))
        parsed = tuple(_as_complex(a, f"address.amplitudes[{i}]", text, source)
                       for i, a in enumerate(amps))
        try:
            kw["address"] = AddressSpec(
                parsed,
                bin_spacing=doc["address"].get("bin_spacing", 1.0),
                bin_duration=doc["address"].get("bin_duration", 0.05))
        except ParameterError as exc:
            raise ConfigError(f"'address': {exc}", source,
                              _line_of_key(text, "address")) from exc
    if "efficiencies" in doc:
        eobj = doc["efficiencies"]
        if eobj == {"from_dynamics": True}:
            kw["eff_from_dynamics"] = True
        else:
            allowed = {"transfer_amplitude", "blockade_reflection_amplitude",
                       "leakage_amplitude"}
            _check_keys(eobj, allowed | {"from_dynamics"}, set(),
                        "efficiencies.", text, source)
            if "from_dynamics" in eobj:
                raise ConfigError(
                    "'efficiencies.from_dynamics' must be exactly "
                    '{"from_dynamics": true} with no other keys',
                    source, _line_of_key(text, "from_dynamics"))
            try:
                kw["efficiencies"] = BranchEfficiencies(**{
                    k: _as_complex(v, f"efficiencies.{k}", text, source)
                    for k, v in eobj.items()})
            except ParameterError as exc:
                raise ConfigError(f"'efficiencies': {exc}", source,
                                  _line_of_key(text, "efficiencies")) from exc
    if "output" in doc:
        _check_keys(doc["output"], {"path", "format"}, set(), "output.",
                    text, source)
        kw["out_path"] = doc["output"].get("path")
        fmt = doc["output"].get("format")
        if fmt is not None and fmt not in ("csv", "json"):
            raise ConfigError(f"output.format must be csv or json, got '{fmt}'",
                              source, _line_of_key(text, "format"))
        kw["out_format"] = fmt

    sweep = None
    if "sweep" in doc:
        sobj = doc["sweep"]
        allowed = {"parameter", "values", "curve_parameter", "curve_values",
                   "tau_over_duration"}
        _check_keys(sobj, allowed, {"parameter", "values"}, "sweep.",
                    text, source)
        parameter = sobj["parameter"]
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigError(
                f"sweep parameter '{parameter}' not allowed (whitelist: "
                f"{', '.join(SWEEP_PARAMETERS)})",
                source, _line_of_key(text, "parameter"))
        values = sobj["values"]
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep.values must be a nonempty list", source,
                              _line_of_key(text, "values"))
        curve_parameter = sobj.get("curve_parameter")
        curve_values = sobj.get("curve_values", [])
        if curve_parameter is not None:
            if curve_parameter not in SWEEP_PARAMETERS:
                raise ConfigError(
                    f"sweep curve_parameter '{curve_parameter}' not allowed "
                    f"(whitelist: {', '.join(SWEEP_PARAMETERS)})",
                    source, _line_of_key(text, "curve_parameter"))
            if curve_parameter == parameter:
                raise ConfigError("sweep.curve_parameter must differ from "
                                  "sweep.parameter", source,
                                  _line_of_key(text, "curve_parameter"))
            if not curve_values:
                raise ConfigError("sweep.curve_values must be nonempty when "
                                  "curve_parameter is set", source,
                                  _line_of_key(text, "curve_parameter"))
        elif curve_values:
            raise ConfigError("sweep.curve_values without curve_parameter",
                              source, _line_of_key(text, "curve_values"))
        sweep = SweepSpec(parameter=parameter,
                          values=tuple(float(v) for v in values),
                          curve_parameter=curve_parameter,
                          curve_values=tuple(float(v) for v in curve_values),
                          tau_over_duration=float(
                              sobj.get("tau_over_duration", 5.0)))
        if parameter == "pulse_duration" and "tau" in doc:
            raise ConfigError(
                "sweeping pulse_duration fixes tau = tau_over_duration * "
                "duration; remove the explicit 'tau'",
                source, _line_of_key(text, "tau"))

    cfg = ScenarioConfig(**kw)
    _validate_scenario_fields(cfg, sweep, text, source)
    object.__setattr__(cfg, "_sweep", sweep)  # carried separately, frozen dataclass
    return cfg


def _validate_scenario_fields(cfg: ScenarioConfig, sweep, text: str,
                              source: str) -> None:
    sc = cfg.scenario
    need_params = sc in (Scenario.SPECTRA, Scenario.CHECK_MATCHING,
                         Scenario.STORE, Scenario.ECHO_CYCLE,
                         Scenario.BLOCKADE, Scenario.SWEEP)
    if need_params and cfg.params is None:
        raise ConfigError(f"scenario '{sc.value}' requires 'params'", source)
    if sc in (Scenario.STORE, Scenario.ECHO_CYCLE, Scenario.BLOCKADE,
              Scenario.SWEEP) and cfg.pulse is None:
        raise ConfigError(f"scenario '{sc.value}' requires 'pulse'", source)
    if sc in (Scenario.ECHO_CYCLE, Scenario.BLOCKADE) and cfg.tau is None:
        raise ConfigError(f"scenario '{sc.value}' requires 'tau'", source)
    if sc is Scenario.BLOCKADE:
        if cfg.read_params is None:
            raise ConfigError(
                "scenario 'blockade' requires 'read_params' with a coupled "
                "control atom (g1 > 0)", source)
        if cfg.read_params.g1 == 0:
            raise ConfigError("'read_params.g1' must be > 0 for a blockade run",
                              source, _line_of_key(text, "read_params"))
    if sc is Scenario.ADDRESS:
        if cfg.address is None:
            raise ConfigError("scenario 'address' requires 'address'", source)
        if cfg.eff_from_dynamics:
            if cfg.params is None or cfg.tau is None:
                raise ConfigError(
                    "efficiencies.from_dynamics needs 'params' and 'tau'",
                    source)
    if sc is Scenario.SWEEP and sweep is None:
        raise ConfigError("scenario 'sweep' requires 'sweep'", source)
    if sweep is not None and sc is not Scenario.SWEEP:
        raise ConfigError(f"'sweep' given but scenario is '{sc.value}'", source)
    if sweep is not None and cfg.tau is None \
            and sweep.parameter not in ("pulse_duration", "tau") \
            and sweep.curve_parameter not in ("pulse_duration", "tau"):
        raise ConfigError("sweep needs 'tau' unless pulse_duration or tau "
                          "is swept (those set the delay per point)", source)


def serialize_config(cfg: ScenarioConfig) -> str:
    """Canonical JSON for a validated config; parse(serialize(x)) == x."""
    doc: dict = {"scenario": cfg.scenario.value}
    if cfg.params is not None:
        doc["params"] = cfg.params.to_dict()
    if cfg.read_params is not None:
        doc["read_params"] = cfg.read_params.to_dict()
    if cfg.pulse is not None:
        doc["pulse"] = {"shape": cfg.pulse.shape.value,
                        "duration": cfg.pulse.duration,
                        "center": cfg.pulse.center,
                        "carrier_detuning": cfg.pulse.carrier_detuning}
    if cfg.scenario is Scenario.SPECTRA:
        doc["grid"] = {"span": cfg.grid_span, "n": cfg.grid_n,
                       "center": cfg.grid_center}
    if cfg.tau is not None:
        doc["tau"] = cfg.tau
    if cfg.t_span is not None:
        doc["t_span"] = list(cfg.t_span)
    doc["n_sim"] = cfg.n_sim
    if cfg.span is not None:
        doc["span"] = cfg.span
    doc["scheme"] = cfg.scheme
    doc["solver_tol"] = cfg.solver_tol
    if cfg.address is not None:
        doc["address"] = {
            "amplitudes": [[a.real, a.imag] for a in cfg.address.amplitudes],
            "bin_spacing": cfg.address.bin_spacing,
            "bin_duration": cfg.address.bin_duration}
    if cfg.eff_from_dynamics:
        doc["efficiencies"] = {"from_dynamics": True}
    elif cfg.efficiencies is not None:
        e = cfg.efficiencies
        doc["efficiencies"] = {
            "transfer_amplitude": [complex(e.transfer_amplitude).real,
                                   complex(e.transfer_amplitude).imag],
            "blockade_reflection_amplitude": [
                complex(e.blockade_reflection_amplitude).real,
                complex(e.blockade_reflection_amplitude).imag],
            "leakage_amplitude": [complex(e.leakage_amplitude).real,
                                  complex(e.leakage_amplitude).imag]}
    sweep = getattr(cfg, "_sweep", None)
    if sweep is not None:
        doc["sweep"] = {"parameter": sweep.parameter,
                        "values": list(sweep.values),
                        "tau_over_duration": sweep.tau_over_duration}
        if sweep.curve_parameter is not None:
            doc["sweep"]["curve_parameter"] = sweep.curve_parameter
            doc["sweep"]["curve_values"] = list(sweep.curve_values)
    if cfg.out_path is not None or cfg.out_format is not None:
        doc["output"] = {}
        if cfg.out_path is not None:
            doc["output"]["path"] = cfg.out_path
        if cfg.out_format is not None:
            doc["output"]["format"] = cfg.out_format
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ scenarios

def _artifact_meta(cfg_text: str, p: SystemParams | None) -> dict:
    meta = {"config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
            "version": __version__}
    if p is not None:
        meta["params_sha256"] = params_digest(p)
    return meta


def _write_rows_csv(path: Path, meta: dict, header: list[str],
                    rows: list[list]) -> None:
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _db(x: float) -> float:
    return 10.0 * math.log10(max(x, 1e-300))


def _run_spectra(cfg: ScenarioConfig, cfg_text: str, out: Path, fmt: str) -> str:
    p = cfg.params
    grid = FrequencyGrid.uniform(span=cfg.grid_span, n=cfg.grid_n,
                                 center=cfg.grid_center)
    p_transfer = p.with_(g1=0.0)
    eps_t = np.array([spectral_efficiency(nu, p_transfer) for nu in grid.points])
    eps_b = np.array([spectral_efficiency(nu, p) for nu in grid.points])
    meta = _artifact_meta(cfg_text, p)
    if fmt == "csv":
        rows = [[float(nu), float(et), _db(float(et)), float(eb), _db(float(eb))]
                for nu, et, eb in zip(grid.points, eps_t, eps_b)]
        _write_rows_csv(out, {"scenario": "spectra", **meta},
                        ["nu", "eps_transfer", "eps_transfer_db",
                         "eps_blockade", "eps_blockade_db"], rows)
    else:
        doc = {**meta, "scenario": "spectra", "nu": grid.points.tolist(),
               "eps_transfer": eps_t.tolist(), "eps_blockade": eps_b.tolist(),
               "eps_transfer_db": [_db(float(x)) for x in eps_t],
               "eps_blockade_db": [_db(float(x)) for x in eps_b]}
        out.write_text(json.dumps(doc) + "\n")
    return (f"spectra: {grid.points.size} points, peak transfer "
            f"{float(np.max(eps_t)):.6f}, peak blockade {float(np.max(eps_b)):.6f}")


def _run_check_matching(cfg: ScenarioConfig, cfg_text: str, out: Path,
                        fmt: str) -> str:
    p = cfg.params
    report = check_matching(p)
    coop = cooperativities(p)
    doc = {**_artifact_meta(cfg_text, p), "scenario": "check_matching",
           **report.to_dict(), "c_atom": coop.c_atom, "c_pm": coop.c_pm}
    if fmt == "csv":
        _write_rows_csv(out, {"scenario": "check_matching"},
                        ["key", "value"],
                        [[k, v] for k, v in doc.items()])
    else:
        out.write_text(json.dumps(doc, indent=2) + "\n")
    return (f"check-matching: all_matched={report.all_matched} "
            f"(c_pm={coop.c_pm:.6g}, c_atom={coop.c_atom:.6g})")


def _run_store(cfg: ScenarioConfig, cfg_text: str, out: Path, fmt: str) -> str:
    p = cfg.params
    pulse = cfg.pulse
    span = cfg.t_span or (pulse.center - 6.0 * pulse.duration,
                          pulse.center + 6.0 * pulse.duration)
    ens = ensemble_for_params(p, n_sim=cfg.n_sim, span=cfg.span,
                              scheme=cfg.scheme)
    trace = integrate_storage(p, ens, pulse, span, cfg.solver_tol)
    meta = _artifact_meta(cfg_text, p)
    if fmt == "csv":
        trace.to_csv(out, extra_comments=meta)
    else:
        trace.to_json(out, extra=meta)
    return (f"store: probability {trace.ensemble.probability:.6f}, "
            f"ledger residual {trace.max_ledger_residual:.2e}")


def _echo_summary(cfg: ScenarioConfig, res) -> dict:
    return {
        "storage_probability": res.storage_probability,
        "echo_probability": res.echo_probability,
        "fidelity_time_reversed": res.fidelity_time_reversed,
        "echo_window": list(res.echo_window),
        "tau": res.tau,
        "max_ledger_residual": res.max_ledger_residual,
    }


def _run_echo(cfg: ScenarioConfig, cfg_text: str, out: Path, fmt: str) -> str:
    p = cfg.params
    p_read = cfg.read_params or p
    ens = ensemble_for_params(p, n_sim=cfg.n_sim, span=cfg.span,
                              scheme=cfg.scheme)
    res = run_echo_cycle(p, p_read, ens, cfg.pulse, cfg.tau, cfg.solver_tol,
                         keep_traces=False)
    meta = _artifact_meta(cfg_text, p)
    summary = _echo_summary(cfg, res)
    if fmt == "csv":
        rows = [[float(t), float(v.real), float(v.imag)]
                for t, v in zip(res.output_times, res.output_waveform)]
        _write_rows_csv(out, {"scenario": "echo_cycle", **meta,
                              **{k: summary[k] for k in
                                 ("storage_probability", "echo_probability",
                                  "fidelity_time_reversed", "tau")}},
                        ["time", "alpha_out_re", "alpha_out_im"], rows)
    else:
        doc = {**meta, "scenario": "echo_cycle", **summary,
               "output_times": res.output_times.tolist(),
               "alpha_out_re": np.real(res.output_waveform).tolist(),
               "alpha_out_im": np.imag(res.output_waveform).tolist()}
        out.write_text(json.dumps(doc) + "\n")
    return (f"echo: P={res.echo_probability:.6f}, "
            f"fidelity={res.fidelity_time_reversed:.6f}")


def _run_blockade(cfg: ScenarioConfig, cfg_text: str, out: Path, fmt: str) -> str:
    p = cfg.params
    p_read = cfg.read_params
    ens = ensemble_for_params(p, n_sim=cfg.n_sim, span=cfg.span,
                              scheme=cfg.scheme)
    res = run_echo_cycle(p, p_read, ens, cfg.pulse, cfg.tau, cfg.solver_tol,
                         keep_traces=False)
    chk = blockade_phase_check(p_read, res.ens_final, res.ens_stored, cfg.tau,
                               res.t_final - (cfg.pulse.center + cfg.tau))
    c = cooperativities(p_read).c_atom
    doc = {**_artifact_meta(cfg_text, p), "scenario": "blockade",
           **_echo_summary(cfg, res),
           "c_atom": c,
           "leak_bound": (1.0 + 2.0 * c) ** -2,
           "coherence_phase": chk.phase,
           "coherence_phase_minus_pi": chk.phase - math.pi,
           "coherence_magnitude_ratio": chk.magnitude_ratio,
           "final_probability": res.ens_final.probability}
    if fmt == "csv":
        _write_rows_csv(out, {"scenario": "blockade"}, ["key", "value"],
                        [[k, v] for k, v in doc.items()])
    else:
        out.write_text(json.dumps(doc, indent=2) + "\n")
    return (f"blockade: P_echo={res.echo_probability:.3e}, "
            f"phase-pi={chk.phase - math.pi:+.4f}, "
            f"|overlap|={chk.magnitude_ratio:.4f}")


def _run_address(cfg: ScenarioConfig, cfg_text: str, out: Path, fmt: str) -> str:
    if cfg.eff_from_dynamics:
        eff = compose_with_dynamics(cfg.params, cfg.tau)
    else:
        eff = cfg.efficiencies or BranchEfficiencies()
    state = run_addressing(cfg.address.m, cfg.address, eff)
    doc = {**_artifact_meta(cfg_text, cfg.params), "scenario": "address",
           **state_to_dict(state)}
    if fmt == "csv":
        rows = [[t["amplitude"]["re"], t["amplitude"]["im"], t["control"],
                 "".join(str(b) for b in t["occupied"]),
                 ";".join(t["emitted"])] for t in doc["terms"]]
        _write_rows_csv(out, {"scenario": "address",
                              "norm": doc["norm"],
                              "losses": json.dumps(doc["losses"]),
                              "config_sha256": doc["config_sha256"],
                              "version": doc["version"]},
                        ["amplitude_re", "amplitude_im", "control",
                         "occupied", "emitted"], rows)
    else:
        out.write_text(json.dumps(doc, indent=2) + "\n")
    print(state_table(state))
    return f"address: {len(state.terms)} terms, norm {state.norm:.12f}"


# ---------------------------------------------------------------------- sweep

def _apply_sweep_value(p_store: SystemParams, p_read: SystemParams,
                       pulse: PulseSpec, tau: float | None, name: str,
                       value: float, tau_over_duration: float):
    if name == "pulse_duration":
        pulse = PulseSpec(shape=pulse.shape, duration=value,
                          center=pulse.center,
                          carrier_detuning=pulse.carrier_detuning)
        tau = tau_over_duration * value
    elif name == "tau":
        tau = value
    elif name == "t2":
        p_store = p_store.with_(t2=value)
        p_read = p_read.with_(t2=value)
    elif name == "g1":
        p_read = p_read.with_(g1=value)
    elif name == "delta_c":
        p_read = p_read.with_(delta_c=value)
    else:
        raise ParameterError(f"unsupported sweep parameter '{name}'")
    return p_store, p_read, pulse, tau


def _sweep_point(task: tuple) -> tuple:
    """Worker: one echo cycle. Top-level so process pools can pickle it."""
    (idx, store_d, read_d, pulse_d, tau, n_sim, span, scheme, solver_tol) = task
    p_store = params_from_dict(store_d)
    p_read = params_from_dict(read_d)
    pulse = PulseSpec(**pulse_d)
    ens = ensemble_for_params(p_store, n_sim=n_sim, span=span, scheme=scheme)
    res = run_echo_cycle(p_store, p_read, ens, pulse, tau, solver_tol,
                         keep_traces=False)
    return idx, {"echo_probability": res.echo_probability,
                 "fidelity_time_reversed": res.fidelity_time_reversed,
                 "storage_probability": res.storage_probability,
                 "max_ledger_residual": res.max_ledger_residual}


def run_sweep(cfg: ScenarioConfig, workers: int = 1) -> list[dict]:
    """Echo-cycle sweep; rows ordered (curve, value) regardless of workers."""
    sweep: SweepSpec = getattr(cfg, "_sweep")
    p_read0 = cfg.read_params or cfg.params
    curves = (list(zip([sweep.curve_parameter] * len(sweep.curve_values),
                       sweep.curve_values))
              if sweep.curve_parameter else [(None, None)])
    tasks = []
    labels = []
    idx = 0
    for cname, cval in curves:
        for v in sweep.values:
            p_s, p_r, pulse, tau = cfg.params, p_read0, cfg.pulse, cfg.tau
            if cname is not None:
                p_s, p_r, pulse, tau = _apply_sweep_value(
                    p_s, p_r, pulse, tau, cname, cval, sweep.tau_over_duration)
            p_s, p_r, pulse, tau = _apply_sweep_value(
                p_s, p_r, pulse, tau, sweep.parameter, v,
                sweep.tau_over_duration)
            pulse_d = {"shape": pulse.shape.value, "duration": pulse.duration,
                       "center": pulse.center,
                       "carrier_detuning": pulse.carrier_detuning}
            tasks.append((idx, p_s.to_dict(), p_r.to_dict(), pulse_d, tau,
                          cfg.n_sim, cfg.span, cfg.scheme, cfg.solver_tol))
            labels.append({"curve_parameter": cname, "curve_value": cval,
                           "parameter": sweep.parameter, "value": v,
                           "tau": tau})
            idx += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_sweep_point, tasks))
    else:
        results = dict(map(_sweep_point, tasks))
    return [{**labels[i], **results[i]} for i in range(idx)]


def _run_sweep_scenario(cfg: ScenarioConfig, cfg_text: str, out: Path,
                        fmt: str, workers: int) -> str:
    sweep: SweepSpec = getattr(cfg, "_sweep")
    rows = run_sweep(cfg, workers=workers)
    meta = {"scenario": "sweep", **_artifact_meta(cfg_text, cfg.params)}
    if fmt == "json":
        out.write_text(json.dumps({**meta, "points": rows}, indent=2) + "\n")
    else:
        if sweep.curve_parameter:
            # wide table: one row per swept value, one column pair per curve
            per_curve: dict = {}
            for r in rows:
                per_curve.setdefault(r["curve_value"], {})[r["value"]] = r
            header = [sweep.parameter]
            for cv in sweep.curve_values:
                header += [f"p_echo[{sweep.curve_parameter}={cv:g}]",
                           f"fidelity[{sweep.curve_parameter}={cv:g}]"]
            table = []
            for v in sweep.values:
                row = [float(v)]
                for cv in sweep.curve_values:
                    r = per_curve[cv][v]
                    row += [r["echo_probability"], r["fidelity_time_reversed"]]
                table.append(row)
        else:
            # the delay column is redundant when tau is the swept axis
            with_tau = sweep.parameter != "tau"
            header = ([sweep.parameter] + (["tau"] if with_tau else [])
                      + ["p_echo", "fidelity", "storage_probability"])
            table = [[r["value"]] + ([r["tau"]] if with_tau else [])
                     + [r["echo_probability"], r["fidelity_time_reversed"],
                        r["storage_probability"]]
                     for r in rows]
        _write_rows_csv(out, meta, header, table)
    return f"sweep: {len(rows)} points written"


# ----------------------------------------------------------------------- main

_RUNNERS = {
    Scenario.SPECTRA: _run_spectra,
    Scenario.CHECK_MATCHING: _run_check_matching,
    Scenario.STORE: _run_store,
    Scenario.ECHO_CYCLE: _run_echo,
    Scenario.BLOCKADE: _run_blockade,
    Scenario.ADDRESS: _run_address,
}

_SUBCOMMANDS = {
    "spectra": Scenario.SPECTRA,
    "check-matching": Scenario.CHECK_MATCHING,
    "store": Scenario.STORE,
    "echo": Scenario.ECHO_CYCLE,
    "blockade": Scenario.BLOCKADE,
    "address": Scenario.ADDRESS,
    "sweep": Scenario.SWEEP,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoqram",
        description="Time-bin quantum RAM simulator: spectra, echo dynamics, "
                    "and addressing scenarios from JSON configs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, scenario in _SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"run the {scenario.value} scenario")
        sp.add_argument("--config", required=True, help="JSON scenario config")
        sp.add_argument("--out", default=None,
                        help="artifact path (default: config output.path, "
                             f"else ${OUT_DIR_ENV}/<scenario>.<format>)")
        sp.add_argument("--format", choices=("csv", "json"), default=None,
                        help="artifact format (overrides config)")
        sp.add_argument("--workers", type=int, default=1,
                        help="parallel workers (sweep only)")
        sp.add_argument("--seed", type=int, default=None,
                        help="reserved, unused; all computation is deterministic")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    expected = _SUBCOMMANDS[args.command]
    try:
        cfg_path = Path(args.config)
        try:
            cfg_text = cfg_path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", str(cfg_path))
        cfg = parse_scenario_config(cfg_text, source=str(cfg_path))
        if cfg.scenario is not expected:
            raise ConfigError(
                f"config declares scenario '{cfg.scenario.value}' but the "
                f"'{args.command}' subcommand expects '{expected.value}'",
                str(cfg_path), _line_of_key(cfg_text, "scenario"))
        fmt = args.format or cfg.out_format or "csv"
        out_dir = Path(os.environ.get(OUT_DIR_ENV, "."))
        if args.out is not None:
            # explicit command-line path wins and is taken literally
            out = Path(args.out)
        elif cfg.out_path is not None:
            # relative config paths land in the default output directory
            out = Path(cfg.out_path)
            if not out.is_absolute():
                out = out_dir / out
        else:
            out = out_dir / f"{cfg.scenario.value}.{fmt}"
        out.parent.mkdir(parents=True, exist_ok=True)

        if cfg.scenario is Scenario.SWEEP:
            summary = _run_sweep_scenario(cfg, cfg_text, out, fmt,
                                          max(1, args.workers))
        else:
            summary = _RUNNERS[cfg.scenario](cfg, cfg_text, out, fmt)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, ProtocolError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(summary)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
