"""Time-domain dynamics of storage, detuning inversion, and echo retrieval.

Single-excitation amplitudes in the rotating frame obey

    da1/dt = -i*g1*bc - i*f2*a2 - (kappa/2)*a1 + sqrt(kappa)*a_in(t)
    dbc/dt = -i*(delta_c - i*gamma/2)*bc - i*g1*a1
    da2/dt = -i*sum_j gj*b_j - i*f2*a1
    db_j/dt = -i*(Delta_j - i/T2)*b_j - i*gj*a2

with the input-output relation a_out = sqrt(kappa)*a1 - a_in.  The
inhomogeneous line is discretized into modes at detunings Delta_j with
quadrature weights w_j; each mode couples with gj = sqrt(N*g2**2 * w_j),
so sum_j |b_j|**2 is the stored excitation probability and collective
sums reproduce N * integral(G(Delta) ...) to quadrature accuracy.

Retrieval integrates the same equations with the drive removed and the
ensemble detunings inverted (Delta_j -> -Delta_j at the inversion time),
which realizes the rephasing readout: a mode stored with phase
exp(-i*Delta_j*tau) unwinds to zero phase at 2*tau and the ensemble
re-emits the pulse time-reversed.

Probability is conserved against explicit loss ledgers: the cavity output
integral, the control-atom relaxation integral gamma*int|bc|**2, and the
ensemble dephasing integral (2/T2)*sum_j int|b_j|**2.  Every integration
checks the ledger at each output step and aborts when it drifts beyond
100x the solver tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple

import csv
import json

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .params import SystemParams, ParameterError, params_digest


class IntegrationError(RuntimeError):
    """Solver failure or conservation-ledger violation."""


# ---------------------------------------------------------------------- pulses

class PulseShape(str, Enum):
    GAUSSIAN = "gaussian"
    RISING_EXPONENTIAL = "rising_exponential"
    DECAYING_EXPONENTIAL = "decaying_exponential"


@dataclass(frozen=True)
class PulseSpec:
    """Normalized single-photon input envelope.

    duration: standard deviation of the Gaussian field envelope, or the
    1/e time of the exponential field envelopes.  The envelope carries
    unit L2 norm; `carrier_detuning` shifts the spectrum off line center.
    """

    shape: PulseShape = PulseShape.GAUSSIAN
    duration: float = 10.0
    center: float = 0.0
    carrier_detuning: float = 0.0

    def __post_init__(self) -> None:
        if isinstance(self.shape, str) and not isinstance(self.shape, PulseShape):
            object.__setattr__(self, "shape", PulseShape(self.shape))
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ParameterError(f"pulse duration must be positive, got {self.duration}")
        if not math.isfinite(self.center) or not math.isfinite(self.carrier_detuning):
            raise ParameterError("pulse center and carrier_detuning must be finite")

    def envelope(self, t):
        """Real baseband envelope, unit L2 norm."""
        s = np.asarray(t, dtype=float) - self.center
        dt = self.duration
        if self.shape is PulseShape.GAUSSIAN:
            out = (np.pi * dt ** 2) ** -0.25 * np.exp(-0.5 * s ** 2 / dt ** 2)
        elif self.shape is PulseShape.RISING_EXPONENTIAL:
            out = np.where(s <= 0, np.sqrt(2.0 / dt) * np.exp(s / dt), 0.0)
        else:
            out = np.where(s >= 0, np.sqrt(2.0 / dt) * np.exp(-s / dt), 0.0)
        return out if out.ndim else float(out)

    def amplitude(self, t):
        """Complex input amplitude: envelope times the carrier phase."""
        s = np.asarray(t, dtype=float) - self.center
        out = self.envelope(t) * np.exp(-1j * self.carrier_detuning * s)
        return out if out.ndim else complex(out)

    def spectral_amplitude(self, nu):
        """Closed-form (1/sqrt(2*pi)) * integral a_in(t) * exp(i*nu*t) dt."""
        nu = np.asarray(nu, dtype=float)
        mu = nu - self.carrier_detuning
        dt = self.duration
        if self.shape is PulseShape.GAUSSIAN:
            base = (dt ** 2 / np.pi) ** 0.25 * np.exp(-0.5 * mu ** 2 * dt ** 2)
        elif self.shape is PulseShape.RISING_EXPONENTIAL:
            base = np.sqrt(dt / np.pi) / (1.0 + 1j * mu * dt)
        else:
            base = np.sqrt(dt / np.pi) / (1.0 - 1j * mu * dt)
        out = base * np.exp(1j * nu * self.center)
        return out if out.ndim else complex(out)

    def spectral_density(self, nu):
        a = self.spectral_amplitude(nu)
        return np.abs(a) ** 2


# -------------------------------------------------------------------- ensemble

class DiscretizationScheme(str, Enum):
    QUANTILE = "quantile"
    UNIFORM_WEIGHTED = "uniform_weighted"


@dataclass(frozen=True)
class AtomEnsemble:
    """Discretized inhomogeneous line.

    coherences holds the mode amplitudes b_j = sqrt(N*w_j) * beta(Delta_j),
    so `probability` is their plain square sum.  collective_coupling keeps
    the N*g2**2 the grid was built for (0 when built standalone).
    """

    detunings: np.ndarray
    weights: np.ndarray
    coherences: np.ndarray
    collective_coupling: float = 0.0

    def __post_init__(self) -> None:
        d = np.asarray(self.detunings, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        c = np.asarray(self.coherences, dtype=complex)
        object.__setattr__(self, "detunings", d)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "coherences", c)
        if not (d.shape == w.shape == c.shape) or d.ndim != 1 or d.size == 0:
            raise ParameterError("detunings, weights, coherences must be equal-length 1-d arrays")
        if np.any(np.diff(d) < 0):
            raise ParameterError("detunings must be sorted ascending")
        if np.any(w <= 0):
            raise ParameterError("weights must be positive")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ParameterError(f"weights must sum to 1 within 1e-12, got {np.sum(w)}")
        if self.collective_coupling < 0:
            raise ParameterError("collective_coupling must be >= 0")

    @property
    def n(self) -> int:
        return int(self.detunings.size)

    @property
    def probability(self) -> float:
        return float(np.sum(np.abs(self.coherences) ** 2))

    def with_coherences(self, coherences) -> "AtomEnsemble":
        return replace(self, coherences=np.asarray(coherences, dtype=complex))


def discretize_ensemble(
    n_sim: int,
    delta_in: float,
    span: float | None = None,
    scheme: DiscretizationScheme | str = DiscretizationScheme.QUANTILE,
    collective_coupling: float = 0.0,
) -> AtomEnsemble:
    """Build quadrature nodes and weights for the Lorentzian line.

    span is the half width of the detuning window (default 40*delta_in).
    The quantile scheme places nodes at equal-probability midpoints of the
    full line and clips outliers to +-span, so weights are exactly 1/n and
    no mass is dropped.  The uniform scheme uses equidistant nodes with
    exact line mass per bin, folding the outer tails into the edge bins.
    """
    scheme = DiscretizationScheme(scheme)
    if n_sim < 16:
        raise ParameterError(f"n_sim must be >= 16, got {n_sim}")
    if delta_in <= 0:
        raise ParameterError(f"delta_in must be positive, got {delta_in}")
    if span is None:
        span = 40.0 * delta_in
    if span < 20.0 * delta_in:
        raise ParameterError(
            f"span {span} too small: need >= 20*delta_in = {20.0 * delta_in} "
            "to keep the truncated line mass negligible")

    if scheme is DiscretizationScheme.QUANTILE:
        u = (np.arange(n_sim) + 0.5) / n_sim
        det = delta_in * np.tan(np.pi * (u - 0.5))
        det = np.clip(det, -span, span)
        w = np.full(n_sim, 1.0 / n_sim)
    else:
        edges = np.linspace(-span, span, n_sim + 1)
        det = 0.5 * (edges[:-1] + edges[1:])
        cdf = 0.5 + np.arctan(edges / delta_in) / np.pi
        w = np.diff(cdf)
        w[0] += cdf[0]           # fold the left tail into the first bin
        w[-1] += 1.0 - cdf[-1]   # and the right tail into the last
    w = w / np.sum(w)
    return AtomEnsemble(detunings=det, weights=w,
                        coherences=np.zeros(n_sim, dtype=complex),
                        collective_coupling=collective_coupling)


def ensemble_for_params(
    p: SystemParams,
    n_sim: int = 801,
    span: float | None = None,
    scheme: DiscretizationScheme | str = DiscretizationScheme.QUANTILE,
) -> AtomEnsemble:
    """Discretize the line of `p` carrying its collective coupling along."""
    return discretize_ensemble(n_sim, p.delta_in, span=span, scheme=scheme,
                               collective_coupling=p.collective_coupling)


def invert_detunings(ens: AtomEnsemble) -> AtomEnsemble:
    """Flip every detuning sign, keeping each mode's coherence attached.

    Applying it twice returns the original ensemble exactly.
    """
    return AtomEnsemble(
        detunings=-ens.detunings[::-1],
        weights=ens.weights[::-1].copy(),
        coherences=ens.coherences[::-1].copy(),
        collective_coupling=ens.collective_coupling,
    )


# ----------------------------------------------------------------- integration

@dataclass(frozen=True)
class SimulationTrace:
    """Sampled amplitudes, probabilities, and conservation ledger."""

    times: np.ndarray
    cavity1: np.ndarray
    control: np.ndarray
    cavity2: np.ndarray
    alpha_in: np.ndarray
    alpha_out: np.ndarray
    coherences: np.ndarray | None       # (n_times, n_atoms) when stored
    p_cavity1: np.ndarray
    p_control: np.ndarray
    p_cavity2: np.ndarray
    p_ensemble: np.ndarray
    out_flux_integral: np.ndarray       # int |a_out|^2
    control_loss_integral: np.ndarray   # gamma * int |bc|^2
    t2_loss_integral: np.ndarray        # (2/T2) * sum_j int |b_j|^2
    in_flux_integral: np.ndarray        # int |a_in|^2
    ledger_residual: np.ndarray
    ensemble: AtomEnsemble              # state at the final sample
    initial_probability: float
    solver_tol: float
    kind: str
    params: SystemParams

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def max_ledger_residual(self) -> float:
        return float(np.max(np.abs(self.ledger_residual)))

    def to_csv(self, path: str | Path, extra_comments: dict | None = None) -> None:
        """Long-format export: time, series, re, im."""
        series = {
            "alpha_in": self.alpha_in, "alpha_out": self.alpha_out,
            "cavity1": self.cavity1, "control": self.control, "cavity2": self.cavity2,
            "p_cavity1": self.p_cavity1, "p_control": self.p_control,
            "p_cavity2": self.p_cavity2, "p_ensemble": self.p_ensemble,
            "out_flux_integral": self.out_flux_integral,
            "control_loss_integral": self.control_loss_integral,
            "t2_loss_integral": self.t2_loss_integral,
            "in_flux_integral": self.in_flux_integral,
            "ledger_residual": self.ledger_residual,
        }
        with open(path, "w", newline="") as fh:
            fh.write(f"# kind={self.kind}\n")
            for k, v in (extra_comments or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write(f"# params_sha256={params_digest(self.params)}\n")
            fh.write(f"# unit_convention={self.params.unit_convention}\n")
            fh.write(f"# solver_rtol={self.solver_tol!r}\n")
            fh.write(f"# solver_atol={self.solver_tol * 1e-3!r}\n")
            w = csv.writer(fh)
            w.writerow(["time", "series", "re", "im"])
            for name, arr in series.items():
                vals = np.asarray(arr)
                for t, v in zip(self.times, vals):
                    c = complex(v)
                    w.writerow([repr(float(t)), name, repr(c.real), repr(c.imag)])

    def to_json(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {
            **(extra or {}),
            "kind": self.kind,
            "params": self.params.to_dict(),
            "params_sha256": params_digest(self.params),
            "solver_rtol": self.solver_tol,
            "solver_atol": self.solver_tol * 1e-3,
            "initial_probability": self.initial_probability,
            "times": self.times.tolist(),
            "fields": {
                name: {"re": np.real(arr).tolist(), "im": np.imag(arr).tolist()}
                for name, arr in [
                    ("alpha_in", self.alpha_in), ("alpha_out", self.alpha_out),
                    ("cavity1", self.cavity1), ("control", self.control),
                    ("cavity2", self.cavity2)]
            },
            "probabilities": {
                "p_cavity1": self.p_cavity1.tolist(),
                "p_control": self.p_control.tolist(),
                "p_cavity2": self.p_cavity2.tolist(),
                "p_ensemble": self.p_ensemble.tolist(),
                "out_flux_integral": self.out_flux_integral.tolist(),
                "control_loss_integral": self.control_loss_integral.tolist(),
                "t2_loss_integral": self.t2_loss_integral.tolist(),
                "in_flux_integral": self.in_flux_integral.tolist(),
                "ledger_residual": self.ledger_residual.tolist(),
            },
        }
        Path(path).write_text(json.dumps(doc) + "\n")


def _check_ensemble(p: SystemParams, ens: AtomEnsemble) -> None:
    cc = p.collective_coupling
    if ens.collective_coupling > 0 and abs(ens.collective_coupling - cc) > 1e-9 * max(cc, 1e-30):
        raise ParameterError(
            f"ensemble was discretized for N*g2**2 = {ens.collective_coupling}, "
            f"params carry {cc}")


def _integrate(
    p: SystemParams,
    ens: AtomEnsemble,
    drive: Callable[[float], complex] | None,
    t_span: tuple[float, float],
    y0_modes: np.ndarray,
    y0_fields: tuple[complex, complex, complex],
    solver_tol: float,
    output_dt: float | None,
    extra_eval: tuple[float, ...] = (),
    store_ensemble: bool = True,
    kind: str = "storage",
    ledger_check: bool = True,
) -> SimulationTrace:
    if solver_tol > 1e-8 or solver_tol <= 0:
        raise ParameterError(f"solver_tol must be in (0, 1e-8], got {solver_tol}")
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ParameterError(f"empty integration span {t_span}")
    n = ens.n
    kappa, g1, f2 = p.kappa, p.g1, p.f2
    sqrtk = math.sqrt(kappa)
    inv_t2 = 0.0 if math.isinf(p.t2) else 1.0 / p.t2
    gj = np.sqrt(p.collective_coupling * ens.weights)
    damp = -(1j * ens.detunings + inv_t2)
    mig = -1j * gj
    cdamp = -(1j * p.delta_c + 0.5 * p.gamma)

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        a1, bc, a2 = y[0], y[1], y[2]
        b = y[3:3 + n]
        ain = drive(t) if drive is not None else 0.0
        dy = np.empty_like(y)
        dy[0] = -1j * g1 * bc - 1j * f2 * a2 - 0.5 * kappa * a1 + sqrtk * ain
        dy[1] = cdamp * bc - 1j * g1 * a1
        dy[2] = mig @ b - 1j * f2 * a1
        dy[3:3 + n] = damp * b + mig * a2
        aout = sqrtk * a1 - ain
        dy[3 + n] = abs(aout) ** 2
        dy[4 + n] = p.gamma * abs(bc) ** 2
        dy[5 + n] = 2.0 * inv_t2 * float(b.real @ b.real + b.imag @ b.imag)
        dy[6 + n] = abs(ain) ** 2
        return dy

    y0 = np.zeros(n + 7, dtype=complex)
    y0[0], y0[1], y0[2] = y0_fields
    y0[3:3 + n] = y0_modes

    if output_dt is None:
        output_dt = (t1 - t0) / 600.0
    m = max(2, int(math.ceil((t1 - t0) / output_dt)) + 1)
    t_eval = np.linspace(t0, t1, m)
    if extra_eval:
        t_eval = np.unique(np.concatenate([t_eval, np.asarray(extra_eval, dtype=float)]))
        if t_eval[0] < t0 or t_eval[-1] > t1:
            raise ParameterError("extra evaluation times fall outside the span")

    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853",
                    rtol=solver_tol, atol=solver_tol * 1e-3, t_eval=t_eval)
    if not sol.success:
        raise IntegrationError(f"solver failed on {kind} span {t_span}: {sol.message}")

    a1 = sol.y[0]
    bc = sol.y[1]
    a2 = sol.y[2]
    b = sol.y[3:3 + n]
    ain = (np.asarray([drive(t) for t in sol.t], dtype=complex)
           if drive is not None else np.zeros_like(sol.t, dtype=complex))
    aout = sqrtk * a1 - ain
    p1 = np.abs(a1) ** 2
    pc = np.abs(bc) ** 2
    p2 = np.abs(a2) ** 2
    pe = np.sum(np.abs(b) ** 2, axis=0)
    l_out = sol.y[3 + n].real
    l_c = sol.y[4 + n].real
    l_t2 = sol.y[5 + n].real
    l_in = sol.y[6 + n].real
    p0 = float(np.sum(np.abs(y0_modes) ** 2)
               + sum(abs(v) ** 2 for v in y0_fields))
    residual = (p1 + pc + p2 + pe + l_out + l_c + l_t2) - (l_in + p0)

    if ledger_check and np.max(np.abs(residual)) > 100.0 * solver_tol:
        raise IntegrationError(
            f"probability ledger violated on {kind}: max residual "
            f"{np.max(np.abs(residual)):.3e} > 100*{solver_tol}")

    final = ens.with_coherences(b[:, -1])
    return SimulationTrace(
        times=sol.t, cavity1=a1, control=bc, cavity2=a2,
        alpha_in=ain, alpha_out=aout,
        coherences=b.T.copy() if store_ensemble else None,
        p_cavity1=p1, p_control=pc, p_cavity2=p2, p_ensemble=pe,
        out_flux_integral=l_out, control_loss_integral=l_c,
        t2_loss_integral=l_t2, in_flux_integral=l_in,
        ledger_residual=residual, ensemble=final,
        initial_probability=p0, solver_tol=solver_tol, kind=kind, params=p,
    )


def integrate_storage(
    p: SystemParams,
    ens: AtomEnsemble,
    pulse: PulseSpec,
    t_span: tuple[float, float],
    solver_tol: float = 1e-9,
    *,
    input_scale: complex = 1.0,
    output_dt: float | None = None,
    extra_eval: tuple[float, ...] = (),
    store_ensemble: bool = True,
) -> SimulationTrace:
    """Drive the empty memory with a normalized input pulse.

    The span must contain the pulse with at least 5 durations of margin on
    each side so the stored probability has settled at the end.  Scaling
    `input_scale` scales the whole trace linearly (single excitation sector).
    """
    _check_ensemble(p, ens)
    if t_span[0] > pulse.center - 5.0 * pulse.duration or \
       t_span[1] < pulse.center + 5.0 * pulse.duration:
        raise ParameterError(
            f"pulse centered at {pulse.center} (duration {pulse.duration}) needs "
            f">= 5 durations of margin inside span {t_span}")
    scale = complex(input_scale)
    drive = lambda t: scale * pulse.amplitude(t)
    if output_dt is None:
        output_dt = min(pulse.duration / 30.0, (t_span[1] - t_span[0]) / 400.0)
    return _integrate(p, ens, drive, t_span,
                      y0_modes=np.zeros(ens.n, dtype=complex),
                      y0_fields=(0.0, 0.0, 0.0),
                      solver_tol=solver_tol, output_dt=output_dt,
                      extra_eval=extra_eval, store_ensemble=store_ensemble,
                      kind="storage")


def integrate_retrieval(
    p: SystemParams,
    ens: AtomEnsemble,
    t_span: tuple[float, float],
    solver_tol: float = 1e-9,
    *,
    output_dt: float | None = None,
    extra_eval: tuple[float, ...] = (),
    store_ensemble: bool = True,
) -> SimulationTrace:
    """Free evolution of a loaded ensemble with the drive removed.

    The cavities and the control atom start empty; whatever the ensemble
    re-emits leaves through the input cavity as alpha_out.
    """
    _check_ensemble(p, ens)
    if ens.probability <= 0.0:
        raise ParameterError("retrieval needs an ensemble with nonzero coherence")
    return _integrate(p, ens, None, t_span,
                      y0_modes=ens.coherences.copy(),
                      y0_fields=(0.0, 0.0, 0.0),
                      solver_tol=solver_tol, output_dt=output_dt,
                      extra_eval=extra_eval, store_ensemble=store_ensemble,
                      kind="retrieval")


# ----------------------------------------------------------------- echo cycle

@dataclass(frozen=True)
class EchoResult:
    """Outcome of a storage -> inversion -> retrieval cycle."""

    echo_probability: float
    fidelity_time_reversed: float
    echo_window: tuple[float, float]
    output_times: np.ndarray
    output_waveform: np.ndarray
    storage_probability: float
    tau: float
    t_final: float
    ens_stored: AtomEnsemble            # at the inversion time, pre-inversion
    ens_final: AtomEnsemble             # at t_final, inverted detunings
    max_ledger_residual: float
    storage_trace: SimulationTrace | None = None
    retrieval_trace: SimulationTrace | None = None


def run_echo_cycle(
    p_store: SystemParams,
    p_read: SystemParams,
    ens: AtomEnsemble,
    pulse: PulseSpec,
    tau: float,
    solver_tol: float = 1e-9,
    *,
    keep_traces: bool = True,
) -> EchoResult:
    """Store a pulse, invert the detunings tau after the pulse center,
    and integrate the readout stage with parameters p_read.

    tau is measured from the pulse center; the echo is expected around
    center + 2*tau and the retrieval window spans +-6 durations of it.
    The time-reversal fidelity is the normalized overlap between the
    output waveform and the conjugated, time-mirrored input, maximized
    over a delay near 2*tau (a global phase drops out of the modulus).
    """
    if tau < 5.0 * pulse.duration:
        raise ParameterError(
            f"tau = {tau} too small: need >= 5 pulse durations "
            f"({5.0 * pulse.duration}) after the pulse center")
    dt = pulse.duration
    c = pulse.center
    t_inv = c + tau
    storage = integrate_storage(
        p_store, ens, pulse, (c - 6.0 * dt, t_inv), solver_tol,
        store_ensemble=keep_traces)
    ens_stored = storage.ensemble
    inverted = invert_detunings(ens_stored)

    echo_center = c + 2.0 * tau
    t_end = echo_center + 8.0 * dt
    w_lo = max(echo_center - 6.0 * dt, t_inv)
    w_hi = min(echo_center + 6.0 * dt, t_end)
    retrieval = integrate_retrieval(
        p_read, inverted, (t_inv, t_end), solver_tol,
        output_dt=dt / 40.0, extra_eval=(w_lo, w_hi),
        store_ensemble=keep_traces)

    i_lo = int(np.searchsorted(retrieval.times, w_lo))
    i_hi = int(np.searchsorted(retrieval.times, w_hi))
    echo_probability = float(retrieval.out_flux_integral[i_hi]
                             - retrieval.out_flux_integral[i_lo])

    sel = slice(i_lo, i_hi + 1)
    t_out = retrieval.times[sel]
    a_out = retrieval.alpha_out[sel]
    out_norm = float(np.trapezoid(np.abs(a_out) ** 2, t_out))

    def neg_overlap(t_mirror: float) -> float:
        ref = np.conj(pulse.amplitude(t_mirror - t_out))
        num = abs(np.trapezoid(np.conj(ref) * a_out, t_out)) ** 2
        den = float(np.trapezoid(np.abs(ref) ** 2, t_out)) * out_norm
        return -num / den if den > 0 else 0.0

    if out_norm > 0:
        res = minimize_scalar(neg_overlap, bounds=(echo_center - 2.0 * dt,
                                                   echo_center + 2.0 * dt),
                              method="bounded",
                              options={"xatol": 1e-4 * dt})
        fidelity = float(-res.fun)
    else:
        fidelity = 0.0

    return EchoResult(
        echo_probability=echo_probability,
        fidelity_time_reversed=fidelity,
        echo_window=(w_lo, w_hi),
        output_times=t_out.copy(),
        output_waveform=a_out.copy(),
        storage_probability=ens_stored.probability,
        tau=tau,
        t_final=retrieval.final_time,
        ens_stored=ens_stored,
        ens_final=retrieval.ensemble,
        max_ledger_residual=max(storage.max_ledger_residual,
                                retrieval.max_ledger_residual),
        storage_trace=storage if keep_traces else None,
        retrieval_trace=retrieval if keep_traces else None,
    )


# ------------------------------------------------------------ blockade check

class PhaseCheck(NamedTuple):
    phase: float            # |arg| of the overlap, radians in [0, pi]
    magnitude_ratio: float  # |overlap| after unwinding free evolution


def blockade_phase_check(
    p: SystemParams,
    ens_after: AtomEnsemble,
    ens_initial: AtomEnsemble,
    tau: float,
    elapsed: float,
) -> PhaseCheck:
    """Compare post-reabsorption coherences with the stored pattern.

    ens_initial is the ensemble at the inversion time (pre-inversion
    detunings), ens_after the final ensemble of a blockade readout that
    ran for `elapsed` after the inversion (the echo attempt sits at
    tau into it).  Both patterns are freely evolved/unwound to the echo
    time; a working blockade returns the overlap with phase pi and
    magnitude near one.
    """
    if ens_initial.probability < 0.5:
        raise ParameterError(
            f"stored probability {ens_initial.probability:.3f} < 0.5: "
            "storage failed, blockade comparison is meaningless")
    if elapsed <= tau:
        raise ParameterError("elapsed must exceed tau (echo before the end)")
    back = invert_detunings(ens_after)  # restore the original node order
    if back.detunings.shape != ens_initial.detunings.shape or \
            not np.allclose(back.detunings, ens_initial.detunings,
                            rtol=0, atol=1e-9):
        raise ParameterError("ensembles do not share a detuning grid")
    d = ens_initial.detunings
    inv_t2 = 0.0 if math.isinf(p.t2) else 1.0 / p.t2
    # post-inversion node j (originally at d_j) evolves as exp(+i*d_j*t)
    stored_at_echo = ens_initial.coherences * np.exp((1j * d - inv_t2) * tau)
    unwound = back.coherences * np.exp((-1j * d + inv_t2) * (elapsed - tau))
    ref = np.vdot(stored_at_echo, stored_at_echo)
    overlap = np.vdot(stored_at_echo, unwound) / ref
    return PhaseCheck(phase=abs(math.atan2(overlap.imag, overlap.real)),
                      magnitude_ratio=abs(overlap))


# ------------------------------------------------------------------ CW probes

class ProbeResult(NamedTuple):
    cavity1_over_input: complex
    cavity2_over_cavity1: complex


def transfer_function_probe(
    p: SystemParams,
    delta: float,
    *,
    n_sim: int = 801,
    span: float | None = None,
    solver_tol: float = 1e-9,
    hold: float = 140.0,
) -> ProbeResult:
    """Steady-state response ratios under a CW drive at detuning delta.

    Ramps a constant drive on smoothly, lets every pole settle, and reads
    the complex ratios a1/a_in and a2/a1.  Raises when the two late-time
    checkpoints disagree, which means the hold was too short.
    """
    ens = ensemble_for_params(p, n_sim=n_sim, span=span)
    w = 6.0 / p.kappa
    t_ramp = 5.0 * w
    t_end = t_ramp + hold / p.kappa

    def drive(t: float) -> complex:
        return 0.5 * (1.0 + math.tanh((t - t_ramp) / w)) * np.exp(-1j * delta * t)

    t_a = t_end - 25.0 / p.kappa
    trace = _integrate(p, ens, drive, (0.0, t_end),
                       y0_modes=np.zeros(ens.n, dtype=complex),
                       y0_fields=(0.0, 0.0, 0.0),
                       solver_tol=solver_tol, output_dt=None,
                       extra_eval=(t_a,), kind="probe", ledger_check=False)
    idx_a = int(np.searchsorted(trace.times, t_a))
    ratios = []
    for idx in (idx_a, len(trace.times) - 1):
        ain = trace.alpha_in[idx]
        a1 = trace.cavity1[idx]
        r1 = a1 / ain
        r21 = trace.cavity2[idx] / a1 if abs(a1) > 0 else 0.0j
        ratios.append((complex(r1), complex(r21)))
    (r1a, r21a), (r1b, r21b) = ratios
    if abs(r1a - r1b) > 1e-3 * max(abs(r1b), 1e-12):
        raise IntegrationError(
            f"probe did not reach steady state: a1/a_in moved {r1a} -> {r1b}")
    if abs(r21a - r21b) > 1e-3 * max(abs(r21b), 1e-12):
        raise IntegrationError(
            f"probe did not reach steady state: a2/a1 moved {r21a} -> {r21b}")
    return ProbeResult(cavity1_over_input=r1b, cavity2_over_cavity1=r21b)
