"""System parameters, cooperativities, and impedance-matching checks.

All rates share one unit convention: the decay rate of the input cavity
(kappa) is the unit, so kappa = 1.0 by default and every other rate is
quoted relative to it.  Serialized parameter files record the convention.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import NamedTuple


class ParameterError(ValueError):
    """Physically invalid or inconsistent system parameters."""


#: keys accepted in a serialized parameter file, in canonical order
PARAM_KEYS = (
    "kappa", "gamma", "g1", "g2", "f2",
    "n_atoms", "delta_in", "delta_c", "t2", "unit_convention",
)


@dataclass(frozen=True)
class SystemParams:
    """Rates of the two-cavity memory in a frame rotating with the carrier.

    kappa     : input cavity decay rate (the unit)
    gamma     : control atom energy relaxation rate
    g1        : control atom coupling to the input cavity
    g2        : single-atom coupling of the ensemble to the second cavity
    f2        : coupling between the two cavities
    n_atoms   : physical ensemble size N; only N*g2**2 enters the dynamics
    delta_in  : half width of the Lorentzian inhomogeneous line
    delta_c   : control atom detuning (0 engages the blockade)
    t2        : ensemble phase relaxation time, may be math.inf
    """

    kappa: float
    gamma: float
    g1: float
    g2: float
    f2: float
    n_atoms: int
    delta_in: float
    delta_c: float = 0.0
    t2: float = math.inf
    unit_convention: str = "kappa"

    def __post_init__(self) -> None:
        if not (self.kappa > 0):
            raise ParameterError(f"kappa must be positive, got {self.kappa}")
        if not (self.gamma > 0):
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if not (self.delta_in > 0):
            raise ParameterError(f"delta_in must be positive, got {self.delta_in}")
        for name in ("g1", "g2", "f2"):
            v = getattr(self, name)
            if not (v >= 0) or not math.isfinite(v):
                raise ParameterError(f"{name} must be finite and >= 0, got {v}")
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ParameterError(f"n_atoms must be a positive integer, got {self.n_atoms}")
        if not (self.t2 > 0):
            raise ParameterError(f"t2 must be positive (math.inf allowed), got {self.t2}")
        if not math.isfinite(self.delta_c):
            raise ParameterError(f"delta_c must be finite, got {self.delta_c}")

    @property
    def collective_coupling(self) -> float:
        """N*g2**2, the only combination of N and g2 the dynamics sees."""
        return self.n_atoms * self.g2 ** 2

    def with_(self, **changes) -> "SystemParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t2"] = "inf" if math.isinf(self.t2) else self.t2
        return d


class Cooperativities(NamedTuple):
    c_atom: float   # g1**2 / (kappa * gamma)
    c_pm: float     # 2 * f2**2 * delta_in / (kappa * N * g2**2)


def cooperativities(p: SystemParams) -> Cooperativities:
    """Single-atom cooperativity and the photonic-molecule cooperativity.

    The second cavity feeds the broadened ensemble at rate N*g2**2/delta_in,
    so the molecule cooperativity is

        C_pm = f2**2 / (kappa * N*g2**2 / (2*delta_in))
    """
    if p.g2 == 0:
        raise ParameterError("c_pm undefined for g2 = 0 (no ensemble coupling)")
    c_atom = p.g1 ** 2 / (p.kappa * p.gamma)
    c_pm = 2.0 * p.f2 ** 2 * p.delta_in / (p.kappa * p.collective_coupling)
    return Cooperativities(c_atom=c_atom, c_pm=c_pm)


def second_condition_target(p: SystemParams) -> float:
    """Matched value of N*g2**2/delta_in: delta_in*(kappa/2)/(delta_in + kappa/2)."""
    return p.delta_in * (p.kappa / 2.0) / (p.delta_in + p.kappa / 2.0)


@dataclass(frozen=True)
class MatchingReport:
    """Residuals of the three impedance-matching conditions.

    Conditions, in order: C_pm = 1; N*g2**2/delta_in equals the matched
    feed rate; delta_in = kappa/2.  A condition is matched when its
    residual is at most `tolerance`.
    """

    c_pm_residual: float
    second_condition_residual: float
    third_condition_residual: float
    tolerance: float

    @property
    def c_pm_matched(self) -> bool:
        return self.c_pm_residual <= self.tolerance

    @property
    def second_condition_matched(self) -> bool:
        return self.second_condition_residual <= self.tolerance

    @property
    def third_condition_matched(self) -> bool:
        return self.third_condition_residual <= self.tolerance

    @property
    def all_matched(self) -> bool:
        return (self.c_pm_matched and self.second_condition_matched
                and self.third_condition_matched)

    def to_dict(self) -> dict:
        return {
            "c_pm_residual": self.c_pm_residual,
            "c_pm_matched": self.c_pm_matched,
            "second_condition_residual": self.second_condition_residual,
            "second_condition_matched": self.second_condition_matched,
            "third_condition_residual": self.third_condition_residual,
            "third_condition_matched": self.third_condition_matched,
            "all_matched": self.all_matched,
            "tolerance": self.tolerance,
        }


def check_matching(p: SystemParams, tol: float = 1e-9) -> MatchingReport:
    """Evaluate the three matching residuals without modifying anything.

    The first residual is |C_pm - 1| (absolute), the second is the relative
    residual of the feed-rate condition, the third is |delta_in - kappa/2|/kappa.
    """
    if tol <= 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    c = cooperativities(p)
    target = second_condition_target(p)
    second = abs(p.collective_coupling / p.delta_in - target) / target
    third = abs(p.delta_in - p.kappa / 2.0) / p.kappa
    return MatchingReport(
        c_pm_residual=abs(c.c_pm - 1.0),
        second_condition_residual=second,
        third_condition_residual=third,
        tolerance=tol,
    )


def solve_matched_params(
    kappa: float,
    c_atom_target: float,
    *,
    gamma: float | None = None,
    n_atoms: int = 1000,
    delta_c: float = 0.0,
    t2: float = math.inf,
) -> SystemParams:
    """Construct a parameter set satisfying all three matching conditions.

    delta_in = kappa/2 fixes the line width, the feed-rate condition then
    pins N*g2**2 = kappa**2/8, and C_pm = 1 pins f2.  The control atom
    coupling realizes the requested single-atom cooperativity with the
    given gamma (default gamma = kappa); c_atom_target = 0 decouples it.
    """
    if kappa <= 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if c_atom_target < 0:
        raise ParameterError(f"c_atom_target must be >= 0, got {c_atom_target}")
    if gamma is None:
        gamma = kappa
    delta_in = kappa / 2.0
    ng2sq = delta_in ** 2 * (kappa / 2.0) / (delta_in + kappa / 2.0)
    f2 = math.sqrt(kappa * ng2sq / (2.0 * delta_in))
    g1 = math.sqrt(c_atom_target * kappa * gamma)
    g2 = math.sqrt(ng2sq / n_atoms)
    p = SystemParams(
        kappa=kappa, gamma=gamma, g1=g1, g2=g2, f2=f2,
        n_atoms=n_atoms, delta_in=delta_in, delta_c=delta_c, t2=t2,
    )
    report = check_matching(p, tol=1e-12)
    if not (report.c_pm_matched and report.second_condition_matched
            and report.third_condition_matched):
        raise ParameterError(f"matched solve failed self-check: {report.to_dict()}")
    return p


# ---------------------------------------------------------------- serialization

def params_to_json(p: SystemParams) -> str:
    return json.dumps(p.to_dict(), indent=2, sort_keys=True)


def params_from_dict(d: dict) -> SystemParams:
    unknown = set(d) - set(PARAM_KEYS)
    if unknown:
        raise ParameterError(f"unknown parameter keys: {sorted(unknown)}; "
                             f"accepted keys: {list(PARAM_KEYS)}")
    missing = set(PARAM_KEYS) - {"delta_c", "t2", "unit_convention"} - set(d)
    if missing:
        raise ParameterError(f"missing parameter keys: {sorted(missing)}")
    d = dict(d)
    t2 = d.get("t2", math.inf)
    if isinstance(t2, str):
        if t2 not in ("inf", "Infinity"):
            raise ParameterError(f"t2 must be a number or 'inf', got {t2!r}")
        t2 = math.inf
    d["t2"] = t2
    if "n_atoms" in d:
        d["n_atoms"] = int(d["n_atoms"])
    return SystemParams(**d)


def params_from_json(text: str) -> SystemParams:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"parameter file is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ParameterError("parameter file must contain a JSON object")
    return params_from_dict(d)


def save_params(p: SystemParams, path: str | Path) -> None:
    Path(path).write_text(params_to_json(p) + "\n")


def load_params(path: str | Path) -> SystemParams:
    return params_from_json(Path(path).read_text())


def params_digest(p: SystemParams) -> str:
    """Short stable hash identifying a parameter set in exported artifacts."""
    blob = json.dumps(p.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
