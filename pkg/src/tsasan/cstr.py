"""Closed-loop CSTR simulator with injectable faults.

The plant is a jacketed first-order exothermic reactor. A velocity-form PI
controller manipulates the coolant flow ``Q_c`` to hold the reactor
temperature at the operating-mode setpoint. Three operating modes differ
only in that setpoint (+0, +5, +10 K). Nine faults perturb inputs, sensors
or heat-transfer coefficients as ramps or exponential decays starting at a
fixed onset.

State vector: ``(C, T, T_c, Q_c)``. Time unit: minutes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetError, SimulationError

SCHEMA_VERSION = 1

MODE_IDS = ("M1", "M2", "M3")
FAULT_IDS = ("H", "F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8", "F9")
VARIABLES = ("C_i", "T_i", "C", "T", "T_c", "T_ci", "Q_c")

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class CstrParams:
    """Plant, controller and noise configuration.

    ``dHr`` is the heat released per mole reacted (the magnitude of the
    reaction enthalpy); the heat-transfer coefficient is ``UA = a0 * Q_c**b0``.
    """

    Q: float = 100.0            # feed flow, L/min
    V: float = 150.0            # reactor volume, L
    V_c: float = 10.0           # jacket volume, L
    C_i0: float = 2.0           # inlet concentration, mol/L
    T_i0: float = 330.0         # inlet temperature, K
    T_ci0: float = 300.0        # coolant inlet temperature, K
    k0: float = 1.6003201896e6   # 1/min (k = 1/min at 350 K)
    E_over_R: float = 5000.0    # K
    dHr: float = 7170.0         # J/mol
    rho: float = 1000.0         # g/L
    rho_c: float = 1000.0       # g/L
    Cp: float = 0.239           # J/(g K)
    Cpc: float = 4.18           # J/(g K)
    a0: float = 2500.0          # UA = a * Q_c**b, J/(min K)
    b0: float = 0.5
    T_setpoint: float = 350.0   # mode M1 setpoint, K
    Kp: float = 4.0             # L/min per K
    Ki: float = 2.0             # L/min^2 per K
    Qc_min: float = 0.0
    Qc_max: float = 150.0
    dt: float = 0.05            # RK4 step, min
    sample_interval: float = 1.0
    duration: float = 1200.0
    noise_std: tuple = (0.002, 0.2, 0.2)
    meas_noise_std: tuple = (0.002, 0.1, 0.002, 0.1, 0.1, 0.1, 0.3)

    def validate(self) -> None:
        positive = ("Q", "V", "V_c", "C_i0", "T_i0", "T_ci0", "k0", "E_over_R",
                    "dHr", "rho", "rho_c", "Cp", "Cpc", "a0", "b0", "T_setpoint",
                    "dt", "sample_interval", "duration", "Qc_max")
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigurationError(f"CstrParams.{name} must be positive, got {value}")
        if self.Kp < 0 or self.Ki <= 0:
            raise ConfigurationError("controller gains must satisfy Kp >= 0, Ki > 0")
        if not 0 <= self.Qc_min < self.Qc_max:
            raise ConfigurationError("need 0 <= Qc_min < Qc_max")
        steps = self.sample_interval / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError(
                f"integration step {self.dt} does not divide sampling interval {self.sample_interval}")
        if len(self.noise_std) != 3 or any(s < 0 for s in self.noise_std):
            raise ConfigurationError("noise_std needs three non-negative entries")
        if len(self.meas_noise_std) != len(VARIABLES) or any(s < 0 for s in self.meas_noise_std):
            raise ConfigurationError(f"meas_noise_std needs {len(VARIABLES)} non-negative entries")

    def noiseless(self) -> "CstrParams":
        return dataclasses.replace(self, noise_std=(0.0,) * 3,
                                   meas_noise_std=(0.0,) * len(VARIABLES))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_std"] = list(self.noise_std)
        d["meas_noise_std"] = list(self.meas_noise_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CstrParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown CSTR parameters: {sorted(unknown)}")
        kw = dict(d)
        for key in ("noise_std", "meas_noise_std"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class ModeSpec:
    mode_id: str
    temp_setpoint: float


def mode_spec(mode_id: str, params: CstrParams | None = None) -> ModeSpec:
    params = params or CstrParams()
    if mode_id not in MODE_IDS:
        raise ConfigurationError(f"unknown mode {mode_id!r}; valid modes: {', '.join(MODE_IDS)}")
    offset = 5.0 * MODE_IDS.index(mode_id)
    return ModeSpec(mode_id, params.T_setpoint + offset)


@dataclass(frozen=True)
class FaultSpec:
    """One row of the fault table.

    ``target`` names the perturbed quantity. Sensor targets (``C``, ``T``,
    ``T_c``, ``Q_c``) bias the measurement only; ``T`` is the controlled
    measurement, so that bias propagates through the loop. ``kind`` is
    ``ramp`` (additive ``rate * (t - onset)``) or ``decay`` (multiplicative
    ``exp(-rate * (t - onset))``).
    """

    fault_id: str
    target: str | None = None
    kind: str | None = None
    rate: float = 0.0
    onset_min: float = 200.0

    def offset(self, t: float) -> float:
        if self.kind != "ramp" or t < self.onset_min:
            return 0.0
        return self.rate * (t - self.onset_min)

    def offset_rate(self, t: float) -> float:
        if self.kind != "ramp" or t < self.onset_min:
            return 0.0
        return self.rate

    def factor(self, t: float) -> float:
        if self.kind != "decay" or t < self.onset_min:
            return 1.0
        return math.exp(-self.rate * (t - self.onset_min))


_FAULT_TABLE = {
    "H": (None, None, 0.0),
    "F1": ("C_i", "ramp", 0.001),
    "F2": ("T_i", "ramp", 0.05),
    "F3": ("C", "ramp", 0.001),
    "F4": ("T", "ramp", 0.05),
    "F5": ("Q_c", "ramp", -0.1),
    "F6": ("T_ci", "ramp", 0.05),
    "F7": ("T_c", "ramp", 0.05),
    "F8": ("a", "decay", 0.0005),
    "F9": ("b", "decay", 0.001),
}


def fault_spec(fault_id: str, onset_min: float = 200.0) -> FaultSpec:
    if fault_id not in _FAULT_TABLE:
        raise ConfigurationError(
            f"unknown fault {fault_id!r}; valid faults: {', '.join(FAULT_IDS)}")
    target, kind, rate = _FAULT_TABLE[fault_id]
    return FaultSpec(fault_id, target, kind, rate, onset_min)


@dataclass
class SimRun:
    """A sampled trajectory, simulated or ingested from CSV."""

    mode_id: str
    fault_id: str
    measurements: np.ndarray          # (n_samples, n_vars)
    onset_index: int
    seed: int | None = None
    params_snapshot: CstrParams | None = None
    variables: tuple = VARIABLES
    time_min: np.ndarray | None = None
    states: np.ndarray | None = None  # true (C, T, T_c, Q_c) at sample times

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.time_min is None:
            self.time_min = np.arange(self.measurements.shape[0], dtype=np.float64)

    @property
    def n_samples(self) -> int:
        return self.measurements.shape[0]

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode_id": self.mode_id,
            "fault_id": self.fault_id,
            "onset_index": int(self.onset_index),
            "seed": self.seed,
            "variables": list(self.variables),
            "params": self.params_snapshot.to_dict() if self.params_snapshot else None,
        }


def _rhs(p: CstrParams, sp: float, fault: FaultSpec, t: float, x, w):
    """Closed-loop derivatives. ``w`` is the process noise on (C, T, T_c)."""
    C, T, Tc, Qc = x
    tgt = fault.target
    Ci = p.C_i0 + (fault.offset(t) if tgt == "C_i" else 0.0)
    Ti = p.T_i0 + (fault.offset(t) if tgt == "T_i" else 0.0)
    Tci = p.T_ci0 + (fault.offset(t) if tgt == "T_ci" else 0.0)
    a = p.a0 * (fault.factor(t) if tgt == "a" else 1.0)
    b = p.b0 * (fault.factor(t) if tgt == "b" else 1.0)

    k = p.k0 * math.exp(-p.E_over_R / T)
    UA = a * Qc ** b if Qc > 0.0 else 0.0
    rcp = p.rho * p.Cp
    dC = p.Q / p.V * (Ci - C) - k * C + w[0]
    dT = (p.Q / p.V * (Ti - T) + p.dHr * k * C / rcp
          - UA / (rcp * p.V) * (T - Tc) + w[1])
    dTc = Qc / p.V_c * (Tci - Tc) + UA / (p.rho_c * p.Cpc * p.V_c) * (T - Tc) + w[2]

    # velocity-form PI on the (possibly biased) temperature measurement
    if tgt == "T":
        T_meas, dT_meas = T + fault.offset(t), dT + fault.offset_rate(t)
    else:
        T_meas, dT_meas = T, dT
    dQc = p.Kp * dT_meas + p.Ki * (T_meas - sp)
    if (Qc <= p.Qc_min and dQc < 0.0) or (Qc >= p.Qc_max and dQc > 0.0):
        dQc = 0.0
    return (dC, dT, dTc, dQc)


def _rk4_step(p, sp, fault, t, x, w, h):
    k1 = _rhs(p, sp, fault, t, x, w)
    x2 = tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k1))
    k2 = _rhs(p, sp, fault, t + 0.5 * h, x2, w)
    x3 = tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k2))
    k3 = _rhs(p, sp, fault, t + 0.5 * h, x3, w)
    x4 = tuple(xi + h * ki for xi, ki in zip(x, k3))
    k4 = _rhs(p, sp, fault, t + h, x4, w)
    out = [xi + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
           for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]
    out[3] = min(max(out[3], p.Qc_min), p.Qc_max)
    return tuple(out)


def _check_state(t, x):
    if not all(math.isfinite(v) and abs(v) <= DIVERGENCE_LIMIT for v in x):
        raise SimulationError(
            f"integration diverged at t={t:.3f} min, state (C, T, T_c, Q_c)={x}")


def _integrate(p, sp, fault, x0, n_samples, w=None, t0=0.0):
    """Integrate and return the state at each sample time (first row is x0)."""
    steps = int(round(p.sample_interval / p.dt))
    h = p.sample_interval / steps
    out = np.empty((n_samples, 4))
    x = tuple(float(v) for v in x0)
    zero = (0.0, 0.0, 0.0)
    for k in range(n_samples):
        out[k] = x
        if k == n_samples - 1:
            break
        tk = t0 + k * p.sample_interval
        wk = zero if w is None else tuple(w[k])
        for m in range(steps):
            x = _rk4_step(p, sp, fault, tk + m * h, x, wk, h)
        _check_state(tk + p.sample_interval, x)
    return out


def check_mode_stability(x, threshold: float, window: int, start: int = 0,
                         dt: float = 1.0) -> bool:
    """Bounded difference-quotient test over ``window`` samples from ``start``.

    True iff ``|x(t) - x(t0)| / (t - t0) < threshold`` for every later sample
    in the window, with ``t0`` the window start and samples ``dt`` apart.
    """
    if window < 2:
        raise ConfigurationError("stability window must span at least 2 samples")
    x = np.asarray(x, dtype=np.float64)
    if start < 0 or start + window > x.shape[0]:
        raise ConfigurationError(
            f"window [{start}, {start + window}) exceeds sequence length {x.shape[0]}")
    seg = x[start:start + window]
    elapsed = dt * np.arange(1, window)
    slopes = np.abs(seg[1:] - seg[0]) / elapsed
    return bool(np.all(slopes < threshold))


@lru_cache(maxsize=64)
def steady_state(params: CstrParams, mode: ModeSpec, threshold: float = 0.01,
                 window: int = 60, max_minutes: float = 2000.0) -> tuple:
    """Settle the noiseless healthy closed loop at the mode setpoint.

    Runs in ``window``-minute chunks until the temperature passes the
    stability test over a chunk and the derivatives have died out.
    """
    params.validate()
    p = params.noiseless()
    healthy = fault_spec("H")
    sp = mode.temp_setpoint
    # initial guess: setpoint temperature, isothermal-conversion concentration
    k = p.k0 * math.exp(-p.E_over_R / sp)
    x = (p.C_i0 / (1.0 + k * p.V / p.Q), sp, sp - 20.0, 0.5 * (p.Qc_min + p.Qc_max))
    elapsed = 0.0
    while elapsed < max_minutes:
        traj = _integrate(p, sp, healthy, x, window + 1, t0=0.0)
        x = tuple(traj[-1])
        elapsed += window * p.sample_interval
        resid = max(abs(v) for v in _rhs(p, sp, healthy, 0.0, x, (0.0, 0.0, 0.0)))
        if check_mode_stability(traj[:, 1], threshold, window + 1) and resid < 1e-7:
            if not p.Qc_min < x[3] < p.Qc_max:
                raise ConfigurationError(
                    f"coolant flow saturated at steady state for {mode.mode_id}: Q_c={x[3]}")
            return x
    raise ConfigurationError(
        f"closed loop did not settle within {max_minutes} min for mode {mode.mode_id} "
        f"(setpoint {sp} K); last state {x}")


def _measure(p: CstrParams, fault: FaultSpec, t: np.ndarray, states: np.ndarray) -> np.ndarray:
    off = np.where(t >= fault.onset_min, fault.rate * (t - fault.onset_min), 0.0) \
        if fault.kind == "ramp" else np.zeros_like(t)

    def biased(name, base):
        return base + off if fault.target == name else base

    cols = [
        biased("C_i", np.full_like(t, p.C_i0)),
        biased("T_i", np.full_like(t, p.T_i0)),
        biased("C", states[:, 0]),
        biased("T", states[:, 1]),
        biased("T_c", states[:, 2]),
        biased("T_ci", np.full_like(t, p.T_ci0)),
        biased("Q_c", states[:, 3]),
    ]
    return np.stack(cols, axis=1)


def simulate(params: CstrParams, mode: ModeSpec, fault: FaultSpec, seed: int) -> SimRun:
    """Simulate one run, warm-started at the mode's steady state.

    Process noise is drawn once per sampling interval and held over it, so
    trajectories do not depend on the RK4 step beyond truncation error.
    """
    params.validate()
    n = int(round(params.duration / params.sample_interval))
    onset_index = int(math.ceil(fault.onset_min / params.sample_interval - 1e-9))
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, 3)) * np.asarray(params.noise_std)
    v = rng.standard_normal((n, len(VARIABLES))) * np.asarray(params.meas_noise_std)
    x0 = steady_state(params, mode)
    states = _integrate(params, mode.temp_setpoint, fault, x0, n, w)
    t = np.arange(n, dtype=np.float64) * params.sample_interval
    meas = _measure(params, fault, t, states) + v
    if not np.all(np.isfinite(meas)):
        raise SimulationError(f"non-finite measurement in {mode.mode_id}/{fault.fault_id}")
    return SimRun(mode.mode_id, fault.fault_id, meas, onset_index, seed, params,
                  VARIABLES, t, states)


def export_run(run: SimRun, path) -> tuple[Path, Path]:
    """Write ``<path>`` as CSV (17 significant digits) plus a ``.json`` sidecar."""
    path = Path(path)
    if path.suffix != ".csv":
        path = path.with_suffix(".csv")
    sidecar = path.with_suffix(".json")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time_min", *run.variables])
            for t, row in zip(run.time_min, run.measurements):
                writer.writerow([f"{t:.17g}", *(f"{val:.17g}" for val in row)])
        with open(sidecar, "w") as fh:
            json.dump(run.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DatasetError(f"cannot write run files at {path}: {exc}") from exc
    return path, sidecar


def load_run(path) -> SimRun:
    """Read a run written by :func:`export_run` (CSV plus sidecar manifest)."""
    from .datasets import import_external_csv

    path = Path(path)
    sidecar = path.with_suffix(".json")
    try:
        with open(sidecar) as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read run manifest {sidecar}: {exc}") from exc
    run = import_external_csv(path, meta["mode_id"], meta["fault_id"], meta["onset_index"])
    run.seed = meta.get("seed")
    if meta.get("params"):
        run.params_snapshot = CstrParams.from_dict(meta["params"])
    return run


def run_filename(mode_id: str, fault_id: str, seed: int) -> str:
    return f"{mode_id}_{fault_id}_s{seed}.csv"


def _simulate_job(args):
    params, mode_id, fault_id, seed = args
    return simulate(params, mode_spec(mode_id, params), fault_spec(fault_id), seed)


def simulate_many(params: CstrParams, jobs_spec, jobs: int = 1) -> list[SimRun]:
    """Simulate ``(mode_id, fault_id, seed)`` triples, optionally in processes."""
    tasks = [(params, m, f, s) for m, f, s in jobs_spec]
    if jobs <= 1 or len(tasks) <= 1:
        return [_simulate_job(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as pool:
        return list(pool.map(_simulate_job, tasks))


__all__ = [
    "CstrParams", "ModeSpec", "FaultSpec", "SimRun", "MODE_IDS", "FAULT_IDS",
    "VARIABLES", "mode_spec", "fault_spec", "simulate", "simulate_many",
    "check_mode_stability", "steady_state", "export_run", "load_run", "run_filename",
]
