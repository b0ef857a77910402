"""Multi-start box-constrained quasi-Newton synthesis of smooth controllers.

Controls are parametrised either by Hermite splines (knot values at
``t_1..t_K`` and slopes at ``t_0..t_K`` per field) or by sine sums
(amplitudes then frequencies per field).  The objective is the infidelity
plus a quadratic penalty on amplitude excess; gradients are central finite
differences evaluated in one batched propagation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields as dc_fields
from typing import Any

import numpy as np
from scipy.optimize import minimize

from .fidelity import FidelityKind, Gate, StateTransfer, kind_from_dict
from .magnus import TimeGrid, choose_step, expm_skew, final_propagator, gammas_from_samples, ordered_product
from .model import (
    DEFAULT_ANHARMONICITY,
    ControlField,
    ControlSystem,
    FourierField,
    SplineField,
    field_from_dict,
    hermite_eval,
    hermite_peak,
    preset_spin_ring,
    preset_transmon,
)

log = logging.getLogger(__name__)

ARCHIVE_FORMAT = "magsens-controllers/1"
WORKERS_ENV = "MAGSENS_WORKERS"


class ConfigError(ValueError):
    """Invalid synthesis configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


# Study settings for the transmon case; the model-level default anharmonicity
# stays at 1.0, where no restart reaches the fidelity threshold.
TRANSMON_STUDY = {"anharmonicity": 5.0, "amplitude_bound": 4.0, "stop_infidelity": 5e-3}


@dataclass
class SynthesisConfig:
    system: str = "spin_ring"
    basis: str = "spline"
    t_final: float = 5.0
    amplitude_bound: float | None = 5.0
    segments: int = 3
    slope_bound: float | None = None
    terms: int = 3
    alpha_bound: float = 2.0
    omega_max: float = 10.0
    steps_per_interval: int | None = None
    steps: int | None = None
    step_margin: float = 1.0
    threshold: float = 0.99
    restarts: int = 30
    seed: int = 0
    max_iter: int = 500
    max_fun: int = 15000
    ftol: float = 1e-12
    gtol: float = 1e-8
    penalty_weight: float = 100.0
    stop_infidelity: float | None = None
    fd_step: float = 1e-6
    anharmonicity: float = DEFAULT_ANHARMONICITY
    custom_system: dict | None = None
    custom_kind: dict | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.system not in ("spin_ring", "transmon", "custom"):
            raise ConfigError("must be 'spin_ring', 'transmon' or 'custom'", "system")
        if self.system == "custom" and (self.custom_system is None or self.custom_kind is None):
            raise ConfigError("custom systems need 'custom_system' and 'custom_kind'", "custom_system")
        if self.basis not in ("spline", "fourier"):
            raise ConfigError("must be 'spline' or 'fourier'", "basis")
        positive = ["t_final", "alpha_bound", "omega_max", "fd_step", "penalty_weight"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", name)
        if self.amplitude_bound is not None and not self.amplitude_bound > 0:
            raise ConfigError("must be positive", "amplitude_bound")
        if self.stop_infidelity is not None and not 0 < self.stop_infidelity < 1:
            raise ConfigError("must lie in (0, 1)", "stop_infidelity")
        if self.slope_bound is not None and not self.slope_bound > 0:
            raise ConfigError("must be positive", "slope_bound")
        for name in ("segments", "terms", "restarts", "max_iter", "max_fun"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError("must be a positive integer", name)
        for name in ("steps", "steps_per_interval"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                raise ConfigError("must be a positive integer", name)
        if not 0 < self.threshold < 1:
            raise ConfigError("must lie in (0, 1)", "threshold")
        if not 0 < self.step_margin <= 1:
            raise ConfigError("must lie in (0, 1]", "step_margin")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")

    @classmethod
    def spin_ring(cls, **overrides) -> "SynthesisConfig":
        base = dict(system="spin_ring", basis="spline", t_final=5.0, segments=3, amplitude_bound=5.0,
                    steps_per_interval=50)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def transmon(cls, **overrides) -> "SynthesisConfig":
        base = dict(system="transmon", basis="fourier", t_final=2.0, terms=3, alpha_bound=2.0,
                    omega_max=10.0, amplitude_bound=TRANSMON_STUDY["amplitude_bound"], steps=50,
                    anharmonicity=TRANSMON_STUDY["anharmonicity"],
                    stop_infidelity=TRANSMON_STUDY["stop_infidelity"])
        base.update(overrides)
        return cls(**base)

    @property
    def effective_amplitude_bound(self) -> float:
        if self.amplitude_bound is not None:
            return float(self.amplitude_bound)
        if self.basis == "fourier":
            return self.terms * self.alpha_bound
        raise ConfigError("spline synthesis needs an amplitude bound", "amplitude_bound")

    @property
    def effective_slope_bound(self) -> float:
        if self.slope_bound is not None:
            return float(self.slope_bound)
        return 2.0 * self.effective_amplitude_bound * self.segments / self.t_final

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, lines: dict[str, int] | None = None) -> "SynthesisConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level must be an object")
        known = {f.name: f for f in dc_fields(cls)}
        lines = lines or {}
        for key in data:
            if key not in known:
                raise ConfigError("unknown key", key, lines.get(key))
        kwargs = {}
        for key, value in data.items():
            expected = known[key].type
            if "float" in expected and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if "float" in expected and value is not None and not isinstance(value, float):
                raise ConfigError(f"expected a number, got {type(value).__name__}", key, lines.get(key))
            if expected.startswith("int") and value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError(f"expected an integer, got {type(value).__name__}", key, lines.get(key))
            if expected == "str" and not isinstance(value, str):
                raise ConfigError(f"expected a string, got {type(value).__name__}", key, lines.get(key))
            kwargs[key] = value
        preset = kwargs.get("system", "spin_ring")
        try:
            if preset == "spin_ring":
                return cls.spin_ring(**kwargs)
            if preset == "transmon":
                return cls.transmon(**kwargs)
            return cls(**kwargs)
        except ConfigError as err:
            if err.field is not None and err.line is None and err.field in lines:
                raise ConfigError(str(err).split(": ", 1)[-1], err.field, lines[err.field]) from None
            raise


def load_config(path: str | os.PathLike) -> SynthesisConfig:
    """Read a JSON config; syntax and field errors carry line numbers."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err.msg} (column {err.colno})", line=err.lineno) from None
    return SynthesisConfig.from_dict(data, _key_lines(text))


def _key_lines(text: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith('"') and '":' in stripped:
            out.setdefault(stripped[1:stripped.index('"', 1)], lineno)
    return out


# ---------------------------------------------------------------------------
# Problem setup
# ---------------------------------------------------------------------------


def build_system(config: SynthesisConfig) -> tuple[ControlSystem, FidelityKind]:
    if config.system == "spin_ring":
        system, (psi0, psif) = preset_spin_ring()
        return system, StateTransfer(psi0, psif)
    if config.system == "transmon":
        system, target = preset_transmon(config.anharmonicity)
        return system, Gate(target)
    return ControlSystem.from_dict(config.custom_system), kind_from_dict(config.custom_kind)


def build_grid(config: SynthesisConfig, system: ControlSystem) -> TimeGrid:
    if config.steps is not None:
        return TimeGrid(config.t_final, config.steps)
    intervals = config.segments if config.basis == "spline" else 1
    kappa = config.steps_per_interval
    if kappa is None:
        kappa = choose_step(system, config.effective_amplitude_bound, config.t_final / intervals, config.step_margin)
    return TimeGrid(config.t_final, kappa * intervals)


class Problem:
    """Parameter layout, batched objective and realised fields for one config."""

    def __init__(self, config: SynthesisConfig):
        self.config = config
        self.system, self.kind = build_system(config)
        self.grid = build_grid(config, self.system)
        self.n_fields = self.system.n_controls
        self.bound = config.effective_amplitude_bound
        self.block = 2 * config.segments + 1 if config.basis == "spline" else 2 * config.terms
        lo, hi = self._field_box()
        self.lower = np.tile(lo, self.n_fields)
        self.upper = np.tile(hi, self.n_fields)

    @property
    def n_params(self) -> int:
        return self.block * self.n_fields

    def _field_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        if c.basis == "spline":
            hi = np.concatenate([np.full(c.segments, self.bound), np.full(c.segments + 1, c.effective_slope_bound)])
            return -hi, hi
        lo = np.concatenate([np.full(c.terms, -c.alpha_bound), np.zeros(c.terms)])
        hi = np.concatenate([np.full(c.terms, c.alpha_bound), np.full(c.terms, c.omega_max)])
        return lo, hi

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        c = self.config
        if c.basis == "spline":
            x = rng.uniform(-self.bound, self.bound, self.n_params)
            return np.clip(x, self.lower, self.upper)
        return rng.uniform(self.lower, self.upper)

    def _split(self, X: np.ndarray):
        X = np.asarray(X, dtype=float).reshape(X.shape[:-1] + (self.n_fields, self.block))
        c = self.config
        if c.basis == "spline":
            K = c.segments
            values = np.concatenate([np.zeros(X.shape[:-1] + (1,)), X[..., :K]], axis=-1)
            return values, X[..., K:]
        J = c.terms
        return X[..., :J], X[..., J:]

    def fields(self, x: np.ndarray) -> list[ControlField]:
        first, second = self._split(np.asarray(x, dtype=float))
        t_f = self.config.t_final
        if self.config.basis == "spline":
            return [SplineField(t_f, first[m, 1:], second[m]) for m in range(self.n_fields)]
        return [FourierField(t_f, first[m], second[m]) for m in range(self.n_fields)]

    def params(self, fields: list[ControlField]) -> np.ndarray:
        if self.config.basis == "spline":
            return np.concatenate([np.concatenate([f.knot_values, f.knot_slopes]) for f in fields])
        return np.concatenate([np.concatenate([f.amplitudes, f.frequencies]) for f in fields])

    def _samples(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        first, second = self._split(X)
        if self.config.basis == "spline":
            return hermite_eval(first, second, self.config.t_final, t)
        return np.einsum("...j,...jt->...t", first, np.sin(second[..., None] * t))

    def infidelity_batch(self, X: np.ndarray) -> np.ndarray:
        """Infidelity for each row of ``X`` (shape ``(P, n_params)``)."""
        g = self.grid
        knots = self._samples(X, g.times)
        mids = self._samples(X, g.midpoints)
        U = ordered_product(expm_skew(gammas_from_samples(self.system, knots, mids, g.h)))
        if isinstance(self.kind, StateTransfer):
            amp = np.einsum("i,...ij,j->...", np.conj(self.kind.psif), U, self.kind.psi0)
            fid = np.abs(amp) ** 2
        else:
            fid = np.abs(np.einsum("ij,...ij->...", np.conj(self.kind.target), U)) / self.system.dim
        return 1.0 - fid

    def penalty_batch(self, X: np.ndarray) -> np.ndarray:
        first, second = self._split(X)
        if self.config.basis == "spline":
            peaks = hermite_peak(first, second, self.config.t_final)
        else:
            t = np.linspace(0.0, self.config.t_final, 20 * self.grid.steps + 1)
            peaks = np.abs(np.einsum("...j,...jt->...t", first, np.sin(second[..., None] * t)))
        excess = np.maximum(peaks - self.bound, 0.0)
        return self.config.penalty_weight * np.sum(excess**2, axis=(-2, -1))

    def objective_batch(self, X: np.ndarray) -> np.ndarray:
        return self.infidelity_batch(X) + self.penalty_batch(X)

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite control parameters")
        return float(self.objective_batch(x[None, :])[0])

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite control parameters")
        n = x.size
        steps = self.config.fd_step * np.maximum(1.0, np.abs(x))
        X = np.repeat(x[None, :], 2 * n + 1, axis=0)
        idx = np.arange(n)
        X[1 + idx, idx] += steps
        X[1 + n + idx, idx] -= steps
        vals = self.objective_batch(X)
        grad = (vals[1 : n + 1] - vals[n + 1 :]) / (2.0 * steps)
        return float(vals[0]), grad

    def fidelity(self, fields: list[ControlField]) -> float:
        return self.kind.fidelity(final_propagator(self.system, fields, self.grid))

    def repair(self, fields: list[ControlField]) -> list[ControlField]:
        """Scale any field whose peak exceeds the bound back onto it."""
        out = []
        for f in fields:
            peak = f.peak()
            out.append(f.scaled(self.bound / peak * (1.0 - 1e-12)) if peak > self.bound else f)
        return out


def objective(config: SynthesisConfig, x: np.ndarray) -> float:
    """Infidelity plus amplitude penalty at parameter vector ``x``."""
    return Problem(config).objective(x)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class Controller:
    params: np.ndarray
    fields: list[ControlField]
    fidelity: float
    restart: int
    seed: int
    iterations: int
    evaluations: int
    objective: float
    repaired: bool = False
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def infidelity(self) -> float:
        return 1.0 - self.fidelity

    @property
    def id(self) -> str:
        return f"r{self.restart:04d}"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "restart": self.restart,
            "seed": self.seed,
            "params": [float(v) for v in self.params],
            "fields": [f.to_dict() for f in self.fields],
            "fidelity": self.fidelity,
            "objective": self.objective,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "repaired": self.repaired,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Controller":
        return cls(
            params=np.asarray(data["params"], dtype=float),
            fields=[field_from_dict(f) for f in data["fields"]],
            fidelity=float(data["fidelity"]),
            restart=int(data["restart"]),
            seed=int(data["seed"]),
            iterations=int(data["iterations"]),
            evaluations=int(data["evaluations"]),
            objective=float(data["objective"]),
            repaired=bool(data.get("repaired", False)),
        )


def _restart_rng(config: SynthesisConfig, restart: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(restart,)))


def run_restart(config: SynthesisConfig, restart: int, problem: Problem | None = None) -> Controller:
    """One L-BFGS-B descent from a seeded random start."""
    problem = Problem(config) if problem is None else problem
    x0 = problem.initial_point(_restart_rng(config, restart))
    history = [problem.objective(x0)]

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))
        if config.stop_infidelity is not None and intermediate_result.fun < config.stop_infidelity:
            raise StopIteration

    res = minimize(
        problem.value_and_grad,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(problem.lower, problem.upper)),
        callback=record,
        options={"maxiter": config.max_iter, "maxfun": config.max_fun, "ftol": config.ftol, "gtol": config.gtol},
    )
    fields = problem.fields(res.x)
    repaired_fields = problem.repair(fields)
    repaired = any(a is not b for a, b in zip(fields, repaired_fields))
    params = problem.params(repaired_fields)
    return Controller(
        params=params,
        fields=repaired_fields,
        fidelity=problem.fidelity(repaired_fields),
        restart=restart,
        seed=config.seed,
        iterations=int(res.nit),
        evaluations=int(res.nfev),
        objective=float(res.fun),
        repaired=repaired,
        history=history,
    )


def _worker(args):
    config, restart = args
    return run_restart(config, restart)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def optimize_all(config: SynthesisConfig, workers: int | None = None) -> list[Controller]:
    """Every restart's result, in restart order."""
    workers = worker_count() if workers is None else workers
    if workers > 1 and config.restarts > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_worker, [(config, r) for r in range(config.restarts)]))
    problem = Problem(config)
    out = []
    for r in range(config.restarts):
        ctrl = run_restart(config, r, problem)
        log.info("restart %d: fidelity %.6f after %d iterations", r, ctrl.fidelity, ctrl.iterations)
        out.append(ctrl)
    return out


def optimize(config: SynthesisConfig, workers: int | None = None) -> list[Controller]:
    """Feasible restarts above the fidelity threshold, best first (ties by restart index)."""
    problem = Problem(config)
    good = [
        c
        for c in optimize_all(config, workers)
        if c.fidelity > config.threshold and all(f.is_feasible(problem.bound) for f in c.fields)
    ]
    return sorted(good, key=lambda c: (-c.fidelity, c.restart))


def archive_dict(config: SynthesisConfig, controllers: list[Controller]) -> dict[str, Any]:
    problem = Problem(config)
    return {
        "format": ARCHIVE_FORMAT,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "system": problem.system.to_dict(),
        "kind": problem.kind.to_dict(),
        "grid": {"t_final": problem.grid.t_final, "steps": problem.grid.steps},
        "amplitude_bound": problem.bound,
        "controllers": [c.to_dict() for c in controllers],
    }


def dump_archive(config: SynthesisConfig, controllers: list[Controller]) -> str:
    return json.dumps(archive_dict(config, controllers), sort_keys=True, indent=1) + "\n"


@dataclass
class Archive:
    system: ControlSystem
    kind: FidelityKind
    grid: TimeGrid
    amplitude_bound: float
    controllers: list[Controller]
    config: dict
    config_hash: str


def load_archive(path: str | os.PathLike) -> Archive:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"unsupported archive format {data.get('format')!r}")
    return Archive(
        system=ControlSystem.from_dict(data["system"]),
        kind=kind_from_dict(data["kind"]),
        grid=TimeGrid(float(data["grid"]["t_final"]), int(data["grid"]["steps"])),
        amplitude_bound=float(data["amplitude_bound"]),
        controllers=[Controller.from_dict(c) for c in data["controllers"]],
        config=data["config"],
        config_hash=data["config_hash"],
    )
