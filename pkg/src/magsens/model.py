"""Control systems, uncertainty structures and control-field parametrizations.

A system is stored directly by its skew-Hermitian generators (hbar = 1):
``A(t) = B + sum_m u_m(t) C_m``.  Control fields are small immutable objects
exposing a vectorised ``values(t)`` method; the three concrete variants are a
C1 cubic Hermite spline pinned to zero at ``t = 0``, a sine-only Fourier sum
and a piecewise-constant field used in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SKEW_TOL = 1e-12
FEASIBILITY_RTOL = 1e-9


class DomainError(ValueError):
    """Evaluation point or interval outside the admissible domain."""


class ShapeError(ValueError):
    """Inconsistent dimensions between a system and its inputs."""


class NormalizationError(ValueError):
    """A zero matrix cannot be turned into a unit-norm structure."""


def is_skew_hermitian(X: np.ndarray, tol: float = SKEW_TOL) -> bool:
    X = np.asarray(X)
    return bool(np.max(np.abs(X + np.conj(np.swapaxes(X, -1, -2))), initial=0.0) <= tol)


def commutator(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return X @ Y - Y @ X


def basis_matrix(n: int, i: int, j: int) -> np.ndarray:
    """``E_ij`` with one-based indices."""
    E = np.zeros((n, n), dtype=complex)
    E[i - 1, j - 1] = 1.0
    return E


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """Drift generator ``B`` and control generators ``C_m``.

    Both are skew-Hermitian (``B = -i H0``, ``C_m = -i H_m``).
    """

    drift: np.ndarray
    controls: tuple[np.ndarray, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        drift = np.array(self.drift, dtype=complex)
        controls = tuple(np.array(c, dtype=complex) for c in self.controls)
        if drift.ndim != 2 or drift.shape[0] != drift.shape[1]:
            raise ShapeError(f"drift must be square, got shape {drift.shape}")
        n = drift.shape[0]
        if n < 2:
            raise ShapeError("system dimension must be at least 2")
        if not controls:
            raise ShapeError("at least one control matrix is required")
        for m, c in enumerate(controls, start=1):
            if c.shape != (n, n):
                raise ShapeError(f"control {m} has shape {c.shape}, expected {(n, n)}")
            if not is_skew_hermitian(c):
                raise ValueError(f"control {m} is not skew-Hermitian")
        if not is_skew_hermitian(drift):
            raise ValueError("drift is not skew-Hermitian")
        drift.flags.writeable = False
        for c in controls:
            c.flags.writeable = False
        labels = tuple(self.labels) or ("drift",) + tuple(f"control{m}" for m in range(1, len(controls) + 1))
        if len(labels) != len(controls) + 1:
            raise ShapeError("labels must name the drift and every control")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @property
    def control_stack(self) -> np.ndarray:
        return np.stack(self.controls)

    def norm_bound(self, amplitude_bound: float) -> float:
        """Spectral-norm bound ``||B|| + bound * sum_m ||C_m||`` on ``||A(t)||``."""
        return float(
            np.linalg.norm(self.drift, 2)
            + amplitude_bound * sum(np.linalg.norm(c, 2) for c in self.controls)
        )

    def perturbed(self, mu: int, delta: float, structure: np.ndarray | None = None) -> "ControlSystem":
        """Copy with ``delta * S`` added to the drift (``mu = 0``) or to control ``mu``.

        Adding ``delta * S_mu`` to ``C_mu`` is the same as the uncertain generator
        ``B + sum_m u_m C_m + delta u_mu S_mu``.
        """
        S = uncertainty_structure(self, mu).matrix if structure is None else np.asarray(structure)
        if mu == 0:
            return ControlSystem(self.drift + delta * S, self.controls, self.labels)
        controls = list(self.controls)
        controls[mu - 1] = controls[mu - 1] + delta * S
        return ControlSystem(self.drift, tuple(controls), self.labels)

    def to_dict(self) -> dict:
        def enc(X):
            return [[[float(z.real), float(z.imag)] for z in row] for row in X]

        return {
            "dim": self.dim,
            "drift": enc(self.drift),
            "controls": [enc(c) for c in self.controls],
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ControlSystem":
        def dec(rows):
            arr = np.asarray(rows, dtype=float)
            if arr.ndim != 3 or arr.shape[-1] != 2:
                raise ShapeError("matrices are encoded as rows of [re, im] pairs")
            return arr[..., 0] + 1j * arr[..., 1]

        system = cls(dec(data["drift"]), tuple(dec(c) for c in data["controls"]), tuple(data.get("labels", ())))
        if "dim" in data and int(data["dim"]) != system.dim:
            raise ShapeError(f"declared dim {data['dim']} does not match drift size {system.dim}")
        return system

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ControlSystem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class UncertaintyStructure:
    """Unit-Frobenius skew-Hermitian perturbation direction ``S_mu``."""

    index: int
    matrix: np.ndarray
    kind: str  # "drift" | "control" | "custom-drift"

    def __post_init__(self):
        S = np.array(self.matrix, dtype=complex)
        if not is_skew_hermitian(S):
            raise ValueError("uncertainty structure must be skew-Hermitian")
        if abs(np.linalg.norm(S) - 1.0) > SKEW_TOL:
            raise NormalizationError("uncertainty structure must have unit Frobenius norm")
        if self.kind not in ("drift", "control", "custom-drift"):
            raise ValueError(f"unknown structure kind {self.kind!r}")
        S.flags.writeable = False
        object.__setattr__(self, "matrix", S)

    @property
    def drift_type(self) -> bool:
        return self.kind != "control"


def uncertainty_structure(system: ControlSystem, mu: int) -> UncertaintyStructure:
    """Collective uncertainty: ``S_0 = B/||B||_F`` and ``S_mu = C_mu/||C_mu||_F``."""
    if not 0 <= mu <= system.n_controls:
        raise IndexError(f"uncertainty index {mu} outside 0..{system.n_controls}")
    X = system.drift if mu == 0 else system.controls[mu - 1]
    norm = np.linalg.norm(X)
    if norm == 0.0:
        raise NormalizationError(f"operator {mu} is zero and has no collective structure")
    return UncertaintyStructure(mu, X / norm, "drift" if mu == 0 else "control")


def custom_drift_structure(S: np.ndarray) -> UncertaintyStructure:
    """Drift-type structure from an arbitrary skew-Hermitian matrix, normalised."""
    S = np.asarray(S, dtype=complex)
    norm = np.linalg.norm(S)
    if norm == 0.0:
        raise NormalizationError("zero matrix")
    return UncertaintyStructure(0, S / norm, "custom-drift")


def random_skew_hermitian(n: int, rng: np.random.Generator, unit: bool = False) -> np.ndarray:
    G = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    X = 0.5 * (G - G.conj().T)
    return X / np.linalg.norm(X) if unit else X


# ---------------------------------------------------------------------------
# Control fields
# ---------------------------------------------------------------------------


class ControlField:
    """Scalar field ``u(t)`` on ``[0, t_final]``.

    Subclasses implement ``values`` for arrays of times already known to be
    in range and ``peak`` returning ``sup |u(t)|``.
    """

    t_final: float
    variant: str = "abstract"

    def values(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def peak(self) -> float:
        raise NotImplementedError

    def __call__(self, t):
        return eval_control(self, t)

    def is_feasible(self, bound: float) -> bool:
        return self.peak() <= bound * (1.0 + FEASIBILITY_RTOL)

    def to_dict(self) -> dict:
        raise NotImplementedError


def eval_control(f: ControlField, t):
    """Evaluate ``f`` at scalar or array ``t``, rejecting times outside ``[0, t_f]``."""
    arr = np.asarray(t, dtype=float)
    slack = 1e-12 * max(1.0, f.t_final)
    if np.any(arr < -slack) or np.any(arr > f.t_final + slack):
        raise DomainError(f"t outside [0, {f.t_final}]")
    out = f.values(np.clip(arr, 0.0, f.t_final))
    return float(out) if np.ndim(out) == 0 else out


def hermite_power_coefficients(knot_values, knot_slopes, width: float) -> np.ndarray:
    """Per-interval ``(a, b, c, d)`` with ``u = a x^3 + b x^2 + c x + d``, ``0 <= x <= width``.

    Works on arrays with arbitrary leading batch dimensions; the last axis
    runs over the ``K + 1`` knots and the result has shape ``(..., K, 4)``.
    """
    y = np.asarray(knot_values, dtype=float)
    m = np.asarray(knot_slopes, dtype=float)
    y0, y1, m0, m1 = y[..., :-1], y[..., 1:], m[..., :-1], m[..., 1:]
    dy = (y1 - y0) / width
    a = (m0 + m1 - 2.0 * dy) / width**2
    b = (3.0 * dy - 2.0 * m0 - m1) / width
    return np.stack([a, b, m0, y0], axis=-1)


def hermite_eval(knot_values, knot_slopes, t_final: float, t) -> np.ndarray:
    """Vectorised C1 cubic Hermite interpolation on ``K`` equal intervals.

    ``knot_values``/``knot_slopes`` have shape ``(..., K + 1)``; the result has
    shape ``(...,) + t.shape``.
    """
    y = np.asarray(knot_values, dtype=float)
    m = np.asarray(knot_slopes, dtype=float)
    t = np.asarray(t, dtype=float)
    K = y.shape[-1] - 1
    width = t_final / K
    n = np.clip(np.floor(t / width).astype(int), 0, K - 1)
    s = t / width - n
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return (
        h00 * y[..., n]
        + h10 * width * m[..., n]
        + h01 * y[..., n + 1]
        + h11 * width * m[..., n + 1]
    )


def hermite_peak(knot_values, knot_slopes, t_final: float) -> np.ndarray:
    """Exact ``max |u|`` per interval from the cubic's critical points, shape ``(..., K)``."""
    y = np.asarray(knot_values, dtype=float)
    m = np.asarray(knot_slopes, dtype=float)
    K = y.shape[-1] - 1
    L = t_final / K
    y0, y1, m0, m1 = y[..., :-1], y[..., 1:], L * m[..., :-1], L * m[..., 1:]
    # p(s) = y0 + c s + b s^2 + a s^3 on s in [0, 1]
    c = m0
    b = 3 * (y1 - y0) - 2 * m0 - m1
    a = 2 * (y0 - y1) + m0 + m1
    qa, qb, qc = 3 * a, 2 * b, c
    disc = qb * qb - 4 * qa * qc
    sq = np.sqrt(np.maximum(disc, 0.0))
    small = np.abs(qa) < 1e-14 * (np.abs(qb) + np.abs(qc) + 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(small, -qc / qb, (-qb + sq) / (2 * qa))
        r2 = np.where(small, np.nan, (-qb - sq) / (2 * qa))
    candidates = [np.zeros_like(y0), np.ones_like(y0)]
    for r in (r1, r2):
        ok = np.isfinite(r) & (disc >= 0) & (r > 0) & (r < 1)
        candidates.append(np.where(ok, r, 0.0))
    s = np.stack(candidates, axis=-1)
    p = y0[..., None] + c[..., None] * s + b[..., None] * s**2 + a[..., None] * s**3
    return np.max(np.abs(p), axis=-1)


@dataclass(frozen=True, eq=False)
class SplineField(ControlField):
    """C1 cubic spline in Hermite form on ``K`` equal intervals, with ``u(0) = 0``.

    ``values`` holds the knot values at ``t_1 .. t_K`` (the value at ``t_0`` is
    structurally zero) and ``slopes`` the derivatives at all ``K + 1`` knots.
    """

    t_final: float
    knot_values: np.ndarray
    knot_slopes: np.ndarray
    variant: str = field(default="spline", init=False)

    def __post_init__(self):
        v = np.array(self.knot_values, dtype=float).ravel()
        s = np.array(self.knot_slopes, dtype=float).ravel()
        if self.t_final <= 0:
            raise DomainError("t_final must be positive")
        if v.size < 1 or s.size != v.size + 1:
            raise ShapeError("spline needs K knot values and K + 1 slopes")
        v.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "knot_values", v)
        object.__setattr__(self, "knot_slopes", s)

    @property
    def segments(self) -> int:
        return self.knot_values.size

    @property
    def all_knot_values(self) -> np.ndarray:
        return np.concatenate([[0.0], self.knot_values])

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.segments + 1)

    def values(self, t):
        return hermite_eval(self.all_knot_values, self.knot_slopes, self.t_final, t)

    def peak(self) -> float:
        return float(np.max(hermite_peak(self.all_knot_values, self.knot_slopes, self.t_final)))

    def power_coefficients(self) -> np.ndarray:
        """``(K, 4)`` array of ``(a, b, c, d)`` in the local coordinate of each interval."""
        return hermite_power_coefficients(self.all_knot_values, self.knot_slopes, self.t_final / self.segments)

    def scaled(self, factor: float) -> "SplineField":
        return SplineField(self.t_final, factor * self.knot_values, factor * self.knot_slopes)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "t_final": self.t_final,
            "knot_values": self.knot_values.tolist(),
            "knot_slopes": self.knot_slopes.tolist(),
        }


def eval_power_form(coefficients: np.ndarray, t_final: float, t) -> np.ndarray:
    """Evaluate a piecewise cubic given as per-interval ``(a, b, c, d)`` rows."""
    coefficients = np.asarray(coefficients, dtype=float)
    t = np.asarray(t, dtype=float)
    K = coefficients.shape[0]
    width = t_final / K
    n = np.clip(np.floor(t / width).astype(int), 0, K - 1)
    x = t - n * width
    a, b, c, d = coefficients[n].T if t.ndim else coefficients[n]
    return ((a * x + b) * x + c) * x + d


@dataclass(frozen=True, eq=False)
class FourierField(ControlField):
    """``u(t) = sum_j alpha_j sin(omega_j t)``; vanishes at ``t = 0`` identically."""

    t_final: float
    amplitudes: np.ndarray
    frequencies: np.ndarray
    variant: str = field(default="fourier", init=False)

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=float).ravel()
        w = np.array(self.frequencies, dtype=float).ravel()
        if self.t_final <= 0:
            raise DomainError("t_final must be positive")
        if a.shape != w.shape or a.size == 0:
            raise ShapeError("amplitudes and frequencies must be equal-length and non-empty")
        a.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "frequencies", w)

    def values(self, t):
        t = np.asarray(t, dtype=float)
        return np.sin(np.multiply.outer(t, self.frequencies)) @ self.amplitudes

    def amplitude_bound(self) -> float:
        """Certified ``sup |u| <= sum_j |alpha_j|``."""
        return float(np.sum(np.abs(self.amplitudes)))

    def peak(self, samples_per_unit: int = 4000) -> float:
        n = max(2000, int(np.ceil(samples_per_unit * self.t_final)))
        return float(np.max(np.abs(self.values(np.linspace(0.0, self.t_final, n + 1)))))

    def scaled(self, factor: float) -> "FourierField":
        return FourierField(self.t_final, factor * self.amplitudes, self.frequencies)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "t_final": self.t_final,
            "amplitudes": self.amplitudes.tolist(),
            "frequencies": self.frequencies.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PiecewiseConstantField(ControlField):
    """Levels held on ``[breaks[i], breaks[i+1])``; ``breaks`` spans ``[0, t_final]``."""

    breaks: np.ndarray
    levels: np.ndarray
    variant: str = field(default="piecewise-constant", init=False)

    def __post_init__(self):
        b = np.array(self.breaks, dtype=float).ravel()
        lv = np.array(self.levels, dtype=float).ravel()
        if b.size != lv.size + 1 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ShapeError("breaks must start at 0, increase, and number len(levels) + 1")
        b.flags.writeable = False
        lv.flags.writeable = False
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "levels", lv)

    @property
    def t_final(self) -> float:
        return float(self.breaks[-1])

    def values(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.levels.size - 1)
        return self.levels[idx]

    def peak(self) -> float:
        return float(np.max(np.abs(self.levels)))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "breaks": self.breaks.tolist(), "levels": self.levels.tolist()}


def constant_field(t_final: float, level: float) -> PiecewiseConstantField:
    return PiecewiseConstantField([0.0, t_final], [level])


def field_from_dict(data: dict) -> ControlField:
    variant = data.get("variant")
    if variant == "spline":
        return SplineField(float(data["t_final"]), data["knot_values"], data["knot_slopes"])
    if variant == "fourier":
        return FourierField(float(data["t_final"]), data["amplitudes"], data["frequencies"])
    if variant == "piecewise-constant":
        return PiecewiseConstantField(data["breaks"], data["levels"])
    raise ValueError(f"unknown control field variant {variant!r}")


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _check_fields(system: ControlSystem, fields: Sequence[ControlField]) -> None:
    if len(fields) != system.n_controls:
        raise ShapeError(f"{len(fields)} fields supplied for {system.n_controls} control matrices")


def field_samples(fields: Sequence[ControlField], t) -> np.ndarray:
    """``(M,) + t.shape`` array of field values."""
    return np.stack([np.asarray(eval_control(f, t), dtype=float) for f in fields])


def generators_from_samples(system: ControlSystem, u: np.ndarray) -> np.ndarray:
    """``A = B + sum_m u_m C_m`` for samples ``u`` of shape ``(..., M)``."""
    u = np.asarray(u, dtype=float)
    return system.drift + np.tensordot(u, system.control_stack, axes=([-1], [0]))


def generator(system: ControlSystem, fields: Sequence[ControlField], t: float) -> np.ndarray:
    """``A(t) = B + sum_m u_m(t) C_m``."""
    _check_fields(system, fields)
    return generators_from_samples(system, [eval_control(f, t) for f in fields])


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def preset_spin_ring() -> tuple[ControlSystem, tuple[np.ndarray, np.ndarray]]:
    """Four-spin ring in the single-excitation subspace, controls on sites 1 and 2.

    Returns the system and the state pair ``(e_1, e_4)``.
    """
    n = 4
    H0 = sum(basis_matrix(n, k, k + 1) + basis_matrix(n, k + 1, k) for k in range(1, n))
    H0 = H0 + basis_matrix(n, 4, 1) + basis_matrix(n, 1, 4)
    H1 = basis_matrix(n, 1, 1)
    H2 = basis_matrix(n, 2, 2)
    system = ControlSystem(-1j * H0, (-1j * H1, -1j * H2), ("H0", "H1", "H2"))
    psi0 = np.eye(n, dtype=complex)[0]
    psif = np.eye(n, dtype=complex)[3]
    return system, (psi0, psif)


DEFAULT_ANHARMONICITY = 1.0


def preset_transmon(anharmonicity: float = DEFAULT_ANHARMONICITY) -> tuple[ControlSystem, np.ndarray]:
    """Three-level transmon with two quadrature controls; target is the 0<->1 NOT gate."""
    B = np.diag([0.0, 0.0, -1j * anharmonicity])
    C1 = -np.array([[0, 1j, 0], [1j, 0, 1j], [0, 1j, 0]])
    C2 = np.array([[0, -1, 0], [1, 0, -1], [0, 1, 0]], dtype=complex)
    target = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=complex)
    return ControlSystem(B, (C1, C2), ("H0", "Hx", "Hy")), target
