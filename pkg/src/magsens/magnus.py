"""Fourth-order Magnus propagation with a fixed step.

Each step uses the Simpson-plus-commutator exponent

    Gamma_k = h/6 (A_{k-1} + 4 A_{k-1/2} + A_k) - h^2/12 [A_{k-1}, A_k]

and ``U_{k,k-1} = exp(Gamma_k)``.  Exponentials go through the eigen-
decomposition of the Hermitian matrix ``-i Gamma`` so that the spectral data
can be reused by the sensitivity and bound computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    ControlField,
    ControlSystem,
    DomainError,
    ShapeError,
    commutator,
    field_samples,
    generators_from_samples,
)


class ContractError(ValueError):
    """Input violates a documented structural precondition."""


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or int(self.steps) != self.steps:
            raise DomainError("step count must be a positive integer")
        if not self.t_final > 0:
            raise DomainError("t_final must be positive")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def h(self) -> float:
        return self.t_final / self.steps

    @property
    def times(self) -> np.ndarray:
        """Knot times ``t_k = k h``, ``k = 0 .. tau``."""
        return np.linspace(0.0, self.t_final, self.steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.steps) + 0.5) * self.h

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_final, self.steps * factor)


def choose_step(system: ControlSystem, amplitude_bound: float, interval_length: float, margin: float = 1.0) -> int:
    """Smallest step count ``kappa`` on an interval with ``h sup||A|| < pi * margin``.

    ``sup||A||`` is bounded by ``||B|| + bound * sum_m ||C_m||`` (spectral norms).
    Callers may use any larger ``kappa``.
    """
    if interval_length <= 0:
        raise DomainError("interval length must be positive")
    if not 0 < margin <= 1:
        raise DomainError("margin must lie in (0, 1]")
    if amplitude_bound < 0:
        raise DomainError("amplitude bound must be non-negative")
    norm = system.norm_bound(amplitude_bound)
    if norm == 0.0:
        return 1
    kappa = max(1, math.floor(interval_length * norm / (math.pi * margin)) + 1)
    # guard against floor landing exactly on the boundary
    while interval_length / kappa * norm >= math.pi * margin:
        kappa += 1
    return kappa


def sample_fields(fields: Sequence[ControlField], grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Field values at the knots, shape ``(M, tau+1)``, and at the midpoints, ``(M, tau)``."""
    return field_samples(fields, grid.times), field_samples(fields, grid.midpoints)


def gammas_from_samples(system: ControlSystem, knots: np.ndarray, mids: np.ndarray, h: float) -> np.ndarray:
    """All step exponents from sampled controls.

    ``knots`` has shape ``(..., M, tau+1)`` and ``mids`` ``(..., M, tau)``;
    the result has shape ``(..., tau, N, N)``.
    """
    A = generators_from_samples(system, np.swapaxes(knots, -1, -2))
    Am = generators_from_samples(system, np.swapaxes(mids, -1, -2))
    A0, A1 = A[..., :-1, :, :], A[..., 1:, :, :]
    return (h / 6.0) * (A0 + 4.0 * Am + A1) - (h * h / 12.0) * (A0 @ A1 - A1 @ A0)


def gamma_step(system: ControlSystem, fields: Sequence[ControlField], k: int, grid: TimeGrid) -> np.ndarray:
    """Exponent ``Gamma_k`` of step ``k`` (``1 <= k <= tau``)."""
    if not 1 <= k <= grid.steps:
        raise IndexError(f"step {k} outside 1..{grid.steps}")
    if len(fields) != system.n_controls:
        raise ShapeError("one field per control matrix is required")
    h = grid.h
    t0, t1 = (k - 1) * h, k * h
    A0, Am, A1 = (generators_from_samples(system, field_samples(fields, t)) for t in (t0, t0 + 0.5 * h, t1))
    return (h / 6.0) * (A0 + 4.0 * Am + A1) - (h * h / 12.0) * commutator(A0, A1)


@dataclass(frozen=True, eq=False)
class SkewEig:
    """``Gamma = V diag(i lam) V^dagger``; arrays may carry leading batch axes."""

    lam: np.ndarray
    vecs: np.ndarray

    def exp(self) -> np.ndarray:
        V = self.vecs
        return (V * np.exp(1j * self.lam)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def skew_eig(gamma: np.ndarray, tol: float = 1e-10) -> SkewEig:
    gamma = np.asarray(gamma, dtype=complex)
    resid = np.max(np.abs(gamma + np.conj(np.swapaxes(gamma, -1, -2))), initial=0.0)
    if resid > tol:
        raise ContractError(f"matrix is not skew-Hermitian (residual {resid:.3e})")
    H = -1j * gamma
    H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
    lam, vecs = np.linalg.eigh(H)
    return SkewEig(lam, vecs)


def expm_skew(gamma: np.ndarray, return_eig: bool = False):
    """Unitary ``exp(Gamma)`` for skew-Hermitian ``Gamma`` (batched over leading axes)."""
    eig = skew_eig(gamma)
    U = eig.exp()
    return (U, eig) if return_eig else U


def ordered_product(steps: np.ndarray) -> np.ndarray:
    """``steps[..., tau-1] @ ... @ steps[..., 0]`` by pairwise reduction over the step axis."""
    P = np.asarray(steps)
    while P.shape[-3] > 1:
        if P.shape[-3] % 2:
            tail = P[..., -1:, :, :]
            head = P[..., :-1, :, :]
            P = np.concatenate([head[..., 1::2, :, :] @ head[..., 0::2, :, :], tail], axis=-3)
        else:
            P = P[..., 1::2, :, :] @ P[..., 0::2, :, :]
    return P[..., 0, :, :]


@dataclass(frozen=True, eq=False)
class PropagationResult:
    """Per-step exponents and unitaries with cached prefix/suffix products.

    ``prefixes[k] = U^(k,0)`` and ``suffixes[k] = U^(tau,k)`` for ``k = 0..tau``.
    Step arrays are indexed from zero, so ``steps[k-1] = U^(k,k-1)``.
    """

    grid: TimeGrid
    gammas: np.ndarray
    steps: np.ndarray
    eig: SkewEig
    prefixes: np.ndarray
    suffixes: np.ndarray
    knot_samples: np.ndarray
    mid_samples: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.prefixes[-1]

    @property
    def dim(self) -> int:
        return self.gammas.shape[-1]

    def segment(self, k2: int, k1: int) -> np.ndarray:
        """``U^(k2,k1)`` for ``k1 <= k2``."""
        return self.prefixes[k2] @ np.conj(self.prefixes[k1]).T

    def gamma_norms(self) -> np.ndarray:
        return np.linalg.norm(self.gammas, axis=(-2, -1))


def propagate(system: ControlSystem, fields: Sequence[ControlField], grid: TimeGrid) -> PropagationResult:
    if len(fields) != system.n_controls:
        raise ShapeError("one field per control matrix is required")
    knots, mids = sample_fields(fields, grid)
    gammas = gammas_from_samples(system, knots, mids, grid.h)
    steps, eig = expm_skew(gammas, return_eig=True)
    n, tau = system.dim, grid.steps
    prefixes = np.empty((tau + 1, n, n), dtype=complex)
    suffixes = np.empty((tau + 1, n, n), dtype=complex)
    prefixes[0] = np.eye(n)
    suffixes[tau] = np.eye(n)
    for k in range(1, tau + 1):
        prefixes[k] = steps[k - 1] @ prefixes[k - 1]
    for k in range(tau, 0, -1):
        suffixes[k - 1] = suffixes[k] @ steps[k - 1]
    for arr in (gammas, steps, prefixes, suffixes, knots, mids):
        arr.flags.writeable = False
    return PropagationResult(grid, gammas, steps, eig, prefixes, suffixes, knots, mids)


def final_propagator(system: ControlSystem, fields: Sequence[ControlField], grid: TimeGrid) -> np.ndarray:
    knots, mids = sample_fields(fields, grid)
    return ordered_product(expm_skew(gammas_from_samples(system, knots, mids, grid.h)))


def gamma_norms_csv(prop: PropagationResult) -> str:
    """Debug dump: ``k,t_k,frobenius_norm`` per step."""
    lines = ["k,t,gamma_fro"]
    for k, (t, g) in enumerate(zip(prop.grid.times[1:], prop.gamma_norms()), start=1):
        lines.append(f"{k},{t:.17e},{g:.17e}")
    return "\n".join(lines) + "\n"
