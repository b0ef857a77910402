"""Differential sensitivity of the fidelity to structured Hamiltonian uncertainty.

The uncertain generator is ``A + delta S`` (drift-type structures) or
``A + delta u_mu(t) S_mu`` (control structures).  Differentiating the Magnus
exponent gives per-step ``dGamma_k``; the step derivative ``dU_k`` follows from
the closed-form derivative of the matrix exponential, and the fidelity
derivative sums ``U^(tau,k) dU_k U^(k-1,0)`` contracted with the overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fidelity import FidelityKind, Gate, StateTransfer, overlap
from .magnus import PropagationResult, SkewEig, TimeGrid, final_propagator, propagate, skew_eig
from .model import (
    ControlField,
    ControlSystem,
    UncertaintyStructure,
    commutator,
    field_samples,
    uncertainty_structure,
)

DEFAULT_DELTA = 1e-5


class WrongKindError(ValueError):
    """Control-uncertainty formula requested for the drift index (or vice versa)."""


@dataclass(frozen=True, eq=False)
class PerturbationDerivatives:
    """``dGamma_k`` for one uncertainty index over all steps (arrays indexed ``k-1``)."""

    structure: UncertaintyStructure
    dgammas: np.ndarray
    knot_samples: np.ndarray
    mid_samples: np.ndarray
    coupling: np.ndarray | None = None

    @property
    def index(self) -> int:
        return self.structure.index

    def norms(self, norm: str = "fro") -> np.ndarray:
        if norm == "fro":
            return np.linalg.norm(self.dgammas, axis=(-2, -1))
        if norm == "spectral":
            return np.linalg.norm(self.dgammas, ord=2, axis=(-2, -1))
        raise ValueError(f"unknown norm {norm!r}")


def coupling_coefficients(knots: np.ndarray, mu: int) -> np.ndarray:
    """``J_(mu,m)^(k) = u_mu^(k-1) u_m^(k) - u_mu^(k) u_m^(k-1)``, shape ``(M, tau)``.

    ``knots`` are the knot samples ``(M, tau+1)``; ``mu`` is one-based.
    """
    u_mu = knots[mu - 1]
    return u_mu[:-1] * knots[:, 1:] - u_mu[1:] * knots[:, :-1]


def _drift_type(system: ControlSystem, S: np.ndarray, knots: np.ndarray, h: float) -> np.ndarray:
    # d/d delta of -h^2/12 [A_{k-1} + dS, A_k + dS] is -h^2/12 [S, A_k - A_{k-1}]
    comms = np.stack([commutator(S, C) for C in system.controls])
    du = np.diff(knots, axis=1).T  # (tau, M)
    return h * S - (h * h / 12.0) * np.tensordot(du, comms, axes=([1], [0]))


def _control_type(
    system: ControlSystem, mu: int, S: np.ndarray, knots: np.ndarray, mids: np.ndarray, h: float
) -> tuple[np.ndarray, np.ndarray]:
    u = knots[mu - 1]
    simpson = (h / 6.0) * (u[1:] + 4.0 * mids[mu - 1] + u[:-1])
    J = coupling_coefficients(knots, mu)
    J[mu - 1] = 0.0
    comm_B = commutator(S, system.drift)
    comms = np.stack([commutator(S, C) for C in system.controls])
    out = (
        simpson[:, None, None] * S
        + (h * h / 12.0) * np.diff(u)[:, None, None] * comm_B
        - (h * h / 12.0) * np.tensordot(J.T, comms, axes=([1], [0]))
    )
    return out, J


def perturbation_derivatives(
    system: ControlSystem,
    prop_or_samples,
    mu: int,
    structure: UncertaintyStructure | np.ndarray | None = None,
) -> PerturbationDerivatives:
    """``dGamma_k`` for every step.

    ``prop_or_samples`` is a :class:`PropagationResult` or a
    ``(knots, mids, h)`` tuple.  For ``mu = 0`` a custom drift-type structure
    may be supplied; control indices always use the collective structure.
    """
    if isinstance(prop_or_samples, PropagationResult):
        knots, mids, h = prop_or_samples.knot_samples, prop_or_samples.mid_samples, prop_or_samples.grid.h
    else:
        knots, mids, h = prop_or_samples
    if mu == 0:
        if structure is None:
            struct = uncertainty_structure(system, 0)
        elif isinstance(structure, UncertaintyStructure):
            struct = structure
        else:
            struct = UncertaintyStructure(0, structure, "custom-drift")
        if not struct.drift_type:
            raise WrongKindError("index 0 requires a drift-type structure")
        dg = _drift_type(system, struct.matrix, knots, h)
        return PerturbationDerivatives(struct, dg, knots, mids)
    if structure is not None:
        raise WrongKindError("control uncertainty uses the collective structure only")
    struct = uncertainty_structure(system, mu)
    dg, J = _control_type(system, mu, struct.matrix, knots, mids, h)
    return PerturbationDerivatives(struct, dg, knots, mids, J)


def _step_samples(fields: Sequence[ControlField], k: int, grid: TimeGrid):
    h = grid.h
    t = np.array([(k - 1) * h, k * h])
    return field_samples(fields, t), field_samples(fields, np.array([(k - 0.5) * h])), h


def dgamma_drift(
    system: ControlSystem,
    fields: Sequence[ControlField],
    k: int,
    grid: TimeGrid,
    S: UncertaintyStructure | np.ndarray,
) -> np.ndarray:
    """``dGamma_k = h S - h^2/12 sum_m (u_m^(k) - u_m^(k-1)) [S, C_m]`` for a drift-type ``S``."""
    if not 1 <= k <= grid.steps:
        raise IndexError(f"step {k} outside 1..{grid.steps}")
    S = S.matrix if isinstance(S, UncertaintyStructure) else np.asarray(S, dtype=complex)
    knots, _, h = _step_samples(fields, k, grid)
    return _drift_type(system, S, knots, h)[0]


def dgamma_control(
    system: ControlSystem, fields: Sequence[ControlField], k: int, grid: TimeGrid, mu: int
) -> np.ndarray:
    """``dGamma_k`` for collective uncertainty in control operator ``mu >= 1``."""
    if mu == 0:
        raise WrongKindError("index 0 is drift uncertainty; use dgamma_drift")
    if not 1 <= mu <= system.n_controls:
        raise IndexError(f"control index {mu} outside 1..{system.n_controls}")
    if not 1 <= k <= grid.steps:
        raise IndexError(f"step {k} outside 1..{grid.steps}")
    knots, mids, h = _step_samples(fields, k, grid)
    S = uncertainty_structure(system, mu).matrix
    return _control_type(system, mu, S, knots, mids, h)[0][0]


def sinc_kernel(lam: np.ndarray) -> np.ndarray:
    """``K[r, c] = int_0^1 exp(i (lam_c - lam_r) s) ds = e^{i w/2} sinc(w/2)``, ``w = lam_c - lam_r``."""
    w = lam[..., None, :] - lam[..., :, None]
    return np.exp(0.5j * w) * np.sinc(w / (2.0 * np.pi))


def dexpm(gamma: np.ndarray, dgamma: np.ndarray, eig: SkewEig | None = None) -> np.ndarray:
    """``int_0^1 exp((1-s) Gamma) dGamma exp(s Gamma) ds`` in closed spectral form.

    With ``Gamma = V diag(i lam) V^dagger`` the integral is
    ``V [exp(i lam_p) K_pq (V^dagger dGamma V)_pq] V^dagger``.  Batched over
    leading axes.
    """
    eig = skew_eig(gamma) if eig is None else eig
    V = eig.vecs
    Vh = np.conj(np.swapaxes(V, -1, -2))
    inner = Vh @ dgamma @ V
    # entry (p, q): exp(i lam_p) * int exp(i (lam_q - lam_p) s) ds
    weights = np.exp(1j * eig.lam)[..., :, None] * sinc_kernel(eig.lam)
    return V @ (weights * inner) @ Vh


def step_derivatives(prop: PropagationResult, perts: PerturbationDerivatives) -> np.ndarray:
    """``dU_k`` for all steps, shape ``(tau, N, N)``."""
    if perts.dgammas.shape != prop.gammas.shape:
        raise ValueError("perturbation derivatives and propagation use different grids")
    return dexpm(prop.gammas, perts.dgammas, prop.eig)


def _step_traces(prop: PropagationResult, kind: FidelityKind, dU: np.ndarray) -> np.ndarray:
    """Per-step ``<psi_f|X_k|psi_0>`` or ``tr(U_f^dagger X_k)``."""
    pre = prop.prefixes[:-1]
    suf = prop.suffixes[1:]
    if isinstance(kind, StateTransfer):
        a = pre @ kind.psi0
        b = np.conj(np.swapaxes(suf, -1, -2)) @ kind.psif
        return np.einsum("ki,kij,kj->k", np.conj(b), dU, a)
    Q = pre @ np.conj(kind.target).T @ suf
    return np.einsum("kij,kji->k", dU, Q)


def state_sensitivity(prop: PropagationResult, kind: StateTransfer, perts: PerturbationDerivatives) -> float:
    """``sum_k 2 Re{<psi_f|X_k|psi_0> <psi_0|U^dagger|psi_f>}``."""
    if not isinstance(kind, StateTransfer):
        raise TypeError("state_sensitivity needs a state-transfer kind")
    z, _ = overlap(kind, prop.final)
    traces = _step_traces(prop, kind, step_derivatives(prop, perts))
    return float(2.0 * np.sum((traces * np.conj(z)).real))


def gate_sensitivity(prop: PropagationResult, kind: Gate, perts: PerturbationDerivatives) -> float:
    """``1/(N^2 F_G) sum_k Re{tr(U_f^dagger X_k) tr(U^dagger U_f)}``."""
    if not isinstance(kind, Gate):
        raise TypeError("gate_sensitivity needs a gate kind")
    z, gamma = overlap(kind, prop.final)
    traces = _step_traces(prop, kind, step_derivatives(prop, perts))
    return float(gamma * np.sum((traces * np.conj(z)).real))


def fidelity_sensitivity(prop: PropagationResult, kind: FidelityKind, perts: PerturbationDerivatives) -> float:
    if isinstance(kind, StateTransfer):
        return state_sensitivity(prop, kind, perts)
    return gate_sensitivity(prop, kind, perts)


def infidelity_sensitivity(prop: PropagationResult, kind: FidelityKind, perts: PerturbationDerivatives) -> float:
    return -fidelity_sensitivity(prop, kind, perts)


def _perturbed_fidelity(system, fields, grid, kind, mu, delta, structure) -> float:
    S = structure.matrix if isinstance(structure, UncertaintyStructure) else structure
    return kind.fidelity(final_propagator(system.perturbed(mu, delta, S), fields, grid))


def fd_oracle(
    system: ControlSystem,
    fields: Sequence[ControlField],
    grid: TimeGrid,
    kind: FidelityKind,
    mu: int,
    delta: float = DEFAULT_DELTA,
    structure: UncertaintyStructure | np.ndarray | None = None,
    richardson: bool = False,
) -> float:
    """Central-difference estimate of the fidelity derivative.

    The perturbation is applied to the generators before discretisation, so
    the perturbed exponents are rebuilt from ``B + delta S`` or
    ``C_mu + delta S_mu``.  With ``richardson`` the estimates at ``delta`` and
    ``delta/2`` are combined to cancel the ``delta^2`` error term.
    """
    if delta == 0.0:
        return 0.0

    def central(d):
        fp = _perturbed_fidelity(system, fields, grid, kind, mu, d, structure)
        fm = _perturbed_fidelity(system, fields, grid, kind, mu, -d, structure)
        return (fp - fm) / (2.0 * d)

    if not richardson:
        return central(delta)
    return (4.0 * central(delta / 2.0) - central(delta)) / 3.0


@dataclass
class SensitivityReport:
    fidelity: float
    analytic: dict[int, float]
    delta: float = DEFAULT_DELTA
    finite_difference: dict[int, float] = field(default_factory=dict)

    @property
    def discrepancy(self) -> dict[int, float]:
        out = {}
        for mu, fd in self.finite_difference.items():
            a = self.analytic[mu]
            out[mu] = abs(a - fd) / max(abs(fd), 1e-300)
        return out

    def to_dict(self) -> dict:
        d = {
            "fidelity": self.fidelity,
            "delta": self.delta,
            "analytic": {str(k): v for k, v in self.analytic.items()},
        }
        if self.finite_difference:
            d["finite_difference"] = {str(k): v for k, v in self.finite_difference.items()}
            d["discrepancy"] = {str(k): v for k, v in self.discrepancy.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def sensitivity_report(
    system: ControlSystem,
    fields: Sequence[ControlField],
    grid: TimeGrid,
    kind: FidelityKind,
    fd_check: bool = False,
    delta: float = DEFAULT_DELTA,
    prop: PropagationResult | None = None,
) -> SensitivityReport:
    """Analytic sensitivity for every collective index ``0..M``, optionally cross-checked."""
    prop = propagate(system, fields, grid) if prop is None else prop
    analytic = {}
    for mu in range(system.n_controls + 1):
        analytic[mu] = fidelity_sensitivity(prop, kind, perturbation_derivatives(system, prop, mu))
    report = SensitivityReport(kind.fidelity(prop.final), analytic, delta)
    if fd_check:
        for mu in analytic:
            report.finite_difference[mu] = fd_oracle(system, fields, grid, kind, mu, delta, richardson=True)
    return report
