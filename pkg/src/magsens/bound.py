"""Worst-case bound on the differential sensitivity.

Every quantity is expanded in an orthonormal basis of u(N).  Per step, the
map ``dGamma -> U_k^dagger dU_k`` becomes a real ``N^2 x N^2`` matrix ``D_k``
whose spectrum is governed by a sinc kernel of the eigenphase gaps of
``Gamma_k``.  Contracting with the coefficients of the skew-Hermitian part of
the overlap operator gives a real row vector ``z_k`` per step, and

    |dF| <= gamma * sum_k ||z_k|| * b,   b = max_{mu,k} ||dGamma_k||_F.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fidelity import FidelityKind, StateTransfer, overlap
from .magnus import ContractError, PropagationResult, SkewEig, TimeGrid, propagate, skew_eig
from .model import ControlField, ControlSystem
from .sensitivity import PerturbationDerivatives, fidelity_sensitivity, perturbation_derivatives, sinc_kernel

GRAM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AlgebraBasis:
    """``N^2`` skew-Hermitian matrices orthonormal under ``tr(A^dagger B)``."""

    elements: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        E = np.array(self.elements, dtype=complex)
        n = E.shape[-1]
        if E.shape != (n * n, n, n):
            raise ValueError(f"expected {n * n} matrices of size {n}, got shape {E.shape}")
        if np.max(np.abs(E + np.conj(np.swapaxes(E, -1, -2)))) > GRAM_TOL:
            raise ValueError("basis elements must be skew-Hermitian")
        if np.max(np.abs(gram(E) - np.eye(n * n))) > 1e-10:
            raise ValueError("basis is not orthonormal")
        E.flags.writeable = False
        object.__setattr__(self, "elements", E)

    @property
    def dim(self) -> int:
        return self.elements.shape[-1]

    def __len__(self) -> int:
        return self.elements.shape[0]

    def combine(self, coeffs: np.ndarray) -> np.ndarray:
        return np.tensordot(coeffs, self.elements, axes=([-1], [0]))

    def rotated(self, Q: np.ndarray) -> "AlgebraBasis":
        """Basis ``sigma'_n = sum_m Q[m, n] sigma_m`` for real orthogonal ``Q``."""
        return AlgebraBasis(np.tensordot(Q.T, self.elements, axes=([1], [0])))


def gram(elements: np.ndarray) -> np.ndarray:
    flat = elements.reshape(elements.shape[0], -1)
    return np.conj(flat) @ flat.T


def make_basis(n: int) -> AlgebraBasis:
    """``i`` times the generalised Gell-Mann matrices over sqrt(2), then ``i I / sqrt(N)``.

    Ordering: symmetric pairs ``(j, k)`` for ``j < k``, antisymmetric pairs in
    the same order, the ``N - 1`` diagonal elements, and the identity last.
    """
    if n < 2:
        raise ValueError("basis needs N >= 2")
    mats, labels = [], []
    pairs = [(j, k) for j in range(n) for k in range(j + 1, n)]
    for j, k in pairs:
        G = np.zeros((n, n), dtype=complex)
        G[j, k] = G[k, j] = 1.0
        mats.append(1j * G / np.sqrt(2))
        labels.append(f"sym{j + 1}{k + 1}")
    for j, k in pairs:
        G = np.zeros((n, n), dtype=complex)
        G[j, k], G[k, j] = -1j, 1j
        mats.append(1j * G / np.sqrt(2))
        labels.append(f"asym{j + 1}{k + 1}")
    for l in range(1, n):
        d = np.zeros(n)
        d[:l] = 1.0
        d[l] = -l
        G = np.sqrt(2.0 / (l * (l + 1))) * np.diag(d)
        mats.append(1j * G / np.sqrt(2))
        labels.append(f"diag{l}")
    mats.append(1j * np.eye(n) / np.sqrt(n))
    labels.append("identity")
    return AlgebraBasis(np.array(mats), tuple(labels))


def coefficients(X: np.ndarray, basis: AlgebraBasis, tol: float = 1e-12) -> np.ndarray:
    """Real coefficients ``g_n = tr(sigma_n^dagger X)`` of a skew-Hermitian ``X``.

    Accepts leading batch axes.  A Hermitian residue above ``tol`` (relative to
    ``max(1, ||X||)``) is rejected.
    """
    X = np.asarray(X, dtype=complex)
    herm = 0.5 * (X + np.conj(np.swapaxes(X, -1, -2)))
    scale = max(1.0, float(np.max(np.abs(X), initial=0.0)))
    if np.max(np.abs(herm), initial=0.0) > tol * scale:
        raise ContractError("matrix has a Hermitian part; coefficients need a skew-Hermitian input")
    return np.einsum("nij,...ij->...n", np.conj(basis.elements), X).real


def projected_dual(P: np.ndarray, z: complex, basis: AlgebraBasis) -> np.ndarray:
    """Coefficient vector ``p`` pairing with ``D g`` to give ``Re tr(D(dGamma) P z*)``.

    For skew-Hermitian ``X`` and ``Y = P z*`` only the skew-Hermitian part of
    ``Y`` contributes, and ``Re tr(X Y) = -<coeffs(X), coeffs(Y_SH)>`` because
    ``tr(sigma_m sigma_n) = -delta_mn``.  The sign is folded in here:
    ``p_n = Re tr(Y sigma_n) = -Re tr(Y sigma_n^dagger)``, i.e. ``p`` holds the
    coefficients of the skew-Hermitian part of ``Y^dagger``.
    """
    Y = np.asarray(P) * np.conj(z)
    return np.einsum("...ij,nji->...n", Y, basis.elements).real


def overlap_operators(prop: PropagationResult, kind: FidelityKind) -> np.ndarray:
    """``P_k`` for ``k = 1..tau`` (state: ``U^(k-1,0)|psi0><psif|U^(tau,k-1)``;
    gate: ``U^(k-1,0) U_f^dagger U^(tau,k-1)``)."""
    pre = prop.prefixes[:-1]
    suf = prop.suffixes[:-1]
    if isinstance(kind, StateTransfer):
        middle = np.outer(kind.psi0, np.conj(kind.psif))
    else:
        middle = np.conj(kind.target).T
    return pre @ middle @ suf


def _eigenbasis_elements(basis: AlgebraBasis, eig: SkewEig) -> np.ndarray:
    V = eig.vecs
    Vh = np.conj(np.swapaxes(V, -1, -2))
    return Vh[..., None, :, :] @ basis.elements @ V[..., None, :, :]


def d_matrix(gamma: np.ndarray, basis: AlgebraBasis, eig: SkewEig | None = None, tol: float = 1e-10) -> np.ndarray:
    """Real matrix of ``X -> int_0^1 exp(-s Gamma) X exp(s Gamma) ds`` on u(N).

    ``D[m, n] = sum_{r,c} conj(s~_m)[r, c] s~_n[r, c] K[r, c]`` with ``s~`` the basis
    in the eigenbasis of ``Gamma`` and ``K`` the sinc kernel.  Batched over
    leading axes of ``gamma``/``eig``.
    """
    eig = skew_eig(gamma) if eig is None else eig
    St = _eigenbasis_elements(basis, eig)
    K = sinc_kernel(eig.lam)
    D = np.einsum("...mrc,...nrc,...rc->...mn", np.conj(St), St, K)
    if np.max(np.abs(D.imag), initial=0.0) > tol:
        raise ContractError("superoperator matrix has a non-negligible imaginary part")
    return D.real


def z_rows(prop: PropagationResult, kind: FidelityKind, basis: AlgebraBasis | None = None) -> np.ndarray:
    """Row vectors ``z_k = p_k^T D_k``, shape ``(tau, N^2)``."""
    basis = make_basis(prop.dim) if basis is None else basis
    z, _ = overlap(kind, prop.final)
    p = projected_dual(overlap_operators(prop, kind), z, basis)
    D = d_matrix(prop.gammas, basis, prop.eig)
    return np.einsum("km,kmn->kn", p, D)


def perturbation_cap(perts: Iterable[PerturbationDerivatives], norm: str = "fro") -> float:
    """``b = max_{mu,k} ||dGamma_k^mu||`` (Frobenius by default; ``"spectral"`` for comparison)."""
    norms = [np.max(p.norms(norm)) for p in perts]
    if not norms:
        raise ValueError("no perturbation derivatives supplied")
    return float(max(norms))


def beta(gamma: float, rows: np.ndarray, b: float) -> float:
    """``gamma * ||Z||_1 * b`` with ``Z_k = ||z_k||_2``."""
    if b < 0:
        raise ValueError("perturbation cap must be non-negative")
    return float(gamma * np.sum(np.linalg.norm(rows, axis=-1)) * b)


@dataclass
class BoundReport:
    fidelity: float
    gamma: float
    z_norms: np.ndarray
    cap: float
    beta: float
    sensitivities: dict[int, float]
    cap_norm: str = "fro"
    p_rows: np.ndarray | None = field(default=None, repr=False)
    z: np.ndarray | None = field(default=None, repr=False)
    g: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def z_l1(self) -> float:
        return float(np.sum(self.z_norms))

    @property
    def max_sensitivity(self) -> float:
        return float(max(abs(v) for v in self.sensitivities.values()))

    @property
    def ratio(self) -> float:
        m = self.max_sensitivity
        return float(self.beta / m) if m > 0 else float("inf")

    @property
    def holds(self) -> bool:
        return all(abs(v) <= self.beta + 1e-12 for v in self.sensitivities.values())

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "infidelity": 1.0 - self.fidelity,
            "gamma": self.gamma,
            "z_norms": self.z_norms.tolist(),
            "z_l1": self.z_l1,
            "cap": self.cap,
            "cap_norm": self.cap_norm,
            "beta": self.beta,
            "sensitivities": {str(k): v for k, v in self.sensitivities.items()},
            "max_sensitivity": self.max_sensitivity,
            "ratio": self.ratio,
            "holds": self.holds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def bound_report(
    system: ControlSystem,
    fields: Sequence[ControlField],
    grid: TimeGrid,
    kind: FidelityKind,
    basis: AlgebraBasis | None = None,
    prop: PropagationResult | None = None,
    cap_norm: str = "fro",
    keep_vectors: bool = False,
) -> BoundReport:
    """Sensitivities to every collective structure together with the bound."""
    prop = propagate(system, fields, grid) if prop is None else prop
    basis = make_basis(system.dim) if basis is None else basis
    z, gamma = overlap(kind, prop.final)
    perts = [perturbation_derivatives(system, prop, mu) for mu in range(system.n_controls + 1)]
    sens = {p.index: fidelity_sensitivity(prop, kind, p) for p in perts}
    rows = z_rows(prop, kind, basis)
    cap = perturbation_cap(perts, cap_norm)
    report = BoundReport(
        fidelity=kind.fidelity(prop.final),
        gamma=gamma,
        z_norms=np.linalg.norm(rows, axis=-1),
        cap=cap,
        beta=beta(gamma, rows, cap),
        sensitivities=sens,
        cap_norm=cap_norm,
    )
    if keep_vectors:
        report.z = rows
        report.p_rows = projected_dual(overlap_operators(prop, kind), z, basis)
        report.g = {p.index: coefficients(p.dgammas, basis) for p in perts}
    return report
