"""State-transfer and gate fidelities, and the overlap they share."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-12


class DegenerateOverlapError(ValueError):
    """Gate overlap is (numerically) zero, so the gate sensitivity prefactor is undefined."""


def _check_unit(v: np.ndarray, name: str) -> None:
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be a unit vector")


def _check_unitary(U: np.ndarray, name: str, tol: float = UNIT_TOL) -> None:
    n = U.shape[0]
    if U.shape != (n, n) or np.max(np.abs(U.conj().T @ U - np.eye(n))) > tol:
        raise ValueError(f"{name} must be unitary")


@dataclass(frozen=True, eq=False)
class StateTransfer:
    psi0: np.ndarray
    psif: np.ndarray

    def __post_init__(self):
        psi0 = np.array(self.psi0, dtype=complex).ravel()
        psif = np.array(self.psif, dtype=complex).ravel()
        _check_unit(psi0, "psi0")
        _check_unit(psif, "psif")
        if psi0.shape != psif.shape:
            raise ValueError("states must have the same dimension")
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "psif", psif)

    tag = "state"

    @property
    def dim(self) -> int:
        return self.psi0.size

    def fidelity(self, U: np.ndarray) -> float:
        return state_fidelity(U, self.psi0, self.psif)

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "psi0": [[float(z.real), float(z.imag)] for z in self.psi0],
            "psif": [[float(z.real), float(z.imag)] for z in self.psif],
        }


@dataclass(frozen=True, eq=False)
class Gate:
    target: np.ndarray

    def __post_init__(self):
        U = np.array(self.target, dtype=complex)
        _check_unitary(U, "target")
        object.__setattr__(self, "target", U)

    tag = "gate"

    @property
    def dim(self) -> int:
        return self.target.shape[0]

    def fidelity(self, U: np.ndarray) -> float:
        return gate_fidelity(U, self.target)

    def to_dict(self) -> dict:
        return {"tag": self.tag, "target": [[[float(z.real), float(z.imag)] for z in row] for row in self.target]}


FidelityKind = StateTransfer | Gate


def kind_from_dict(data: dict) -> FidelityKind:
    def vec(x):
        a = np.asarray(x, dtype=float)
        return a[..., 0] + 1j * a[..., 1]

    if data["tag"] == "state":
        return StateTransfer(vec(data["psi0"]), vec(data["psif"]))
    if data["tag"] == "gate":
        return Gate(vec(data["target"]))
    raise ValueError(f"unknown fidelity kind {data['tag']!r}")


def state_fidelity(U: np.ndarray, psi0: np.ndarray, psif: np.ndarray) -> float:
    """``|<psi_f| U |psi_0>|^2``."""
    _check_unit(np.asarray(psi0), "psi0")
    _check_unit(np.asarray(psif), "psif")
    return float(abs(np.vdot(psif, U @ psi0)) ** 2)


def gate_fidelity(U: np.ndarray, target: np.ndarray) -> float:
    """``|tr(U_f^dagger U)| / N``; insensitive to global phase."""
    U = np.asarray(U)
    target = np.asarray(target)
    if U.shape != target.shape:
        raise ValueError(f"dimension mismatch {U.shape} vs {target.shape}")
    return float(abs(np.vdot(target, U)) / U.shape[0])


def overlap(kind: FidelityKind, U: np.ndarray) -> tuple[complex, float]:
    """Overlap ``z`` and prefactor ``gamma``.

    State: ``z = <psi_f|U|psi_0>``, ``gamma = 2``, ``F = |z|^2``.
    Gate: ``z = tr(U_f^dagger U)``, ``gamma = 1 / (N^2 F_G)``, ``F = |z| / N``.
    """
    if isinstance(kind, StateTransfer):
        return complex(np.vdot(kind.psif, U @ kind.psi0)), 2.0
    z = complex(np.vdot(kind.target, U))
    n = U.shape[0]
    fid = abs(z) / n
    if fid < 1e-12:
        raise DegenerateOverlapError("gate fidelity below 1e-12")
    return z, 1.0 / (n * n * fid)
