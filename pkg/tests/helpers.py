"""Random systems and fields shared by the test modules."""

import numpy as np

from magsens.model import ControlSystem, FourierField, SplineField, random_skew_hermitian


def random_system(n: int, m: int, rng: np.random.Generator, scale: float = 1.0) -> ControlSystem:
    return ControlSystem(
        scale * random_skew_hermitian(n, rng),
        tuple(scale * random_skew_hermitian(n, rng) for _ in range(m)),
    )


def random_fourier(t_final: float, m: int, rng: np.random.Generator, terms: int = 3, amp: float = 1.0):
    return [
        FourierField(t_final, rng.uniform(-amp, amp, terms), rng.uniform(0.0, 5.0, terms))
        for _ in range(m)
    ]


def random_spline(t_final: float, m: int, rng: np.random.Generator, segments: int = 3, amp: float = 1.0):
    return [
        SplineField(t_final, rng.uniform(-amp, amp, segments), rng.uniform(-amp, amp, segments + 1))
        for _ in range(m)
    ]
