"""Small synthetic fixed-point maps with known contraction factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LinearContraction:
    """``G(u) = A u + b`` with ``||A||_2 = r`` exactly, so ``r`` is the true contraction factor."""

    A: np.ndarray
    b: np.ndarray
    r: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.A @ u + self.b

    @property
    def fixed_point(self) -> np.ndarray:
        return np.linalg.solve(np.eye(len(self.b)) - self.A, self.b)


def linear_contraction(dim: int = 40, r: float = 0.9, seed: int = 0) -> LinearContraction:
    if not 0.0 < r < 1.0:
        raise ValueError(f"contraction factor must lie in (0, 1), got {r}")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    V, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    s = np.sort(rng.uniform(0.05, 1.0, dim))[::-1]
    s[0] = 1.0
    A = r * (U * s) @ V.T
    return LinearContraction(A, rng.standard_normal(dim), r)


@dataclass
class TanhContraction:
    """``G(u) = A tanh(u) + b``; Lipschitz with constant ``||A||_2 = r`` since tanh is 1-Lipschitz."""

    A: np.ndarray
    b: np.ndarray
    r: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.A @ np.tanh(u) + self.b


def tanh_contraction(dim: int = 20, r: float = 0.8, seed: int = 0) -> TanhContraction:
    lin = linear_contraction(dim, r, seed)
    return TanhContraction(lin.A, 2.0 * lin.b, r)
