"""Closed-form solutions for a single coupling operator commuting with ``H0``.

In this class the linear trajectory for a fixed ``xi`` is
``psi_j(t) = exp(-i a_j X(t) - a_j^2 Theta(t)) psi0_j`` where ``X`` is the
integral of ``xi`` and ``Theta`` the time-ordered double integral of ``D``;
averaging over ``xi`` gives pure dephasing with
``rho_jk(t) = rho_jk(0) exp(-(a_j - a_k)^2 Lambda(t) / 2)``.

All integrals use the trapezoidal rule on the grid so that the oracle and
the Monte Carlo path see exactly the same quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KernelNotSymmetric, ShapeMismatch
from .kernels import DiscretizedKernel, TimeGrid, build_K, zero_kernel
from .linear import SystemSpec


@dataclass(frozen=True)
class CommutingModel:
    a: np.ndarray
    D: DiscretizedKernel
    psi0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "psi0", np.asarray(self.psi0, dtype=complex))
        if not np.all(np.isfinite(self.a)):
            raise ValueError("eigenvalues must be finite")
        if abs(np.linalg.norm(self.psi0) - 1) > 1e-12:
            raise ValueError("psi0 must have unit norm")
        if self.D.n != 1:
            raise ShapeMismatch("the oracle handles a single channel only")

    @classmethod
    def from_system(cls, sys: SystemSpec, D: DiscretizedKernel) -> "CommutingModel":
        A = sys.A[0]
        if sys.n != 1 or np.max(np.abs(A - np.diag(np.diag(A)))) > 0:
            raise ShapeMismatch("oracle needs one diagonal coupling operator")
        if np.max(np.abs(sys.H0 @ A - A @ sys.H0)) > 1e-12:
            raise ShapeMismatch("coupling operator must commute with H0")
        return cls(np.diag(A).real, D, sys.psi0)


def theta_integrals(D: DiscretizedKernel, grid: TimeGrid) -> np.ndarray:
    """``Theta(t_m) = int int_0^{t_m} theta(tau - s) D(tau, s)`` for every node."""
    K = build_K(D, zero_kernel(1, grid, "S")).values
    W = grid.cumulative_weights()
    return 0.5 * np.einsum("ma,ab,mb->m", W, K, W)


def lambda_integrals(D: DiscretizedKernel, grid: TimeGrid) -> np.ndarray:
    """``Lambda(t_m) = int int_0^{t_m} D(tau, s)`` for every node."""
    W = grid.cumulative_weights()
    return np.einsum("ma,ab,mb->m", W, D.values, W)


def exponential_lambda(t, rate: float = 1.0):
    """Closed form of ``Lambda`` for ``D = exp(-rate |tau - s|)``."""
    t = np.asarray(t, dtype=float)
    return 2 * (rate * t - 1 + np.exp(-rate * t)) / rate**2


def _xi_values(xi):
    v = getattr(xi, "values", xi)
    v = np.asarray(v, dtype=complex)
    return v[0] if v.ndim == 2 else v


def exact_linear_trajectory(model: CommutingModel, xi, grid: TimeGrid) -> np.ndarray:
    """Exact ``psi_xi(t_m)`` at every node; shape ``(M, d)``."""
    x = _xi_values(xi)
    W = grid.cumulative_weights()
    X = W @ x
    Theta = theta_integrals(model.D, grid)
    a = model.a
    return np.exp(-1j * np.outer(X, a) - np.outer(Theta, a**2)) * model.psi0


def exact_linear_state(model: CommutingModel, xi, grid: TimeGrid, node: int,
                       theta=None) -> np.ndarray:
    """Exact ``psi_xi(t_node)``.

    ``theta`` may carry precomputed :func:`theta_integrals` to avoid the
    ``O(M^3)`` recomputation in loops.
    """
    x = _xi_values(xi)
    X = grid.trapezoid_weights(node) @ x
    Th = (theta_integrals(model.D, grid) if theta is None else theta)[node]
    a = model.a
    return np.exp(-1j * a * X - a**2 * Th) * model.psi0


def exact_dephasing_density(model: CommutingModel, grid: TimeGrid, node: int,
                            lam=None) -> np.ndarray:
    """Averaged density matrix at ``t_node`` for a real symmetric ``D``."""
    Dv = model.D.values
    scale = max(np.max(np.abs(Dv)), 1e-300)
    if np.max(np.abs(Dv.imag)) > 1e-12 * scale or np.max(np.abs(Dv - Dv.T)) > 1e-12 * scale:
        raise KernelNotSymmetric("dephasing oracle needs a real symmetric D")
    L = (lambda_integrals(model.D, grid) if lam is None else lam)[node]
    rho0 = np.outer(model.psi0, model.psi0.conj())
    diff = np.subtract.outer(model.a, model.a)
    return rho0 * np.exp(-(diff**2) * L.real / 2)
