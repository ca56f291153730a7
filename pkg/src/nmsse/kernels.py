"""Time grids and two-point kernels on them.

A kernel with ``n`` channels sampled on a grid of ``M`` nodes is stored as
an ``(n*M, n*M)`` complex matrix whose row ``i*M + a`` corresponds to
channel ``i`` at node ``t_a``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    NonFiniteKernelValue,
    NotHermitian,
    PolicyInapplicable,
    ShapeMismatch,
)

KINDS = ("D", "S", "K", "J", "Gamma-block")

SYMMETRIZE_FLAG = 1e-8
HERMITIAN_RTOL = 1e-10
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_m = m * dt`` for ``m = 0 .. M-1``."""

    dt: float
    M: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.M < 2:
            raise ValueError(f"need at least 2 nodes, got M={self.M}")

    @classmethod
    def from_tmax(cls, t_max: float, dt: float) -> "TimeGrid":
        M = int(round(t_max / dt)) + 1
        if abs(t_max - (M - 1) * dt) > 1e-12 * t_max:
            raise ValueError(f"t_max={t_max} is not a multiple of dt={dt}")
        return cls(dt=float(dt), M=M)

    @property
    def t_max(self) -> float:
        return (self.M - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M) * self.dt

    def node(self, t: float) -> int:
        """Index of the node closest to time ``t``."""
        m = int(round(t / self.dt))
        if not 0 <= m < self.M:
            raise ValueError(f"time {t} outside [0, {self.t_max}]")
        return m

    def truncate(self, m: int) -> "TimeGrid":
        """Grid made of nodes ``0 .. m``."""
        return TimeGrid(self.dt, m + 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.dt / factor, (self.M - 1) * factor + 1)

    def trapezoid_weights(self, m: Optional[int] = None) -> np.ndarray:
        """Length-``M`` weights ``w`` with ``sum(w * f) ~ int_0^{t_m} f``."""
        m = self.M - 1 if m is None else m
        w = np.zeros(self.M)
        if m > 0:
            w[: m + 1] = self.dt
            w[0] = w[m] = self.dt / 2
        return w

    def cumulative_weights(self) -> np.ndarray:
        """``(M, M)`` matrix whose row ``m`` is ``trapezoid_weights(m)``."""
        return np.stack([self.trapezoid_weights(m) for m in range(self.M)])


KernelFunction = Callable[[int, int, np.ndarray, np.ndarray], np.ndarray]


def _zero(i, j, tau, s):
    return np.zeros(np.broadcast(tau, s).shape, dtype=complex)


@dataclass(frozen=True)
class KernelSpec:
    """Correlation kernel ``D`` and relation kernel ``S`` for ``n`` channels.

    Both callables take ``(i, j, tau, s)`` with ``tau`` and ``s`` broadcastable
    arrays and must be vectorized in the time arguments.
    """

    n: int
    D: KernelFunction
    S: KernelFunction = _zero
    name: str = "custom"


def exponential_kernel(rate: float = 1.0, n: int = 1) -> KernelSpec:
    """Stationary ``D_ij(tau, s) = delta_ij exp(-rate |tau - s|)`` with ``S = 0``."""

    def D(i, j, tau, s):
        v = np.exp(-rate * np.abs(np.asarray(tau) - np.asarray(s)))
        return v if i == j else np.zeros_like(v)

    return KernelSpec(n=n, D=D, name="exponential")


def single_mode_kernel(omega0: float) -> KernelSpec:
    """``D(tau, s) = exp(-i omega0 (tau - s))``: one bath mode, Hermitian but not symmetric."""

    def D(i, j, tau, s):
        return np.exp(-1j * omega0 * (np.asarray(tau) - np.asarray(s)))

    return KernelSpec(n=1, D=D, name="single_mode")


@dataclass(frozen=True)
class DiscretizedKernel:
    n: int
    M: int
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.values.shape != (self.n * self.M, self.n * self.M):
            raise ShapeMismatch(
                f"kernel values have shape {self.values.shape}, "
                f"expected {(self.n * self.M,) * 2}"
            )
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    def block(self, i: int, j: int) -> np.ndarray:
        """The ``(M, M)`` time block for channels ``(i, j)``."""
        M = self.M
        return self.values[i * M:(i + 1) * M, j * M:(j + 1) * M]

    def truncate(self, m: int) -> "DiscretizedKernel":
        """Restriction to nodes ``0 .. m``."""
        idx = (np.arange(self.n)[:, None] * self.M + np.arange(m + 1)).ravel()
        return DiscretizedKernel(self.n, m + 1, self.values[np.ix_(idx, idx)], self.kind)

    def to_csv(self, path) -> None:
        n, M = self.n, self.M
        i, a, j, b = np.unravel_index(np.arange(self.values.size), (n, M, n, M))
        v = self.values.ravel()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "a", "j", "b", "re", "im"])
            for row in zip(i, a, j, b, v.real, v.imag):
                w.writerow([*map(int, row[:4]), f"{row[4]:.17g}", f"{row[5]:.17g}"])


def _time_mesh(grid):
    t = grid.times
    return t[:, None], t[None, :]


def _assemble(fn, n, grid):
    tau, s = _time_mesh(grid)
    M = grid.M
    out = np.empty((n * M, n * M), dtype=complex)
    for i in range(n):
        for j in range(n):
            blk = np.broadcast_to(np.asarray(fn(i, j, tau, s), dtype=complex), (M, M))
            out[i * M:(i + 1) * M, j * M:(j + 1) * M] = blk
    if not np.all(np.isfinite(out)):
        raise NonFiniteKernelValue("kernel evaluation produced NaN or Inf")
    return out


def _symmetrized(values, conjugate, label):
    partner = values.conj().T if conjugate else values.T
    fixed = (values + partner) / 2
    scale = np.max(np.abs(values)) if values.size else 0.0
    corr = np.max(np.abs(fixed - values)) if values.size else 0.0
    if scale > 0 and corr > SYMMETRIZE_FLAG * scale:
        warnings.warn(
            f"{label} kernel needed a symmetrization correction of {corr:.3g} "
            f"(relative {corr / scale:.3g})",
            RuntimeWarning,
            stacklevel=3,
        )
    return fixed


def discretize_kernel(spec: KernelSpec, which: str, grid: TimeGrid) -> DiscretizedKernel:
    """Sample ``spec.D`` or ``spec.S`` at every pair of grid nodes.

    ``D`` is forced Hermitian and ``S`` complex-symmetric by averaging with
    the conjugate transpose (resp. transpose); a correction larger than
    ``1e-8`` relative raises a ``RuntimeWarning``.
    """
    if which not in ("D", "S"):
        raise ValueError("which must be 'D' or 'S'")
    fn = spec.D if which == "D" else spec.S
    values = _assemble(fn, spec.n, grid)
    values = _symmetrized(values, conjugate=(which == "D"), label=which)
    return DiscretizedKernel(spec.n, grid.M, values, which)


def zero_kernel(n: int, grid: TimeGrid, kind: str = "S") -> DiscretizedKernel:
    return DiscretizedKernel(n, grid.M, np.zeros((n * grid.M,) * 2, dtype=complex), kind)


def kernel_from_coupling(kappa, omega, weights, grid: TimeGrid) -> DiscretizedKernel:
    """Bath correlation from the coupling matrix ``kappa_k^l(omega)``.

    ``D_ij(tau, s) = sum_w weights[w] sum_l kappa[i, l, w] conj(kappa[j, l, w])
    exp(-i omega[w] (tau - s))``.

    Parameters
    ----------
    kappa : array_like or callable
        Either an array of shape ``(n, L, len(omega))`` or a callable
        ``kappa(k, l, omega_array)``; a 1-d array is read as ``n = L = 1``.
    omega, weights : array_like
        Quadrature nodes and positive weights.
    """
    omega = np.asarray(omega, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if omega.shape != weights.shape or omega.ndim != 1:
        raise ShapeMismatch("omega and weights must be 1-d arrays of equal length")
    if np.any(weights < 0):
        raise ValueError("quadrature weights must be non-negative")
    if callable(kappa):
        kap = np.asarray(kappa(0, 0, omega), dtype=complex)[None, None, :]
    else:
        kap = np.asarray(kappa, dtype=complex)
        if kap.ndim == 1:
            kap = kap[None, None, :]
    if kap.shape[-1] != omega.size:
        raise ShapeMismatch("kappa does not match the omega grid")
    if not np.all(np.isfinite(kap)):
        raise NonFiniteKernelValue("coupling function is not finite on the omega grid")
    n, M = kap.shape[0], grid.M
    # D_ij(tau,s) = sum_w F_iw F_jw^*  with F_i(w, tau) = sqrt(weight) kappa e^{-i w tau}
    phase = np.exp(-1j * np.outer(grid.times, omega))            # (M, W)
    rows = []
    for i in range(n):
        for l in range(kap.shape[1]):
            rows.append(np.sqrt(weights) * kap[i, l] * phase)
    F = np.stack(rows).reshape(n, kap.shape[1], M, omega.size)
    F = F.transpose(0, 2, 1, 3).reshape(n * M, -1)               # ((i,a), (l,w))
    values = F @ F.conj().T
    if not np.all(np.isfinite(values)):
        raise NonFiniteKernelValue("coupling quadrature diverged")
    return DiscretizedKernel(n, M, (values + values.conj().T) / 2, "D")


def _heaviside_blocks(n, M):
    a = np.arange(M)
    theta = np.where(a[:, None] > a[None, :], 1.0, 0.0)
    theta[a, a] = 0.5
    return np.tile(theta, (n, n))


def build_K(D: DiscretizedKernel, S: DiscretizedKernel) -> DiscretizedKernel:
    """Correlation ``E[eta eta]`` of the auxiliary field.

    ``K_ij(tau, s) = theta(tau - s) [D-S]_ij(tau, s) + theta(s - tau) [D-S]_ji(s, tau)``
    with the Heaviside step taken as 1/2 at equal times.
    """
    if D.values.shape != S.values.shape or D.n != S.n:
        raise ShapeMismatch("D and S must be discretized on the same grid and channels")
    E = D.values - S.values
    theta = _heaviside_blocks(D.n, D.M)
    K = theta * E + theta.T * E.T
    return DiscretizedKernel(D.n, D.M, K, "K")


# real embedding of a complex Gaussian vector f = x + i y


def real_embedding(corr: np.ndarray, rel: np.ndarray) -> np.ndarray:
    """Covariance of ``(Re f, Im f)`` given ``E[f f^*] = corr`` and ``E[f f^T] = rel``."""
    xx = (corr + rel).real / 2
    yy = (corr - rel).real / 2
    xy = (rel.imag - corr.imag) / 2
    yx = (rel.imag + corr.imag) / 2
    cov = np.block([[xx, xy], [yx, yy]])
    return (cov + cov.T) / 2


def complex_moments(cov: np.ndarray):
    """Inverse of :func:`real_embedding`: returns ``(corr, rel)``."""
    N = cov.shape[0] // 2
    xx, xy = cov[:N, :N], cov[:N, N:]
    yx, yy = cov[N:, :N], cov[N:, N:]
    corr = xx + yy + 1j * (yx - xy)
    rel = xx - yy + 1j * (xy + yx)
    return corr, rel


@dataclass(frozen=True)
class PsdReport:
    min_eig: float
    ok: bool


def check_psd(matrix: np.ndarray, tol: float) -> PsdReport:
    matrix = np.asarray(matrix)
    scale = np.max(np.abs(matrix)) if matrix.size else 0.0
    if np.max(np.abs(matrix - matrix.conj().T), initial=0.0) > HERMITIAN_RTOL * max(scale, 1e-300):
        raise NotHermitian("matrix is not Hermitian within 1e-10 relative")
    min_eig = float(np.linalg.eigvalsh(matrix)[0]) if matrix.size else 0.0
    return PsdReport(min_eig, min_eig >= -tol)


def psd_tolerance(matrix: np.ndarray) -> float:
    """``1e-8`` times the largest diagonal entry."""
    return PSD_RTOL * max(float(np.max(np.real(np.diag(matrix)), initial=0.0)), 0.0)


@dataclass(frozen=True)
class GammaKernel:
    """Admissible ``(J, K)`` pair for the auxiliary field.

    ``certificate`` is the real covariance of ``(Re eta, Im eta)`` and
    ``min_eig`` its smallest eigenvalue.
    """

    J: DiscretizedKernel
    K: DiscretizedKernel
    certificate: np.ndarray = field(repr=False)
    min_eig: float
    psd_tol: float
    shift: float = 0.0
    policy: str = "real_field"

    @property
    def assembled(self) -> np.ndarray:
        J, K = self.J.values, self.K.values
        return np.block([[J, K], [K.conj(), J.conj()]])

    @property
    def real_field(self) -> bool:
        return self.policy == "real_field"


def choose_J(K: DiscretizedKernel, policy: str = "real_field") -> GammaKernel:
    """Pick the free correlation ``J = E[eta eta^*]`` so that the field exists.

    ``real_field`` sets ``J = K`` (only for a real symmetric PSD ``K``) which
    makes ``eta`` real. ``diagonal_shift`` sets ``J = c I`` with the smallest
    admissible ``c``.
    """
    Kv = K.values
    if np.max(np.abs(Kv - Kv.T), initial=0.0) > 1e-12 * max(np.max(np.abs(Kv), initial=0.0), 1e-300):
        raise ShapeMismatch("K is not complex-symmetric")
    if policy == "real_field":
        scale = np.max(np.abs(Kv), initial=0.0)
        if np.max(np.abs(Kv.imag), initial=0.0) > 1e-12 * max(scale, 1e-300):
            raise PolicyInapplicable("real_field needs a real K")
        Kr = Kv.real
        tol = psd_tolerance(Kr)
        rep = check_psd(Kr, tol)
        if not rep.ok:
            raise PolicyInapplicable(f"real_field needs a PSD K (min eigenvalue {rep.min_eig:.3g})")
        J = DiscretizedKernel(K.n, K.M, Kr.astype(complex), "J")
        Kc = DiscretizedKernel(K.n, K.M, Kr.astype(complex), "K")
        cert = real_embedding(J.values, Kc.values)
        rep = check_psd(cert, psd_tolerance(cert))
        return GammaKernel(J, Kc, cert, rep.min_eig, psd_tolerance(cert), 0.0, policy)
    if policy == "diagonal_shift":
        N = Kv.shape[0]
        # certificate(c) = (c I + B) / 2 with B the embedding of (0, K) doubled
        base = real_embedding(np.zeros_like(Kv), Kv)
        lam = float(np.linalg.eigvalsh(base)[0])
        c = max(0.0, -2.0 * lam)
        J = DiscretizedKernel(K.n, K.M, c * np.eye(N, dtype=complex), "J")
        cert = real_embedding(J.values, Kv)
        tol = psd_tolerance(cert)
        rep = check_psd(cert, tol)
        if not rep.ok:
            # rounding pushed the shifted spectrum below zero; nudge by the deficit
            c += 2 * (tol - rep.min_eig)
            J = DiscretizedKernel(K.n, K.M, c * np.eye(N, dtype=complex), "J")
            cert = real_embedding(J.values, Kv)
            tol = psd_tolerance(cert)
            rep = check_psd(cert, tol)
        return GammaKernel(J, K, cert, rep.min_eig, tol, c, policy)
    raise ValueError(f"unknown J policy {policy!r}")
