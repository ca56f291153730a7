"""Linear unraveling through the time-local auxiliary-field equation.

For fixed fields ``xi`` and ``eta`` the state obeys
``d/dt psi = -i sum_k A_k(t) (xi_k(t) + eta_k(t)) psi``; averaging the
solutions over ``eta`` gives the linear non-Markovian trajectory ``psi_xi``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from . import rng
from .errors import SchemeOverflow, ShapeMismatch
from .fields import FieldRealization, FieldSampler, build_sampler, projected_sampler, sample
from .kernels import DiscretizedKernel, GammaKernel, TimeGrid

OVERFLOW = 1e30
SCHEMES = ("euler", "exp_midpoint")


@dataclass(frozen=True)
class SystemSpec:
    """Coupling operators ``A`` (shape ``(n, d, d)``), Hamiltonian ``H0`` and initial state."""

    A: np.ndarray
    H0: np.ndarray
    psi0: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=complex)
        if A.ndim == 2:
            A = A[None]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "H0", np.asarray(self.H0, dtype=complex))
        object.__setattr__(self, "psi0", np.asarray(self.psi0, dtype=complex))
        d = self.psi0.size
        if A.shape[1:] != (d, d) or self.H0.shape != (d, d):
            raise ShapeMismatch("A, H0 and psi0 dimensions disagree")
        for name, op in [("H0", self.H0), *((f"A[{k}]", a) for k, a in enumerate(A))]:
            scale = max(np.max(np.abs(op), initial=0.0), 1.0)
            if np.max(np.abs(op - op.conj().T), initial=0.0) > 1e-12 * scale:
                raise ValueError(f"{name} is not Hermitian")
        if abs(np.linalg.norm(self.psi0) - 1) > 1e-12:
            raise ValueError("psi0 must have unit norm")

    @property
    def d(self) -> int:
        return self.psi0.size

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def scaled(self, alpha: complex) -> "SystemSpec":
        # bypasses the unit-norm check, for linearity tests only
        out = object.__new__(SystemSpec)
        object.__setattr__(out, "A", self.A)
        object.__setattr__(out, "H0", self.H0)
        object.__setattr__(out, "psi0", alpha * self.psi0)
        return out


def diagonal_system(a, psi0, H0=None) -> SystemSpec:
    """Single- or multi-channel system with diagonal couplings.

    ``a`` is a d-vector (one channel) or an ``(n, d)`` array of eigenvalues.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = a.shape[1]
    A = np.stack([np.diag(row).astype(complex) for row in a])
    H0 = np.zeros((d, d)) if H0 is None else H0
    return SystemSpec(A, H0, np.asarray(psi0, dtype=complex))


@dataclass(frozen=True)
class StateTrajectory:
    states: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite entries")


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with component-wise standard errors.

    ``stderr`` is the modulus ``sqrt(stderr_re**2 + stderr_im**2)``.
    """

    mean: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    N: int

    @property
    def stderr(self) -> np.ndarray:
        return np.hypot(self.stderr_re, self.stderr_im)


class _Moments:
    """Chan-style mean/variance accumulator over real and imaginary parts."""

    def __init__(self):
        self.N = 0
        self.mean = None
        self.m2_re = None
        self.m2_im = None

    def add_batch(self, x: np.ndarray):
        nb = x.shape[0]
        mb = x.mean(axis=0)
        d = x - mb
        m2r, m2i = (d.real**2).sum(axis=0), (d.imag**2).sum(axis=0)
        if self.N == 0:
            self.N, self.mean, self.m2_re, self.m2_im = nb, mb, m2r, m2i
            return
        tot = self.N + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / tot
        self.m2_re = self.m2_re + m2r + delta.real**2 * self.N * nb / tot
        self.m2_im = self.m2_im + m2i + delta.imag**2 * self.N * nb / tot
        self.N = tot

    def estimate(self) -> McEstimate:
        if self.N < 2:
            z = np.zeros(self.mean.shape)
            return McEstimate(self.mean, z, z, self.N)
        den = self.N * (self.N - 1)
        return McEstimate(self.mean, np.sqrt(self.m2_re / den), np.sqrt(self.m2_im / den), self.N)


def _batches(total, size):
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def map_ordered(fn, items, threads: int = 1):
    """``list(map(fn, items))``, optionally on a thread pool; order is preserved."""
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def heisenberg_ops(sys: SystemSpec, times) -> np.ndarray:
    """``A_k(t) = exp(i H0 t) A_k exp(-i H0 t)`` for every time; shape ``(T, n, d, d)``."""
    times = np.asarray(times.times if isinstance(times, TimeGrid) else times, dtype=float)
    lam, V = np.linalg.eigh(sys.H0)
    Ab = np.einsum("ji,kjl,lm->kim", V.conj(), sys.A, V)            # A in H0 eigenbasis
    ph = np.exp(1j * np.subtract.outer(lam, lam)[None] * times[:, None, None])  # (T, d, d)
    out = np.einsum("ij,tkjl,ml->tkim", V, ph[:, None] * Ab[None], V.conj())
    return (out + out.conj().swapaxes(-1, -2)) / 2


def _is_diagonal_static(sys: SystemSpec) -> bool:
    offdiag = sys.A - np.einsum("kii->ki", sys.A)[..., None] * np.eye(sys.d)
    if np.max(np.abs(offdiag), initial=0.0) > 0:
        return False
    comm = np.einsum("ij,kjl->kil", sys.H0, sys.A) - np.einsum("kij,jl->kil", sys.A, sys.H0)
    return np.max(np.abs(comm), initial=0.0) == 0


def _check_overflow(psi):
    if not np.all(np.isfinite(psi)) or np.max(np.abs(psi), initial=0.0) > OVERFLOW:
        raise SchemeOverflow("state amplitude exceeded 1e30; reduce t_max or use a real auxiliary field")


def _propagate_batch(sys: SystemSpec, fields: np.ndarray, grid: TimeGrid, scheme: str,
                     psi0: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve the time-local equation for a batch of total fields ``(B, n, M)`` -> ``(B, M, d)``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    B, n, M = fields.shape
    if n != sys.n or M != grid.M:
        raise ShapeMismatch("field shape does not match system and grid")
    psi0 = sys.psi0 if psi0 is None else psi0
    dt = grid.dt
    if _is_diagonal_static(sys):
        a = np.einsum("kii->ki", sys.A).real                      # (n, d)
        if scheme == "exp_midpoint":
            # trapezoidal cumulative integral of each channel
            F = np.zeros((B, n, M), dtype=complex)
            F[:, :, 1:] = np.cumsum((fields[:, :, 1:] + fields[:, :, :-1]) * (dt / 2), axis=2)
            phase = np.einsum("bkm,kj->bmj", F, a)
            with np.errstate(over="ignore", invalid="ignore"):   # reported by _check_overflow
                psi = np.exp(-1j * phase) * psi0
        else:
            gen = np.einsum("bkm,kj->bmj", fields[:, :, :-1], a)
            with np.errstate(over="ignore", invalid="ignore"):
                factors = np.cumprod(1 - 1j * dt * gen, axis=1)
            psi = np.empty((B, M, sys.d), dtype=complex)
            psi[:, 0] = psi0
            psi[:, 1:] = factors * psi0
        _check_overflow(psi)
        return psi
    psi = np.empty((B, M, sys.d), dtype=complex)
    psi[:, 0] = psi0
    cur = np.broadcast_to(psi0, (B, sys.d)).copy()
    if scheme == "exp_midpoint":
        ops = heisenberg_ops(sys, grid.times[:-1] + dt / 2)
        fmid = (fields[:, :, 1:] + fields[:, :, :-1]) / 2
    else:
        ops = heisenberg_ops(sys, grid.times[:-1])
        fmid = fields[:, :, :-1]
    eye = np.eye(sys.d)
    for m in range(M - 1):
        G = np.einsum("bk,kij->bij", fmid[:, :, m], ops[m])
        step = expm(-1j * dt * G) if scheme == "exp_midpoint" else eye - 1j * dt * G
        cur = np.einsum("bij,bj->bi", step, cur)
        _check_overflow(cur)
        psi[:, m + 1] = cur
    return psi


def _values(f):
    return f.values if isinstance(f, FieldRealization) else np.asarray(f, dtype=complex)


def propagate_time_local(sys: SystemSpec, xi, eta, grid: TimeGrid,
                         scheme: str = "exp_midpoint") -> StateTrajectory:
    """Integrate the time-local equation for one pair of fields.

    ``euler``: ``psi_{m+1} = psi_m - i dt sum_k A_k(t_m) f_k(t_m) psi_m``.
    ``exp_midpoint``: exponential of the generator at the interval midpoint,
    field midpoint taken as the average of the adjacent nodes. No
    normalization is applied.
    """
    xi, eta = _values(xi), _values(eta)
    if xi.shape != eta.shape:
        raise ShapeMismatch("xi and eta shapes differ")
    psi = _propagate_batch(sys, (xi + eta)[None], grid, scheme)[0]
    return StateTrajectory(psi, grid)


def eta_sampler(gamma: GammaKernel) -> FieldSampler:
    return build_sampler(gamma.J, gamma.K)


def unravel_linear(sys: SystemSpec, xi, gamma, grid: TimeGrid, n_eta: int, seed: int,
                   scheme: str = "exp_midpoint", stream: Sequence[int] = (rng.ETA,),
                   batch: int = 512, threads: int = 1) -> McEstimate:
    """Estimate the linear trajectory ``psi_xi`` by averaging over ``n_eta`` auxiliary fields.

    ``gamma`` is a :class:`GammaKernel` or an already built eta
    :class:`FieldSampler`.
    """
    if n_eta < 2:
        raise ValueError("n_eta must be >= 2")
    sampler = gamma if isinstance(gamma, FieldSampler) else eta_sampler(gamma)
    x = _values(xi)

    def run(chunk):
        start, count = chunk
        eta = sample(sampler, seed, count, start=start, stream=tuple(stream))
        return _propagate_batch(sys, x[None] + eta, grid, scheme)

    acc = _Moments()
    for res in map_ordered(run, _batches(n_eta, batch), threads):
        acc.add_batch(res)
    return acc.estimate()


def _endpoint_sampler(sampler: FieldSampler, grid: TimeGrid, node: int) -> FieldSampler:
    """Sampler of the trapezoidal integrals ``int_0^{t_node} f_k`` for every channel."""
    w = grid.trapezoid_weights(node)
    n = sampler.n
    P = np.kron(np.eye(n), w[None, :])
    return projected_sampler(sampler, P)


def _endpoint_states(sys, X, Y, psi0=None):
    """Endpoint states of the diagonal model from field integrals ``X`` (n,) and ``Y`` (B, n)."""
    a = np.einsum("kii->ki", sys.A).real
    psi0 = sys.psi0 if psi0 is None else psi0
    phase = (X[None, :] + Y) @ a
    psi = np.exp(-1j * phase) * psi0
    _check_overflow(psi)
    return psi


def endpoint_mean(sys: SystemSpec, xi: np.ndarray, eta_src: FieldSampler, grid: TimeGrid, node: int,
                  n_eta: int, seed: int, stream, scheme: str = "exp_midpoint", endpoint=None):
    """Mean and standard error of ``psi_{xi, eta}(t_node)`` over ``n_eta`` eta draws.

    ``xi`` has shape ``(n, M)`` on ``grid``. When the couplings are diagonal
    and commute with ``H0``, the exp-midpoint solution only depends on the
    trapezoidal field integrals, so ``endpoint`` (a projected sampler from
    :func:`_endpoint_sampler`) is used to draw them directly.
    """
    if endpoint is not None and scheme == "exp_midpoint" and _is_diagonal_static(sys):
        w = grid.trapezoid_weights(node)
        X = xi @ w
        Y = sample(endpoint, seed, n_eta, stream=tuple(stream))[:, :, 0]
        psi = _endpoint_states(sys, X, Y)
    else:
        sub = grid.truncate(node)
        eta = sample(eta_src, seed, n_eta, stream=tuple(stream))[:, :, : node + 1]
        psi = _propagate_batch(sys, xi[None, :, : node + 1] + eta, sub, scheme)[:, -1]
    mean = psi.mean(axis=0)
    se = np.sqrt((psi.real.var(axis=0, ddof=1) + psi.imag.var(axis=0, ddof=1)) / n_eta)
    return mean, se


@dataclass(frozen=True)
class DensityEstimate:
    rho: np.ndarray
    stderr: float
    stderr_matrix: np.ndarray
    antihermitian_residue: float
    N_xi: int
    N_eta: int

    @property
    def trace(self) -> complex:
        return np.trace(self.rho)


def density_matrix(sys: SystemSpec, D: DiscretizedKernel, S: DiscretizedKernel, gamma: GammaKernel,
                   grid: TimeGrid, node: int, n_xi: int, n_eta: int, seed: int,
                   scheme: str = "exp_midpoint", threads: int = 1) -> DensityEstimate:
    """Two-state estimate ``rho = E_xi[ E_eta1[psi] E_eta2[psi]^dagger ]`` at ``t_node``.

    The two auxiliary batches are independent, which removes the upward bias
    that reusing one batch would introduce.
    """
    if n_xi < 2 or n_eta < 2:
        raise ValueError("n_xi and n_eta must be >= 2")
    if node == 0:
        rho = np.outer(sys.psi0, sys.psi0.conj())
        z = np.zeros(rho.shape)
        return DensityEstimate(rho, 0.0, z, 0.0, n_xi, n_eta)
    sub = grid.truncate(node)
    xi_s = build_sampler(D.truncate(node), S.truncate(node))
    eta_s = build_sampler(gamma.J.truncate(node), gamma.K.truncate(node))
    endpoint = _endpoint_sampler(eta_s, sub, node) if _is_diagonal_static(sys) else None

    def one(i):
        xi = sample(xi_s, seed, 1, start=i, stream=(rng.XI,))[0]
        u, _ = endpoint_mean(sys, xi, eta_s, sub, node, n_eta, seed, (rng.ETA, i), scheme, endpoint)
        v, _ = endpoint_mean(sys, xi, eta_s, sub, node, n_eta, seed, (rng.ETA_SECOND, i), scheme, endpoint)
        return np.outer(u, v.conj())

    samples = np.stack(map_ordered(one, range(n_xi), threads))
    acc = _Moments()
    acc.add_batch(samples)
    est = acc.estimate()
    rho = est.mean
    herm = (rho + rho.conj().T) / 2
    residue = float(np.max(np.abs(rho - herm)))
    se = est.stderr
    return DensityEstimate(herm, float(se.max()), se, residue, n_xi, n_eta)
