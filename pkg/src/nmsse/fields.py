"""Sampling of correlated complex Gaussian fields on a time grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import NotPositive, ShapeMismatch
from .kernels import DiscretizedKernel, complex_moments, real_embedding

CLIP_RTOL = 1e-8


@dataclass(frozen=True)
class FieldRealization:
    """One field trajectory, ``values[k, m] = field_k(t_m)``."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatch("field values must have shape (n, M)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "node", "re", "im"])
            for k in range(self.n):
                for m in range(self.M):
                    v = self.values[k, m]
                    w.writerow([k, m, f"{v.real:.17g}", f"{v.imag:.17g}"])

    @classmethod
    def from_csv(cls, path) -> "FieldRealization":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = int(rows[:, 0].max()) + 1
        M = int(rows[:, 1].max()) + 1
        values = np.zeros((n, M), dtype=complex)
        values[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2] + 1j * rows[:, 3]
        return cls(values)


@dataclass(frozen=True)
class ClipReport:
    count: int
    magnitude: float


@dataclass(frozen=True)
class FieldSampler:
    """Gaussian sampler for a complex vector of ``n * M`` entries.

    ``factor`` has shape ``(2nM, r)`` with ``factor @ factor.T`` equal to the
    clipped ``embedding_cov``; only the ``r`` strictly positive eigen-directions
    are kept.
    """

    n: int
    M: int
    corr: np.ndarray = field(repr=False)
    rel: np.ndarray = field(repr=False)
    embedding_cov: np.ndarray = field(repr=False)
    factor: np.ndarray = field(repr=False)
    clip_report: ClipReport

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def from_normals(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals of shape ``(count, rank)`` to fields ``(count, n, M)``."""
        N = self.n * self.M
        x = z @ self.factor.T
        return (x[:, :N] + 1j * x[:, N:]).reshape(-1, self.n, self.M)


def _as_matrix(k):
    return k.values if isinstance(k, DiscretizedKernel) else np.asarray(k, dtype=complex)


def build_sampler(corr, rel, n: int | None = None, M: int | None = None) -> FieldSampler:
    """Sampler for a field with ``E[f f^*] = corr`` and ``E[f f^T] = rel``.

    ``corr`` and ``rel`` are :class:`DiscretizedKernel` objects or raw square
    matrices (then ``n`` and ``M`` give the layout; default ``n=1``).

    Raises
    ------
    NotPositive
        If the real embedding covariance has an eigenvalue below
        ``-1e-8 * mean diagonal``: the pair is not an admissible covariance.
    """
    if isinstance(corr, DiscretizedKernel):
        n, M = corr.n, corr.M
    C, S = _as_matrix(corr), _as_matrix(rel)
    if C.shape != S.shape or C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeMismatch("corr and rel must be square matrices of equal shape")
    if n is None:
        n = 1
    if M is None:
        M = C.shape[0] // n
    if n * M != C.shape[0]:
        raise ShapeMismatch("n * M does not match the kernel size")
    cov = real_embedding(C, S)
    lam, V = np.linalg.eigh(cov)
    mean_diag = float(np.mean(np.diag(cov))) if cov.size else 0.0
    clip_tol = CLIP_RTOL * max(mean_diag, 0.0)
    if lam.size and lam[0] < -clip_tol:
        raise NotPositive(
            f"covariance is not positive semi-definite: min eigenvalue {lam[0]:.3g}",
            min_eig=float(lam[0]),
        )
    neg = lam < 0
    clip = ClipReport(int(np.count_nonzero(neg)), float(-lam[neg].sum()) if neg.any() else 0.0)
    # drop directions that carry no variance
    keep = lam > clip_tol * 1e-6 if clip_tol > 0 else lam > 0
    factor = V[:, keep] * np.sqrt(lam[keep])
    return FieldSampler(n, M, C, S, cov, factor, clip)


def sample(sampler: FieldSampler, seed: int, count: int, start: int = 0, stream=(rng.XI,)) -> np.ndarray:
    """Draw ``count`` fields, returned as an array of shape ``(count, n, M)``.

    Draw ``start + r`` depends only on ``(seed, stream, start + r)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if sampler.rank == 0:
        return np.zeros((count, sampler.n, sampler.M), dtype=complex)
    z = rng.standard_normals(seed, tuple(stream), start, count, sampler.rank)
    return sampler.from_normals(z)


def sample_realizations(sampler: FieldSampler, seed: int, count: int, **kw) -> list[FieldRealization]:
    return [FieldRealization(f) for f in sample(sampler, seed, count, **kw)]


def projected_sampler(sampler: FieldSampler, P: np.ndarray) -> FieldSampler:
    """Sampler of the linear functionals ``Y = P f`` for a real matrix ``P``.

    The result is a field with ``n = P.shape[0]`` channels and one node.
    """
    P = np.asarray(P, dtype=float)
    return build_sampler(P @ sampler.corr @ P.T, P @ sampler.rel @ P.T, n=P.shape[0], M=1)


@dataclass(frozen=True)
class EmpiricalCorrelations:
    corr_hat: np.ndarray
    rel_hat: np.ndarray
    corr_stderr_re: np.ndarray
    corr_stderr_im: np.ndarray
    rel_stderr_re: np.ndarray
    rel_stderr_im: np.ndarray
    N: int


def _stderr(sum_x, sum_x2, N):
    var = (sum_x2 - sum_x**2 / N) / (N - 1)
    return np.sqrt(np.maximum(var, 0.0) / N)


def empirical_correlations(samples) -> EmpiricalCorrelations:
    """Sample estimates of ``E[f_a f_b^*]`` and ``E[f_a f_b]`` with standard errors.

    The standard errors come from the sample second moments of the products,
    i.e. fourth moments of the field.
    """
    F = np.asarray([s.values if isinstance(s, FieldRealization) else s for s in samples])
    N = F.shape[0]
    if N < 2:
        raise ValueError("need at least two samples")
    F = F.reshape(N, -1)
    R, I = F.real, F.imag
    RR, II, RI = R.T @ R, I.T @ I, R.T @ I
    R2, I2, X = R**2, I**2, R * I
    R2R2, I2I2, XX = R2.T @ R2, I2.T @ I2, X.T @ X
    R2I2 = R2.T @ I2
    # Re(f_a f_b^*) = RaRb + IaIb,  Im(f_a f_b^*) = IaRb - RaIb
    # Re(f_a f_b)   = RaRb - IaIb,  Im(f_a f_b)   = RaIb + IaRb
    c_re, c_im = RR + II, RI.T - RI
    r_re, r_im = RR - II, RI + RI.T
    c_re2 = R2R2 + 2 * XX + I2I2
    c_im2 = R2I2.T - 2 * XX + R2I2
    r_re2 = R2R2 - 2 * XX + I2I2
    r_im2 = R2I2 + 2 * XX + R2I2.T
    return EmpiricalCorrelations(
        corr_hat=(c_re + 1j * c_im) / N,
        rel_hat=(r_re + 1j * r_im) / N,
        corr_stderr_re=_stderr(c_re, c_re2, N),
        corr_stderr_im=_stderr(c_im, c_im2, N),
        rel_stderr_re=_stderr(r_re, r_re2, N),
        rel_stderr_im=_stderr(r_im, r_im2, N),
        N=N,
    )


@dataclass(frozen=True)
class CharacteristicCheck:
    empirical: complex
    analytic: complex
    stderr: float

    @property
    def zscore(self) -> float:
        d = abs(self.empirical - self.analytic)
        return 0.0 if d == 0 else d / self.stderr if self.stderr > 0 else np.inf


def characteristic_check(sampler: FieldSampler, a, b, draws: int, dt: float, seed: int = 0,
                         stream=(rng.TEST,)) -> CharacteristicCheck:
    """Compare the Monte Carlo characteristic functional with its Gaussian closed form.

    Empirical side: mean of ``exp(-i dt sum(a f - b f^*))``. Analytic side:
    ``exp(dt^2 sum[C a b - (S a a + S^* b b) / 2])`` with the sampler's own
    ``C`` and ``S``.
    """
    a = np.asarray(a, dtype=complex).reshape(-1)
    b = np.asarray(b, dtype=complex).reshape(-1)
    C, S = sampler.corr, sampler.rel
    analytic = np.exp(dt**2 * (a @ C @ b - (a @ S @ a + b @ S.conj() @ b) / 2))
    f = sample(sampler, seed, draws, stream=stream).reshape(draws, -1)
    vals = np.exp(-1j * dt * (f @ a - f.conj() @ b))
    mean = vals.mean()
    se = np.sqrt((vals.real.var(ddof=1) + vals.imag.var(ddof=1)) / draws)
    return CharacteristicCheck(complex(mean), complex(analytic), float(se))


def moments_roundtrip(sampler: FieldSampler):
    """``(corr, rel)`` reassembled from the real embedding covariance."""
    return complex_moments(sampler.embedding_cov)
