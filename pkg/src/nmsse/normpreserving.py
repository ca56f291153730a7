"""Norm-preserving trajectories and cooked-measure estimators.

Two routes lead to normalized states:

* single-time statistics re-weight normalized linear solutions by their
  squared norm (valid for any relation kernel);
* full trajectories for an isotropic noise (``S = 0``) are built node by
  node, shifting the whole field by ``i D(u, v) <A(v)> dv`` and re-solving
  the linear equation from time zero with the shifted field.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .errors import ShapeMismatch, ZeroNormState
from .fields import FieldRealization, FieldSampler, build_sampler, sample
from .kernels import DiscretizedKernel, GammaKernel, TimeGrid
from .linear import (
    StateTrajectory,
    SystemSpec,
    _endpoint_sampler,
    _is_diagonal_static,
    _propagate_batch,
    eta_sampler,
    heisenberg_ops,
    map_ordered,
)
from .oracle import CommutingModel, theta_integrals

ZERO_NORM = 1e-30
IMAG_FLAG = 1e-8
INNER = ("oracle", "mc")


def normalize(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi)
    norm = np.linalg.norm(psi)
    if not norm >= ZERO_NORM:
        raise ZeroNormState(f"state norm {norm:.3g} is numerically zero")
    return psi / norm


def _normalize_rows(psi):
    norm = np.linalg.norm(psi, axis=-1, keepdims=True)
    if np.any(~(norm >= ZERO_NORM)):
        raise ZeroNormState("a state norm collapsed below 1e-30")
    return psi / norm


@dataclass(frozen=True)
class ShiftedField:
    base: FieldRealization
    current: FieldRealization
    v_index: int = 0

    @classmethod
    def start(cls, xi: FieldRealization) -> "ShiftedField":
        return cls(xi, xi, 0)


def field_increment(D: DiscretizedKernel, v: int, expA, dv: float) -> np.ndarray:
    """``i sum_l D_{kl}(u, t_v) <A_l(v)> dv`` on every node ``u``; shape ``(n, M)``."""
    expA = np.atleast_1d(np.asarray(expA, dtype=float))
    n, M = D.n, D.M
    cols = D.values[:, np.arange(n) * M + v]             # (nM, n): column (l, v)
    return 1j * dv * (cols @ expA).reshape(n, M)


def shift_field(sf: ShiftedField, expA, D: DiscretizedKernel, dv: float) -> ShiftedField:
    """Advance the shifted field from node ``v_index`` to ``v_index + 1``."""
    v = sf.v_index
    if v >= D.M - 1:
        raise ValueError("field already shifted up to the last node")
    inc = field_increment(D, v, expA, dv)
    return ShiftedField(sf.base, FieldRealization(sf.current.values + inc), v + 1)


@dataclass(frozen=True)
class NonlinearResult:
    trajectory: StateTrajectory
    expectations: np.ndarray      # <A_l(t_m)> used for the shifts, shape (M, n)
    final_field: np.ndarray       # xi^[t_max], shape (n, M)
    max_imag_residue: float


def _expectations(ops_m, psi):
    # ops_m: (n, d, d), psi: (B, d) normalized
    vals = np.einsum("bi,kij,bj->bk", psi.conj(), ops_m, psi)
    return vals.real, float(np.max(np.abs(vals.imag), initial=0.0))


def nonlinear_batch(sys: SystemSpec, xis: np.ndarray, D: DiscretizedKernel, grid: TimeGrid,
                    inner: str = "mc", n_eta: int = 1000, seed: int = 0,
                    gamma: Optional[GammaKernel | FieldSampler] = None, first_index: int = 0,
                    scheme: str = "exp_midpoint"):
    """Norm-preserving trajectories for a batch of base fields ``xis`` ``(B, n, M)``.

    Returns ``(states, expectations, final_fields, max_imag_residue)`` with
    ``states`` of shape ``(B, M, d)``. Trajectory ``b`` draws its auxiliary
    fields from stream ``(ETA_NONLINEAR, first_index + b, node)``.
    """
    if inner not in INNER:
        raise ValueError(f"inner must be one of {INNER}")
    xis = np.asarray(xis, dtype=complex)
    B, n, M = xis.shape
    if n != sys.n or M != grid.M or D.M != M or D.n != n:
        raise ShapeMismatch("fields, kernel, system and grid disagree")
    dt, d = grid.dt, sys.d
    fast = _is_diagonal_static(sys)
    ops = heisenberg_ops(sys, grid)
    W = grid.cumulative_weights()
    if inner == "oracle":
        model = CommutingModel.from_system(sys, D)
        theta = theta_integrals(D, grid)
        a = model.a
    else:
        if gamma is None:
            raise ValueError("the mc inner solver needs the auxiliary kernel")
        eta_s = gamma if isinstance(gamma, FieldSampler) else eta_sampler(gamma)
        a = np.einsum("kii->ki", sys.A).real if fast else None

    states = np.empty((B, M, d), dtype=complex)
    states[:, 0] = _normalize_rows(np.broadcast_to(sys.psi0, (B, d)))
    expect = np.zeros((B, M, n))
    current = xis.copy()
    residue = 0.0
    for m in range(M - 1):
        ev, res = _expectations(ops[m], states[:, m])
        residue = max(residue, res)
        expect[:, m] = ev
        cols = D.values[:, np.arange(n) * M + m]                   # (nM, n)
        current += 1j * dt * np.einsum("ak,bk->ba", cols, ev).reshape(B, n, M)
        node = m + 1
        if inner == "oracle":
            X = current[:, 0, :] @ W[node]
            psi = np.exp(-1j * np.outer(X, a) - a**2 * theta[node]) * sys.psi0
        elif fast and scheme == "exp_midpoint":
            endpoint = _endpoint_sampler(eta_s, grid, node)
            X = current @ W[node]                                   # (B, n)
            psi = np.empty((B, d), dtype=complex)
            for b in range(B):
                Y = sample(endpoint, seed, n_eta, stream=(rng.ETA_NONLINEAR, first_index + b, node))[:, :, 0]
                psi[b] = np.exp(-1j * ((X[b] + Y) @ a)).mean(axis=0) * sys.psi0
        else:
            sub = grid.truncate(node)
            psi = np.empty((B, d), dtype=complex)
            for b in range(B):
                eta = sample(eta_s, seed, n_eta, stream=(rng.ETA_NONLINEAR, first_index + b, node))
                fields = current[b][None, :, : node + 1] + eta[:, :, : node + 1]
                psi[b] = _propagate_batch(sys, fields, sub, scheme)[:, -1].mean(axis=0)
        states[:, node] = _normalize_rows(psi)
    ev, res = _expectations(ops[M - 1], states[:, M - 1])
    expect[:, M - 1] = ev
    residue = max(residue, res)
    if residue > IMAG_FLAG:
        warnings.warn(f"<A> had an imaginary residue of {residue:.3g}", RuntimeWarning, stacklevel=2)
    return states, expect, current, residue


def nonlinear_trajectory(sys: SystemSpec, xi, D: DiscretizedKernel, grid: TimeGrid,
                         inner: str = "mc", n_eta: int = 1000, seed: int = 0,
                         gamma=None, index: int = 0, scheme: str = "exp_midpoint") -> NonlinearResult:
    """Normalized trajectory ``t -> psi~_{xi^[t]}(t)`` for one base field.

    The cost is one linear solve per node, from time zero each time.
    """
    x = getattr(xi, "values", xi)
    states, expect, final, res = nonlinear_batch(
        sys, np.asarray(x)[None], D, grid, inner, n_eta, seed, gamma, index, scheme
    )
    return NonlinearResult(StateTrajectory(states[0], grid), expect[0], final[0], res)


@dataclass(frozen=True)
class ReweightedEstimate:
    value: np.ndarray
    stderr: np.ndarray
    mean_weight: float
    weight_stderr: float
    skipped: int
    observables: np.ndarray     # phi of each normalized sample
    weights: np.ndarray         # squared norms

    @property
    def effective_size(self) -> float:
        w = self.weights
        return float(w.sum() ** 2 / (w**2).sum()) if w.any() else 0.0


def linear_endpoints(sys: SystemSpec, D: DiscretizedKernel, S: DiscretizedKernel, grid: TimeGrid,
                     node: int, n_xi: int, seed: int, inner: str = "oracle", n_eta: int = 1000,
                     gamma=None, batch: int = 2000, threads: int = 1) -> np.ndarray:
    """Linear states ``psi_xi(t_node)`` for ``n_xi`` base fields; shape ``(n_xi, d)``."""
    if node == 0:
        return np.broadcast_to(sys.psi0, (n_xi, sys.d)).copy()
    sub = grid.truncate(node)
    xi_s = build_sampler(D.truncate(node), S.truncate(node))
    w = sub.trapezoid_weights(node)
    if inner == "oracle":
        model = CommutingModel.from_system(sys, D.truncate(node))
        th = theta_integrals(model.D, sub)[node]
        a = model.a

        def run(chunk):
            start, count = chunk
            xi = sample(xi_s, seed, count, start=start, stream=(rng.XI,))
            X = xi[:, 0, :] @ w
            return np.exp(-1j * np.outer(X, a) - a**2 * th) * sys.psi0
    else:
        from .linear import endpoint_mean

        eta_s = build_sampler(gamma.J.truncate(node), gamma.K.truncate(node))
        endpoint = _endpoint_sampler(eta_s, sub, node) if _is_diagonal_static(sys) else None

        def run(chunk):
            start, count = chunk
            xi = sample(xi_s, seed, count, start=start, stream=(rng.XI,))
            return np.stack([
                endpoint_mean(sys, xi[r], eta_s, sub, node, n_eta, seed,
                              (rng.ETA, start + r), endpoint=endpoint)[0]
                for r in range(count)
            ])

    chunks = [(s, min(batch, n_xi - s)) for s in range(0, n_xi, batch)]
    return np.concatenate(map_ordered(run, chunks, threads))


def reweighted_expectation(sys: SystemSpec, D: DiscretizedKernel, S: DiscretizedKernel,
                           phi: Callable[[np.ndarray], np.ndarray], grid: TimeGrid, node: int,
                           n_xi: int, seed: int, inner: str = "oracle", n_eta: int = 1000,
                           gamma=None, threads: int = 1) -> ReweightedEstimate:
    """Cooked-measure expectation of ``phi`` of the normalized state at ``t_node``.

    ``value = mean(|psi_xi|^2 * phi(psi_xi / |psi_xi|))`` over base fields;
    ``phi`` maps normalized states ``(N, d)`` to ``(N,)`` or ``(N, q)``.
    Samples whose norm collapses below 1e-30 contribute zero and are counted
    in ``skipped``.
    """
    if n_xi < 2:
        raise ValueError("n_xi must be >= 2")
    psi = linear_endpoints(sys, D, S, grid, node, n_xi, seed, inner, n_eta, gamma, threads=threads)
    w = np.einsum("bi,bi->b", psi.conj(), psi).real
    ok = np.sqrt(w) >= ZERO_NORM
    skipped = int(np.count_nonzero(~ok))
    tilde = np.zeros_like(psi)
    tilde[ok] = psi[ok] / np.sqrt(w[ok])[:, None]
    obs = np.asarray(phi(tilde[ok]), dtype=float)
    full = np.zeros((n_xi,) + obs.shape[1:])
    full[ok] = obs
    wf = (w * np.where(ok, 1.0, 0.0)).reshape((-1,) + (1,) * (full.ndim - 1)) * full
    value = wf.mean(axis=0)
    stderr = wf.std(axis=0, ddof=1) / np.sqrt(n_xi)
    return ReweightedEstimate(
        value=value,
        stderr=stderr,
        mean_weight=float(w.mean()),
        weight_stderr=float(w.std(ddof=1) / np.sqrt(n_xi)),
        skipped=skipped,
        observables=full,
        weights=np.where(ok, w, 0.0),
    )


def expectation_observable(op: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """``phi(psi) = Re <psi|op|psi>`` for a batch of normalized states."""
    op = np.asarray(op)
    return lambda psi: np.einsum("bi,ij,bj->b", psi.conj(), op, psi).real


def weighted_histogram(values, weights=None, edges=None, bins: int = 50):
    """Density histogram with weights normalized to unit mass.

    Returns ``(edges, density)``.
    """
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    if edges is None:
        edges = np.linspace(values.min(), values.max(), bins + 1)
    mass, edges = np.histogram(values, bins=edges, weights=weights / weights.sum())
    return edges, mass / np.diff(edges)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    critical: float
    n: int
    m_effective: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.statistic < self.critical


def weighted_ks(x, y, y_weights=None, alpha: float = 0.01) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test, the second sample possibly weighted.

    The critical value uses the asymptotic ``c(alpha) sqrt((n + m) / (n m))``
    with ``m`` the Kish effective size of the weighted sample.
    """
    x = np.sort(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    wy = np.ones_like(y) if y_weights is None else np.asarray(y_weights, dtype=float)
    order = np.argsort(y)
    y, wy = y[order], wy[order]
    cy = np.cumsum(wy) / wy.sum()
    pts = np.concatenate([x, y])
    fx = np.searchsorted(x, pts, side="right") / x.size
    idx = np.searchsorted(y, pts, side="right")
    fy = np.where(idx > 0, cy[np.maximum(idx - 1, 0)], 0.0)
    stat = float(np.max(np.abs(fx - fy)))
    m_eff = float(wy.sum() ** 2 / (wy**2).sum())
    c = np.sqrt(-np.log(alpha / 2) / 2)
    crit = float(c * np.sqrt((x.size + m_eff) / (x.size * m_eff)))
    return KsResult(stat, crit, x.size, m_eff, alpha)
