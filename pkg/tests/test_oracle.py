import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from nmsse.errors import KernelNotSymmetric, ShapeMismatch
from nmsse.fields import sample
from nmsse.kernels import DiscretizedKernel, TimeGrid, discretize_kernel, exponential_kernel
from nmsse.linear import SystemSpec, diagonal_system
from nmsse.oracle import (
    CommutingModel,
    exact_dephasing_density,
    exact_linear_state,
    exact_linear_trajectory,
    exponential_lambda,
    lambda_integrals,
    theta_integrals,
)


def _exp_D(grid, rate=1.0):
    return discretize_kernel(exponential_kernel(rate), "D", grid)


def test_theta_and_lambda_at_unit_time():
    g = TimeGrid.from_tmax(1.0, 0.01)
    D = _exp_D(g)
    assert theta_integrals(D, g)[-1].real == pytest.approx(np.exp(-1), abs=1e-4)
    assert lambda_integrals(D, g)[-1].real == pytest.approx(2 * np.exp(-1), abs=1e-4)
    assert exponential_lambda(1.0) == pytest.approx(2 * np.exp(-1), rel=1e-14)
    assert theta_integrals(D, g)[0] == 0 and lambda_integrals(D, g)[0] == 0


def test_exponential_lambda_against_quadrature():
    for t, r in [(0.5, 1.0), (2.0, 0.3), (3.0, 2.5)]:
        half, _ = dblquad(lambda s, u: np.exp(-r * (u - s)), 0, t, 0, lambda u: u, epsabs=1e-13)
        assert exponential_lambda(t, r) == pytest.approx(2 * half, rel=1e-9)


def test_trapezoid_quadrature_is_second_order():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        g = TimeGrid.from_tmax(2.0, dt)
        errs.append(abs(lambda_integrals(_exp_D(g), g)[-1].real - exponential_lambda(2.0)))
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.15)


def test_dephasing_matches_time_local_product_integral():
    """Coherences obey d rho_jk / dt = -(a_j - a_k)^2 int_0^t D(t, s) ds rho_jk."""
    g = TimeGrid.from_tmax(3.0, 0.01)
    sys = diagonal_system([1.0, 0.0, -1.0], np.ones(3) / np.sqrt(3))
    model = CommutingModel.from_system(sys, _exp_D(g))
    rate = lambda t: quad(lambda s: np.exp(-abs(t - s)), 0, t)[0]
    for node in (20, 100, 300):
        t = g.times[node]
        integral = quad(rate, 0, t)[0]
        rho = exact_dephasing_density(model, g, node)
        diff = np.subtract.outer(model.a, model.a)
        ref = np.outer(sys.psi0, sys.psi0.conj()) * np.exp(-diff**2 * integral)
        assert np.allclose(rho, ref, atol=1e-4)


def test_dephasing_density_properties(example):
    rho = exact_dephasing_density(example.model, example.grid, example.grid.M - 1)
    assert np.allclose(rho, rho.conj().T)
    assert np.trace(rho).real == pytest.approx(1)
    assert np.allclose(np.diag(rho), 1 / 3)
    assert np.linalg.eigvalsh(rho)[0] >= -1e-14
    assert abs(rho[0, 2]) < abs(rho[0, 1])


def test_linear_state_matches_trajectory(example):
    traj = exact_linear_trajectory(example.model, example.xi, example.grid)
    theta = theta_integrals(example.D, example.grid)
    for node in (0, 17, 150, example.grid.M - 1):
        s = exact_linear_state(example.model, example.xi, example.grid, node, theta=theta)
        assert np.allclose(s, traj[node], atol=1e-14)
    assert np.allclose(traj[0], example.sys.psi0)


def test_xi_average_reproduces_dephasing(short_example):
    ex = short_example
    node = ex.grid.M - 1
    theta = theta_integrals(ex.D, ex.grid)
    xis = sample(ex.xi_sampler, 11, 10_000)
    states = np.stack([exact_linear_state(ex.model, x, ex.grid, node, theta) for x in xis])
    outer = states[:, :, None] * states[:, None, :].conj()
    mean = outer.mean(axis=0)
    se = np.hypot(outer.real.std(axis=0, ddof=1), outer.imag.std(axis=0, ddof=1)) / np.sqrt(len(xis))
    exact = exact_dephasing_density(ex.model, ex.grid, node)
    assert np.all(np.abs(mean - exact) <= 5 * np.maximum(se, 1e-12))


def test_rejects_asymmetric_kernel():
    g = TimeGrid(0.1, 5)
    vals = np.eye(5, dtype=complex)
    vals[0, 1] = 0.5j
    D = DiscretizedKernel(1, 5, vals, "D")
    model = CommutingModel([1.0, -1.0], D, np.array([1, 0], dtype=complex))
    with pytest.raises(KernelNotSymmetric):
        exact_dephasing_density(model, g, 3)


def test_rejects_noncommuting_system():
    g = TimeGrid(0.1, 5)
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sys = SystemSpec(sx, np.diag([1.0, -1.0]), np.array([1, 0]))
    with pytest.raises(ShapeMismatch):
        CommutingModel.from_system(sys, _exp_D(g))
