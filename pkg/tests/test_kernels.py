import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from nmsse.errors import NonFiniteKernelValue, NotHermitian, PolicyInapplicable, ShapeMismatch
from nmsse.kernels import (
    KernelSpec,
    TimeGrid,
    build_K,
    check_psd,
    choose_J,
    discretize_kernel,
    exponential_kernel,
    kernel_from_coupling,
    psd_tolerance,
    real_embedding,
    single_mode_kernel,
    zero_kernel,
)


def test_grid_basics():
    g = TimeGrid.from_tmax(3.0, 0.01)
    assert g.M == 301
    assert g.t_max == pytest.approx(3.0, abs=1e-12)
    assert np.all(np.diff(g.times) > 0)
    assert np.allclose(np.diff(g.times), 0.01)
    assert g.trapezoid_weights(0).sum() == 0
    assert g.trapezoid_weights(100).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 10)
    with pytest.raises(ValueError):
        TimeGrid(0.1, 1)
    with pytest.raises(ValueError):
        TimeGrid.from_tmax(1.0, 0.3)


def test_exponential_kernel_small_grid():
    g = TimeGrid(1.0, 3)
    D = discretize_kernel(exponential_kernel(), "D", g)
    e1, e2 = np.exp(-1), np.exp(-2)
    expected = np.array([[1, e1, e2], [e1, 1, e1], [e2, e1, 1]])
    assert np.allclose(D.values, expected, atol=1e-15)
    assert D.kind == "D"


def test_zero_and_constant_kernels():
    g = TimeGrid(0.5, 4)
    zero = KernelSpec(1, lambda i, j, t, s: 0 * t * s)
    assert not np.any(discretize_kernel(zero, "D", g).values)
    const = KernelSpec(1, lambda i, j, t, s: np.ones(np.broadcast(t, s).shape))
    C = discretize_kernel(const, "D", g).values
    assert np.allclose(C, 1)
    assert np.linalg.matrix_rank(C) == 1
    assert check_psd(C, psd_tolerance(C)).ok


def test_nonfinite_kernel_rejected():
    bad = KernelSpec(1, lambda i, j, t, s: 1 / (t - s))
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteKernelValue):
            discretize_kernel(bad, "D", TimeGrid(0.1, 3))


def test_symmetrization_flags_large_corrections():
    skew = KernelSpec(1, lambda i, j, t, s: np.exp(-np.abs(t - s)) + 0.1 * t)
    with pytest.warns(RuntimeWarning):
        D = discretize_kernel(skew, "D", TimeGrid(0.1, 5))
    assert np.allclose(D.values, D.values.conj().T)


def test_single_mode_coupling():
    g = TimeGrid(0.3, 5)
    w0 = 1.7
    D = kernel_from_coupling(np.ones(1), [w0], [1.0], g)
    t = g.times
    assert np.allclose(D.values, np.exp(-1j * w0 * np.subtract.outer(t, t)))
    zero = kernel_from_coupling(np.zeros(3), [0.0, 1.0, 2.0], [1.0, 1.0, 1.0], g)
    assert not np.any(zero.values)


def test_lorentzian_coupling_reproduces_exponential():
    g = TimeGrid(0.5, 5)
    # independent oracle: Fourier integral of the Lorentzian by adaptive quadrature
    taus = g.times
    oracle = np.array([2 * quad(lambda w: 1 / (np.pi * (1 + w**2)), 0, np.inf, weight="cos", wvar=t)[0]
                       for t in taus])
    assert np.allclose(oracle, np.exp(-taus), atol=1e-8)
    omega = np.arange(-2000, 2000 + 1e-9, 0.02)
    weights = np.full(omega.size, 0.02)
    weights[[0, -1]] = 0.01
    D = kernel_from_coupling(lambda k, l, w: np.sqrt(1 / np.pi) / np.sqrt(1 + w**2), omega, weights, g)
    lag = np.abs(np.subtract.outer(taus, taus))
    target = np.interp(lag, taus, oracle)
    assert np.max(np.abs(D.values - target)) < 1e-3


@settings(max_examples=25, deadline=None)
@given(
    re=arrays(np.float64, (2, 2, 7), elements=st.floats(-3, 3)),
    im=arrays(np.float64, (2, 2, 7), elements=st.floats(-3, 3)),
    w=arrays(np.float64, 7, elements=st.floats(0, 2)),
)
def test_coupling_kernel_is_psd(re, im, w):
    omega = np.linspace(-3, 3, 7)
    D = kernel_from_coupling(re + 1j * im, omega, w, TimeGrid(0.4, 6)).values
    tol = 1e-8 * max(np.max(np.diag(D).real), 1e-300)
    assert check_psd(D, tol).ok


def test_build_K_examples():
    g = TimeGrid(0.1, 6)
    D = discretize_kernel(exponential_kernel(), "D", g)
    S0 = zero_kernel(1, g)
    assert np.allclose(build_K(D, S0).values, D.values)
    SD = discretize_kernel(KernelSpec(1, exponential_kernel().D), "D", g)
    SD = type(SD)(1, g.M, SD.values, "S")
    assert not np.any(build_K(D, SD).values)


def test_build_K_single_mode_by_hand():
    g = TimeGrid(1.0, 2)
    D = discretize_kernel(single_mode_kernel(1.0), "D", g)
    K = build_K(D, zero_kernel(1, g)).values
    e = np.exp(-1j)
    # theta(1) D(t1, t0) and theta(1) D(t1, t0) again from the transposed term
    assert np.allclose(K, [[1, e], [e, 1]])


def test_build_K_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        build_K(zero_kernel(1, TimeGrid(0.1, 3), "D"), zero_kernel(1, TimeGrid(0.1, 4)))


def _random_kernels(draw_re, draw_im, n, M):
    X = draw_re + 1j * draw_im
    D = X @ X.conj().T          # Hermitian
    Y = draw_im + 1j * draw_re
    S = (Y + Y.T) / 2           # complex symmetric
    return D, S


@settings(max_examples=40, deadline=None)
@given(
    re=arrays(np.float64, (6, 6), elements=st.floats(-2, 2)),
    im=arrays(np.float64, (6, 6), elements=st.floats(-2, 2)),
    n=st.sampled_from([1, 2, 3]),
)
def test_K_is_complex_symmetric(re, im, n):
    from nmsse.kernels import DiscretizedKernel

    D, S = _random_kernels(re, im, n, 6 // n)
    K = build_K(DiscretizedKernel(n, 6 // n, D, "D"), DiscretizedKernel(n, 6 // n, S, "S")).values
    assert np.array_equal(K, K.T)


def test_choose_J_real_field():
    g = TimeGrid.from_tmax(3.0, 0.01)
    D = discretize_kernel(exponential_kernel(), "D", g)
    gamma = choose_J(build_K(D, zero_kernel(1, g)), "real_field")
    assert np.array_equal(gamma.J.values, gamma.K.values)
    assert gamma.min_eig >= -gamma.psd_tol
    lam = np.linalg.eigvalsh(gamma.K.values.real)
    assert lam[0] >= -psd_tolerance(gamma.K.values.real)
    assert gamma.assembled.shape == (2 * g.M, 2 * g.M)


def test_choose_J_zero():
    g = TimeGrid(0.1, 5)
    K = build_K(zero_kernel(1, g, "D"), zero_kernel(1, g))
    for policy in ("real_field", "diagonal_shift"):
        gamma = choose_J(K, policy)
        assert not np.any(gamma.J.values)
        assert not np.any(gamma.assembled)
        assert gamma.min_eig >= -gamma.psd_tol


def test_choose_J_diagonal_shift_single_mode():
    g = TimeGrid(1.0, 2)
    D = discretize_kernel(single_mode_kernel(1.0), "D", g)
    K = build_K(D, zero_kernel(1, g))
    with pytest.raises(PolicyInapplicable):
        choose_J(K, "real_field")
    gamma = choose_J(K, "diagonal_shift")
    assert 0 < gamma.shift <= 2
    # oracle: the minimal shift is the largest singular value of K
    assert gamma.shift == pytest.approx(np.linalg.svd(K.values, compute_uv=False)[0], rel=1e-3)
    lam = np.linalg.eigvalsh(real_embedding(gamma.J.values, K.values))
    assert -gamma.psd_tol <= lam[0] <= gamma.psd_tol


def test_choose_J_real_field_rejects_non_psd():
    g = TimeGrid(1.0, 2)
    from nmsse.kernels import DiscretizedKernel

    K = DiscretizedKernel(1, 2, np.array([[0, 1], [1, 0]], dtype=complex), "K")
    with pytest.raises(PolicyInapplicable):
        choose_J(K, "real_field")
    assert choose_J(K, "diagonal_shift").shift == pytest.approx(1.0)


def test_check_psd_examples():
    rep = check_psd(np.eye(3), 1e-8)
    assert rep.ok and rep.min_eig == pytest.approx(1.0)
    rep = check_psd(np.diag([1.0, -1e-3]), 1e-8)
    assert not rep.ok
    with pytest.raises(NotHermitian):
        check_psd(np.array([[1.0, 1.0], [0.0, 1.0]]), 1e-8)


@pytest.mark.parametrize("M", [3, 30, 300])
def test_exponential_kernel_psd(M):
    g = TimeGrid(0.01, M)
    D = discretize_kernel(exponential_kernel(), "D", g).values
    assert check_psd(D, psd_tolerance(D)).ok


def test_kernel_csv_export(tmp_path):
    g = TimeGrid(1.0, 2)
    D = discretize_kernel(single_mode_kernel(1.0), "D", g)
    path = tmp_path / "k.csv"
    D.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "i,a,j,b,re,im"
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (4, 6)
    rebuilt = (rows[:, 4] + 1j * rows[:, 5]).reshape(2, 2)
    assert np.array_equal(rebuilt, D.values)


def test_truncate_is_restriction():
    g = TimeGrid(0.1, 6)
    D = discretize_kernel(exponential_kernel(n=2), "D", g)
    T = D.truncate(3)
    assert T.M == 4 and T.n == 2
    assert np.array_equal(T.block(1, 1), D.block(1, 1)[:4, :4])
    assert not np.any(T.block(0, 1))
