import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmsse.errors import ZeroNormState
from nmsse.fields import FieldRealization, sample
from nmsse.kernels import TimeGrid, build_K, choose_J, zero_kernel
from nmsse.linear import diagonal_system
from nmsse.normpreserving import (
    ShiftedField,
    expectation_observable,
    field_increment,
    nonlinear_batch,
    nonlinear_trajectory,
    normalize,
    reweighted_expectation,
    shift_field,
    weighted_histogram,
    weighted_ks,
)


def test_normalize():
    assert np.allclose(normalize(np.array([3.0, 4.0j])), [0.6, 0.8j])
    psi = np.array([1e-20, 0, 0])
    assert np.allclose(normalize(psi), [1, 0, 0])
    with pytest.raises(ZeroNormState):
        normalize(np.zeros(3))
    with pytest.raises(ZeroNormState):
        normalize(np.array([1e-31, 0]))


def test_shift_increment_examples(example):
    D, g = example.D, example.grid
    sf = shift_field(ShiftedField.start(FieldRealization(np.zeros((1, g.M)))), [1.0], D, g.dt)
    vals = sf.current.values[0]
    assert sf.v_index == 1
    assert vals[0] == pytest.approx(1e-2j, abs=1e-15)
    assert vals[100] == pytest.approx(1j * np.exp(-1) * 1e-2, abs=1e-15)
    assert np.allclose(vals.real, 0)


def test_shift_is_additive(example):
    D, g = example.D, example.grid
    sf = ShiftedField.start(FieldRealization(example.xi))
    sf = shift_field(shift_field(sf, [0.3], D, g.dt), [-0.7], D, g.dt)
    expected = example.xi + field_increment(D, 0, [0.3], g.dt) + field_increment(D, 1, [-0.7], g.dt)
    assert np.allclose(sf.current.values, expected, atol=1e-15)
    assert np.array_equal(sf.base.values, example.xi)


def test_shift_stops_at_last_node():
    g = TimeGrid(0.1, 3)
    D = zero_kernel(1, g, "D")
    sf = ShiftedField(*(2 * [FieldRealization(np.zeros((1, 3)))]), v_index=2)
    with pytest.raises(ValueError):
        shift_field(sf, [1.0], D, g.dt)


def test_zero_kernel_keeps_initial_state():
    g = TimeGrid(0.05, 21)
    D = zero_kernel(1, g, "D")
    gamma = choose_J(build_K(D, zero_kernel(1, g)), "real_field")
    sys = diagonal_system([1, 0, -1], np.ones(3) / np.sqrt(3))
    xi = np.zeros((1, g.M), dtype=complex)
    for inner in ("oracle", "mc"):
        res = nonlinear_trajectory(sys, xi, D, g, inner, 10, 0, gamma)
        assert np.allclose(res.trajectory.states, sys.psi0, atol=1e-15)


def test_nonlinear_states_have_unit_norm(example):
    xis = sample(example.xi_sampler, 21, 50)
    states, expect, final, residue = nonlinear_batch(example.sys, xis, example.D, example.grid, "oracle")
    assert np.max(np.abs(np.linalg.norm(states, axis=2) - 1)) <= 1e-12
    assert residue <= 1e-12
    assert np.all(np.abs(expect) <= 1 + 1e-12)
    assert not np.allclose(final, xis)


def test_mc_inner_agrees_with_oracle(short_example):
    """The inner Monte Carlo error should be comparable to the spread between two seeds."""
    ex = short_example
    xis = sample(ex.xi_sampler, 3, 10)
    oracle = nonlinear_batch(ex.sys, xis, ex.D, ex.grid, "oracle")[0]
    mc1 = nonlinear_batch(ex.sys, xis, ex.D, ex.grid, "mc", 2000, 1, ex.gamma)[0]
    mc2 = nonlinear_batch(ex.sys, xis, ex.D, ex.grid, "mc", 2000, 2, ex.gamma)[0]
    assert np.mean(np.abs(mc1 - oracle)) <= np.mean(np.abs(mc1 - mc2))
    assert np.max(np.abs(np.linalg.norm(mc1, axis=2) - 1)) <= 1e-12


def test_nonlinear_trajectory_matches_batch(short_example):
    ex = short_example
    xis = sample(ex.xi_sampler, 3, 4)
    batch = nonlinear_batch(ex.sys, xis, ex.D, ex.grid, "mc", 50, 5, ex.gamma, first_index=0)[0]
    single = nonlinear_trajectory(ex.sys, xis[2], ex.D, ex.grid, "mc", 50, 5, ex.gamma, index=2)
    assert np.allclose(single.trajectory.states, batch[2], atol=1e-14)


def test_reweighting_trivial_cases(short_example):
    ex = short_example
    one = lambda psi: np.ones(len(psi))
    est = reweighted_expectation(ex.sys, ex.D, ex.S, one, ex.grid, ex.grid.M - 1, 2000, 4)
    assert est.value == pytest.approx(est.mean_weight, rel=1e-12)
    assert est.skipped == 0
    pop = expectation_observable(ex.A)
    at0 = reweighted_expectation(ex.sys, ex.D, ex.S, pop, ex.grid, 0, 100, 4)
    assert at0.value == pytest.approx(0, abs=1e-15)
    assert at0.stderr == pytest.approx(0, abs=1e-15)
    assert at0.effective_size == pytest.approx(100)


def test_cooked_measure_has_unit_mean_weight(short_example):
    ex = short_example
    est = reweighted_expectation(ex.sys, ex.D, ex.S, lambda p: np.ones(len(p)), ex.grid,
                                 ex.grid.M - 1, 20_000, 8)
    assert abs(est.mean_weight - 1) <= 5 * est.weight_stderr


def test_reweighting_mc_inner_matches_oracle(short_example):
    ex = short_example
    pop = expectation_observable(ex.A)
    node = 50
    a = reweighted_expectation(ex.sys, ex.D, ex.S, pop, ex.grid, node, 200, 3, "oracle")
    b = reweighted_expectation(ex.sys, ex.D, ex.S, pop, ex.grid, node, 200, 3, "mc", 4000, ex.gamma)
    assert np.allclose(a.weights, b.weights, rtol=0.1)


def test_histogram_unit_mass():
    rs = np.random.default_rng(0)
    v, w = rs.normal(size=500), rs.exponential(size=500)
    edges, dens = weighted_histogram(v, w)
    assert len(edges) == 51
    assert np.sum(dens * np.diff(edges)) == pytest.approx(1)
    edges2, dens2 = weighted_histogram(v, 3 * w, edges=edges)
    assert np.allclose(dens, dens2)


def test_weighted_ks_behaviour():
    rs = np.random.default_rng(1)
    x, y = rs.normal(size=2000), rs.normal(size=3000)
    assert weighted_ks(x, y).passed
    assert not weighted_ks(x, y + 0.5).passed
    r = weighted_ks(x, y, np.full(3000, 2.0))
    assert r.m_effective == pytest.approx(3000)
    assert r.statistic == pytest.approx(weighted_ks(x, y).statistic)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=5, max_size=30))
def test_weighted_ks_equals_duplication(counts):
    rs = np.random.default_rng(len(counts))
    x = rs.normal(size=40)
    y = rs.normal(size=len(counts))
    w = np.array(counts, dtype=float)
    dup = np.repeat(y, counts)
    assert weighted_ks(x, y, w).statistic == pytest.approx(weighted_ks(x, dup).statistic)


def test_nonlinear_and_reweighted_agree_at_intermediate_time(example):
    node = example.grid.node(2.0)
    pop = expectation_observable(example.A)
    xis = sample(example.xi_sampler, 31, 1000)
    states = nonlinear_batch(example.sys, xis, example.D, example.grid, "oracle")[0]
    direct = pop(states[:, node])
    rw = reweighted_expectation(example.sys, example.D, example.S, pop, example.grid, node, 50_000, 32)
    ks = weighted_ks(direct, rw.observables, rw.weights)
    assert ks.passed, ks
