import numpy as np
import pytest

from nmsse.fields import build_sampler, sample
from nmsse.kernels import TimeGrid, build_K, choose_J, discretize_kernel, exponential_kernel
from nmsse.linear import diagonal_system
from nmsse.oracle import CommutingModel


class Example:
    """Three-level dephasing setup: A = diag(1, 0, -1), D = exp(-|tau - s|), S = 0."""

    def __init__(self, t_max=3.0, dt=0.01, xi_seed=7):
        self.grid = TimeGrid.from_tmax(t_max, dt)
        spec = exponential_kernel(1.0)
        self.D = discretize_kernel(spec, "D", self.grid)
        self.S = discretize_kernel(spec, "S", self.grid)
        self.gamma = choose_J(build_K(self.D, self.S), "real_field")
        self.xi_sampler = build_sampler(self.D, self.S)
        self.sys = diagonal_system([1.0, 0.0, -1.0], np.ones(3) / np.sqrt(3))
        self.model = CommutingModel.from_system(self.sys, self.D)
        self.A = np.diag([1.0, 0.0, -1.0])
        self.xi = sample(self.xi_sampler, xi_seed, 1)[0]


@pytest.fixture(scope="session")
def example():
    return Example()


@pytest.fixture(scope="session")
def short_example():
    return Example(t_max=1.0, dt=0.01)
