"""Time-local auxiliary-field unraveling of non-Markovian stochastic Schrödinger equations."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    KernelNotSymmetric,
    NmsseError,
    NonFiniteKernelValue,
    NotHermitian,
    NotPositive,
    PolicyInapplicable,
    SchemeOverflow,
    ShapeMismatch,
    ZeroNormState,
)
from .fields import FieldRealization, FieldSampler, build_sampler, sample  # noqa: F401
from .kernels import (  # noqa: F401
    DiscretizedKernel,
    GammaKernel,
    KernelSpec,
    TimeGrid,
    build_K,
    check_psd,
    choose_J,
    discretize_kernel,
    exponential_kernel,
    kernel_from_coupling,
    single_mode_kernel,
)
from .linear import (  # noqa: F401
    McEstimate,
    StateTrajectory,
    SystemSpec,
    density_matrix,
    diagonal_system,
    heisenberg_ops,
    propagate_time_local,
    unravel_linear,
)
from .normpreserving import (  # noqa: F401
    nonlinear_trajectory,
    normalize,
    reweighted_expectation,
    shift_field,
)
from .oracle import CommutingModel, exact_dephasing_density, exact_linear_state  # noqa: F401
