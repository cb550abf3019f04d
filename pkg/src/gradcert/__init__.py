"""Stability certificates for gradient-bounded controllers on LTI-plus-residual plants.

The package certifies finite L2 gain of feedback loops between a stable plant
and any controller whose per-entry partial derivatives stay inside a bound
box, by assembling and solving LMI feasibility problems (linear and
IQC-augmented nonlinear forms), and closes the loop with a desk-scale
gradient-regulated policy-gradient learner on two bundled benchmarks.
"""

from .benchmarks import Benchmark, build_flight, build_power, preset
from .certifier import (
    Certificate,
    CertificationSetup,
    MarginCurve,
    assemble_lti_sdp,
    assemble_nonlinear_sdp,
    bisect_gamma,
    bounds_for_mode,
    certify,
    feasibility,
    freq_domain_check,
    freq_domain_feasibility,
    max_certified_l,
    sweep_margin,
)
from .errors import CertificationError, ValidationError
from .gradient_bounds import (
    GradientBoundSet,
    MultiplierSet,
    QuadConstraint,
    bounds_from_config,
    build_M,
    check_pointwise,
    decompose_sector,
    membership_S,
)
from .iqc_blocks import (
    IqcBlock,
    combine,
    l2_gain_iqc,
    sector_iqc,
    slope_restricted_stack,
    zames_falb_iqc,
)
from .learner import RolloutBatch, TrainConfig, default_policy, natural_step, train
from .policy import (
    GradientMonitor,
    MultiAgentPolicy,
    PolicyNet,
    hard_threshold,
    lipschitz_upper,
    partial_gradients,
    pattern_export,
)
from .simulator import Trajectory, empirical_l2_gain, exploration_signal, integrate
from .system_model import (
    AugmentedSystem,
    LtiSystem,
    NonlinearBlock,
    augment,
    is_hurwitz,
    nominal_controller,
)

__version__ = "0.1.0"
