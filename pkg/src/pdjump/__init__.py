"""Simulation and diagnostics for time-inhomogeneous pure-jump processes and their jump-diffusion limits."""
from .core import (
    BallSet,
    BoxSet,
    ExplosionError,
    InhomogeneousModel,
    Layer,
    LayeredMeasure,
    LimitModel,
    LyapunovSpec,
    ModelError,
    PathRecord,
    RateBoundError,
    TailMoments,
    build_layered_measure,
    inhomogeneous_from_limit,
)
from .simulate import (
    ControlSkeletonInput,
    PathBatch,
    PiecewiseControl,
    SimConfig,
    simulate_inhomogeneous,
    simulate_limit,
    simulate_small_jump,
    simulate_truncated,
    skeleton_path,
)

__version__ = "0.1.0"
