"""Runtime scene flow estimation with a coordinate-MLP prior.

The flow between two lidar sweeps is represented by a small MLP that maps a
3D point to its displacement. Its weights are fitted per scene by minimising a
truncated Chamfer objective; no training data is involved.
"""

from nsfp.errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    NSFPError,
    UndefinedMetricError,
    ValidationError,
)
from nsfp.pointcloud import (
    FlowField,
    PointCloud,
    SyntheticSceneSpec,
    apply_flow,
    generate_synthetic_scene,
    generate_synthetic_sequence,
    load_cloud,
    load_flow,
    save_cloud,
    save_flow,
)
from nsfp.nn_index import SpatialIndex, brute_force_nearest, build_index, nearest
from nsfp.net import ArchConfig, NetworkParams, backward, forward, init_params
from nsfp.loss import LossConfig, chamfer, objective
from nsfp.optim import AdamState, SolverConfig, SolveStats, adam_step, solve_batch, solve_flow
from nsfp.metrics import MetricsRecord, evaluate
from nsfp.integrate import SequenceSolution, accumulate, integrate_flow, solve_sequence

__version__ = "0.1.0"
