"""Piecewise-linear network laboratory.

A small numpy stack for training maxout and rectifier networks with and
without batch normalization, counting the exact linear regions those
networks carve input space into, and reproducing desk-scale experiments
on why normalization matters for piecewise-linear activations.
"""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    GenerationError,
    NumericError,
    PlrlabError,
    StateError,
)
from .numerics import SeededRng, batch_moments, finite_diff_grad, matmul, normal_sample
from .layers import (
    INFER,
    TRAIN,
    ActivationSpec,
    BatchNormState,
    ConvParams,
    DropoutSpec,
    LinearParams,
    PoolSpec,
    softmax_xent,
)
from .network import (
    LayerNode,
    NetworkSpec,
    backward,
    build_mim,
    build_mlp,
    calibrate_running_moments,
    forward,
    init_params,
    load_snapshot,
    mim_init_scheme,
    mlp_init_scheme,
    parameters,
    save_snapshot,
)
from .training import (
    MultiRunReport,
    RunReport,
    SgdState,
    TrainConfig,
    evaluate,
    multi_run,
    sgd_step,
    train,
)
from .regions import (
    RegionCensus,
    RegionMap,
    affinity_check,
    census,
    decision_raster,
    enumerate_regions,
    extract_pattern,
    maxout_region_bound,
    rectifier_region_bound,
)
from .experiments import (
    IllCondConfig,
    MimConfig,
    SweepConfig,
    ToyDataset,
    ToyPartitionSpec,
    ablation,
    gen_toy_dataset,
    illcond_sweep,
    load_mnist_idx,
    mnist_mini,
    toy_sweep,
)
from .gradcheck import run_gradcheck

__version__ = "0.1.0"
