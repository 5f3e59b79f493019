"""Template-shape and latent-conditioned diffeomorphic-flow learning on
implicit neural representations, with a rigidity (Killing-energy) prior on
the deformation velocity fields."""

from .cli import __version__
from .flow import (
    FlowDiverged,
    FlowTrajectory,
    deformed_implicit,
    integrate_forward,
    integrate_reverse,
)
from .geometry import (
    Domain,
    ScalarGrid,
    ShapeMesh,
    ShapeSpec,
    SurfaceSample,
    add_vertex_noise,
    generate_box_dataset,
    occupancy_primitive,
    sample_surface,
    sdf_primitive,
)
from .infer import EncodeConfig, encode_shape, export_template, export_trajectory, reconstruct
from .loss import (
    LossBreakdown,
    LossWeights,
    MonteCarlo,
    eikonal_loss,
    f_cos,
    occupancy_bce_fidelity,
    off_surface_penalty,
    on_surface_fidelity,
    pointwise_baseline_loss,
    riemannian_regularizer,
    total_training_loss,
)
from .marching import marching_extract
from .metrics import chamfer_distance, earth_mover_distance, hausdorff_distance
from .network import (
    ParamGradient,
    TemplateNet,
    VelocityNetStack,
    backprop,
    h_eps,
    template_eval,
    velocity_eval,
)
from .evaluation import (
    EvalShape,
    MetricReport,
    evaluate_split,
    isometry_defect,
    noise_experiment,
    verify_norm_identity,
)
from .train import (
    TrainConfig,
    TrainState,
    init_run,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

__all__ = [name for name in dir() if not name.startswith("_")]
