"""Radio radiance fields from beam powers and LiDAR point clouds.

Subpackages cover the planar-array forward model, point-cloud
voxelization, the dual-branch neural field with manual gradients, volume
rendering of angular power spectra and obstacle depths, self-supervised
training, a sparse-recovery baseline, synthetic scene generation, and the
evaluation harness behind the ``radiofield`` command."""

from .arrays import (
    AngularGrid,
    ArrayConfig,
    Codebook,
    MeasurementMatrix,
    RSRPRecord,
    build_angular_grid,
    build_measurement_matrix,
    dft_codebook,
    expected_rsrp,
    rotate_measurement_matrix,
    steering_vector,
)
from .field import (
    EncodingConfig,
    FieldArch,
    FieldOutput,
    FieldParams,
    init_params,
    positional_encode,
    sh_eval,
)
from .metrics import Metrics, NoiseConfig, evaluate_subtasks, inject_noise, mae_db, mse_aps
from .omp import OmpConfig, OmpResult, nnls_on_support, wnomp_solve
from .pointcloud import (
    DensityGrid,
    PointCloud,
    VoxelSpec,
    density_at,
    first_obstacle_depth,
    load_point_cloud,
    translate_to_bs,
    voxelize,
)
from .render import (
    RaySampling,
    RenderConfig,
    RenderOutput,
    composite_rays,
    integrate_oracle,
    make_sampling,
    render_backward,
    render_grid,
    render_grids,
    render_ray,
)
from .scene import Dataset, Scene, SceneConfig, build_dataset, generate_scene, ground_truth_aps
from .training import (
    Adam,
    LossBreakdown,
    TrainConfig,
    TrainingSet,
    env_loss,
    fit,
    radio_loss,
    train_step,
)

__version__ = "0.1.0"
