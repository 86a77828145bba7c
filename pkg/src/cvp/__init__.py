"""Multi-view object embeddings, allocentric grid prompts and a contrastive target-affinity head."""
from .affinity import (
    AffinityHead,
    ContrastiveBatch,
    TrainConfig,
    infonce_grad,
    infonce_loss,
    mlp_forward,
    mse_regression_loss,
    retrieve_topk,
    total_loss,
    train_affinity,
)
from .geometry import (
    PointFeatureCloud,
    aggregate_views,
    backproject_pixel,
    backproject_view,
    embed_all_objects,
    object_embedding,
    point_in_box,
    project_point,
)
from .grid import AllocentricGrid, AutoGrid, GridSpec, bev_center, build_grid, cell_index, serialize_grid
from .relevance import TargetSet, TrainingSample, build_target_set, parse_mentioned_categories
from .scene import CameraParams, ObjectEmbedding, SceneBundle, SceneObject, ViewData, load_scene, save_scene
from .synthetic import SyntheticSpec, make_synthetic_scene

__version__ = "0.1.0"
