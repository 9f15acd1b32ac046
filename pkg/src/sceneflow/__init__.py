"""Scene flow estimation for 3D point clouds.

Attention-stabilized spatial abstraction, flow-shifted temporal
correlation, a two-iteration refinement network, procedural scene/pair
generation and evaluation benchmarks, all on a small self-contained
reverse-mode autodiff core.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    PointCloud,
    Grouping,
    farthest_point_sample,
    knn_group,
    radius_group,
    chamfer_distance,
    warp,
)
from .attention import (  # noqa: F401
    FeatureSet,
    ApOutput,
    attention_pool,
    spatial_abstraction,
    temporal_correlation,
    flow_interpolate,
)
from .network import (  # noqa: F401
    FlowField,
    NetworkConfig,
    SegConfig,
    flow_forward,
    flow_loss,
    seg_forward,
    train,
)
from .nn import ParameterStore  # noqa: F401
from .synthdata import (  # noqa: F401
    SceneSpec,
    Scene,
    ScenePair,
    generate_scene,
    generate_pair,
    write_pair,
    read_pair,
)
from .evalbench import (  # noqa: F401
    FlowMetrics,
    StabilityReport,
    flow_metrics,
    magnitude_binned_error,
    stability_benchmark,
)
