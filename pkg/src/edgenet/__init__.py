"""Graph networks over molecular and crystal structures, built on a small
tape-based autodiff core: structure parsing, cutoff-policy graph
construction (fixed radius, k-nearest, Voronoi), an edge-updating message
passing model, and an Adam training loop with early stopping.
"""

from .structures import (
    AtomicStructure,
    DatasetRecord,
    ImagePairs,
    PROPERTY_REGISTRY,
    image_displacements,
    load_records,
    parse_crystal_json,
    parse_xyz,
    save_records,
)
from .graphs import (
    CutoffPolicy,
    MolecularGraph,
    RbfConfig,
    batch_graphs,
    build_graph,
    graph_statistics,
    load_graph_cache,
    rbf_expand,
    save_graph_cache,
)
from .voronoi import voronoi_neighbors
from .autodiff import Tape, Tensor
from .model import (
    FilterTable,
    ModelConfig,
    ModelParams,
    export_filters,
    forward_trace,
    load_checkpoint,
    loss_and_gradients,
    predict,
    save_checkpoint,
)
from .training import (
    AdamState,
    GraphDataset,
    NormalizationStats,
    TrainConfig,
    TrainResult,
    adam_step,
    edge_update_comparison,
    evaluate,
    fit_normalization,
    lr_at,
    train,
)

__version__ = "0.1.0"
