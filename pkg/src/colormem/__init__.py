"""Few-shot color memory: spatial keys, color-feature values, threshold triplet training."""

from .color_features import (
    Palette,
    build_quantizer,
    ciede2000,
    extract_distribution,
    extract_palette,
    palette_distance,
    rgb_to_lab,
    sym_kl,
)
from .embedder import Projection, describe, project, project_backward
from .imaging import ImageSample, grayscale, load_image, synthetic_corpus
from .memory import (
    MemoryStore,
    ValueMode,
    find_neighbors,
    init_store,
    restore,
    retrieve_knn,
    snapshot,
    supervised_update,
    ttl_loss,
    update,
)
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"
