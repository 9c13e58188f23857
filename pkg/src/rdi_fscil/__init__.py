"""Few-shot class-incremental learning with redundancy decoupling and
dummy-class integration."""

from .core import (
    CosineClassifier,
    DegenerateFeatureError,
    DivergenceError,
    EvalReport,
    FeatureMap,
    MaskKind,
    PatchMask,
    PooledFeature,
    PrototypeStore,
    ScheduleError,
    SessionSchedule,
    validate_schedule,
)
from .data import (
    DatasetAdapter,
    ManifestAdapter,
    NuisanceSharing,
    SyntheticSpec,
    build_schedule,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .model import (
    build_backbone,
    cosine_logits,
    cross_entropy_cosine,
    forward_feature_map,
    global_pool,
    predict,
)
from .rdi import (
    EmptyMaskPolicy,
    MaskSource,
    PoolingMode,
    RdiConfig,
    ali_mask,
    alr_mask,
    extend_with_dummy,
    loss_ali_dummy,
    loss_alr_dummy,
    masked_pool,
    predicted_label,
    total_loss,
)

__version__ = "0.1.0"
