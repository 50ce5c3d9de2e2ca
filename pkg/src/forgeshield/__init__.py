"""forgeshield: white-box adversarial attacks on pixel-level forgery
localization models, plus a trainable noise-suppression defense with a
two-stage optimization strategy and a synthetic-data evaluation loop."""

from .ansm import (
    DefensivePerturbation,
    GeneratorConfig,
    NoiseSuppressor,
    apply_defense,
    build_generator,
    generate_perturbation,
    load_generator,
    save_generator,
)
from .attacks import (
    Algorithm,
    AttackResult,
    AttackSpec,
    CwParams,
    PgnParams,
    bim,
    cw,
    fgsm,
    mi_fgsm,
    pgd,
    pgn,
    run_attack,
)
from .data import (
    DatasetManifest,
    SampleRecord,
    SyntheticForgeryConfig,
    build_adversarial_set,
    generate_synthetic,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from .errors import (
    CapabilityError,
    ConfigurationError,
    ForgeShieldError,
    MissingArtifactError,
)
from .evaluation import (
    DefenseKind,
    MetricsReport,
    conventional_defense,
    evaluate_suite,
    feature_shift_stats,
    pixel_f1,
    rp,
)
from .losses import (
    bce_loss,
    channel_kl,
    channel_softmax,
    dice_loss,
    dual_mask_loss,
    feature_alignment_loss,
    kl,
    mask_loss,
)
from .training import (
    AlignmentConfig,
    PairDataset,
    RefinementConfig,
    StageResult,
    Supervision,
    train_stage1,
    train_stage2,
)
from .types import CANONICAL_RANGE, ValueRange, trunc
from .victim import (
    DepthCategory,
    LocalizationModel,
    UNetVictim,
    VictimConfig,
    VictimTrainConfig,
    binarize,
    build_victim,
    extract_features,
    load_victim,
    predict,
    save_victim,
    select_layers,
    train_victim,
)

__version__ = "0.1.0"
