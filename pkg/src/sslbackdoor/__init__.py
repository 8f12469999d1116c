"""Backdoor attacks on self-supervised image encoders, end to end: contrastive
pre-training, feature-space backdoor injection, downstream classifiers, attack
metrics, and two detectability evaluations."""

__version__ = "0.1.0"

from .attack import (
    AttackConfig,
    AttackSpec,
    LossBreakdown,
    ReferenceSet,
    TargetPair,
    combined_loss,
    inject_backdoor,
    reference_anchor_loss,
    trigger_alignment_loss,
    utility_loss,
)
from .data import (
    AugmentationConfig,
    LabeledDataset,
    ShadowDataset,
    Trigger,
    augment,
    embed_trigger,
    load_cifar10_binary,
    load_trigger,
    make_synthetic_dataset,
    sample_shadow,
    save_cifar10_binary,
    save_trigger,
    square_trigger,
)
from .defenses import (
    MetaClassifier,
    ReversedTrigger,
    anomaly_index,
    load_model_handle,
    make_handle,
    mntd_score,
    mntd_train,
    reverse_engineer_trigger,
)
from .downstream import (
    Classifier,
    PrototypeTable,
    build_class_prototypes,
    extract_features,
    predict,
    predict_batch,
    train_multishot,
    zero_shot_predict,
    zero_shot_predict_batch,
)
from .encoder import Encoder, build_encoder, encode, load_encoder, save_encoder
from .evaluation import (
    MetricsReport,
    accuracy,
    attack_success_rate,
    compile_report,
    similarity_cdf,
)
from .pretrain import (
    DegenerateFeatureError,
    DivergenceError,
    SimCLRConfig,
    cosine_similarity,
    nt_xent_loss,
    pretrain_simclr,
)
