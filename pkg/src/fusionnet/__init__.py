"""Multi-channel audio classification with attentive early fusion and
bilinear late fusion over complementary acoustic features."""

from .autodiff import Tensor, backward, load_checkpoint, save_checkpoint
from .evaluation import (
    EvalReport,
    SplitPlan,
    accuracy,
    eer,
    multilabel_eer,
    precision_f1,
    run_ablation,
)
from .features import (
    AudioClip,
    FeatureKind,
    FeatureMap,
    SegmentSet,
    cqt_features,
    extract,
    log_mel_features,
    mel_features,
    mfcc_features,
    segment,
    stft,
)
from .fusion import (
    FusionMode,
    FusionModel,
    ModelConfig,
    build_similarity_matrix,
    interaction_score,
    similarity_score,
)
from .training import Adam, Sample, TrainConfig, bce_loss, l2_penalty, segment_vote, train

__version__ = "0.1.0"
