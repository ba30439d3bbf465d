"""trimae: tri-modal (audio/visual/text) masked-autoencoder pretraining,
automatic triplet curation, and retrieval/classification evaluation."""

from .adapters import (
    AudioTextScorer,
    Captioner,
    HashAudioTextScorer,
    HashTextEncoder,
    StubCaptioner,
    TextEncoder,
    resolve_captioner,
    resolve_scorer,
    resolve_text_encoder,
)
from .data import (
    FrameImage,
    Manifest,
    MaskSpec,
    Modality,
    PatchSequence,
    Spectrogram,
    TripletRecord,
    read_manifest,
    write_manifest,
)
from .estimators import AudioVisualClassifier, AudioVisualPretrainer
from .losses import (
    LossBreakdown,
    contrastive_av,
    info_nce,
    multiclass_loss,
    multilabel_loss,
    recon_loss,
    total_loss,
)
from .metrics import (
    SimilarityMatrix,
    accuracy,
    build_similarity,
    mean_average_precision,
    recall_at_k,
)
from .model import (
    ModelConfig,
    PooledEmbedding,
    TokenSequence,
    TriModalAutoencoder,
    load_checkpoint,
    load_checkpoint_into,
    save_checkpoint,
    text_encode,
)
from .patches import apply_mask, pad_with_mask_tokens, patchify, sample_mask, unpatchify
from .training import (
    LabeledPair,
    Task,
    TrainConfig,
    TrainLogRecord,
    TrainMode,
    TrainingTriplet,
    encode_pairs,
    evaluate_retrieval,
    finetune,
    finetune_step,
    load_training_triplets,
    pretrain,
    pretrain_step,
    run_ablation_filter_k,
    run_ablation_lambda2,
)
from .triplets import (
    ScoredCaption,
    VideoSample,
    build_triplets,
    caption_frames,
    filter_top_k,
    random_subsample,
    select_best_caption,
)
from .validation import ConfigError, ManifestParseError, ValidationError

__version__ = "0.1.0"
