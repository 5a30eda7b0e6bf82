"""Self-supervised pretraining for periodic videos.

Masked-autoencoder reconstruction plus a periodic contrastive loss driven by
a temporal self-similarity matrix and consistent masking, with a synthetic
periodic-video data source, downstream task heads, and an evaluation metric
suite.
"""

from .adapt import (
    AugmentConfig,
    FinetuneConfig,
    LabeledClip,
    augment,
    classify,
    decode_segmentation,
    evaluate_task,
    finetune,
    similarity_for_clip,
)
from .backbone import LatentTokens, ModelConfig, VideoModel, init_params
from .masking import (
    MaskPlan,
    VisibleTokens,
    apply_mask,
    full_visible_plan,
    replicate_mask_rows,
    sample_random_mask,
    sample_uniform_frame_mask,
)
from .metrics import classification_metrics, overlap_metrics, roc_auc, surface_metrics
from .objective import (
    LossReport,
    SimilarityMatrix,
    TripletSet,
    candidate_sets,
    mine_triplets,
    reconstruction_loss,
    self_similarity,
    similarity_phase_means,
    total_loss,
    training_step,
    triplet_loss,
)
from .pretrain import TrainConfig, load_checkpoint, run_pretraining, save_checkpoint
from .tokenizer import PatchConfig, PatchGrid, TokenGrid, patchify, unpatchify
from .videodata import (
    SyntheticSpec,
    VideoClip,
    fit_to_length,
    generate_dataset,
    generate_periodic_clip,
    generate_segmentation_clip,
    load_clip,
    load_manifest,
    normalize_clip,
    reverse_pad,
    save_clip,
)

__version__ = "0.1.0"
