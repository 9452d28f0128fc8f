"""snapkit: promptable 3D point-cloud segmentation at desk scale."""

from .autoprompt import AutoPromptConfig, SegmentationResult, generate_auto_masks, nms
from .backbone import DomainNorm, EncoderConfig, PointEncoder, domain_norm, \
    encode_point_cloud
from .clicksim import sample_initial_clicks, sample_refinement_click, \
    simulate_interaction
from .geometry import FourierConfig, fourier_encode, nearest_neighbor, \
    voxel_downsample
from .losses import ClickWeightConfig, LossReport, aux_loss, click_weight, \
    dice_loss, focal_loss, score_loss, text_loss, total_loss
from .maskdec import DecoderConfig, MaskPrediction, decode
from .metrics import average_precision, iou_at_k, mask_iou, panoptic_quality
from .model import ModelConfig, SnapModel, encode_scene, load_checkpoint, predict, \
    predict_with_encoding, save_checkpoint
from .pcdata import ClusteringParams, DomainId, SceneSample, SyntheticSceneConfig, \
    cluster_stuff_instances, generate_synthetic_scene, load_scene, save_scene
from .promptenc import PromptSet, TaskTokens, assemble_token_sequence, \
    encode_prompt_point
from .rle import rle_decode, rle_encode
from .textsem import EmbeddingProvider, HashEmbeddingProvider, TextVocabulary, \
    assemble_panoptic, build_vocabulary, classify_masks, open_vocab_query
from .train import TrainConfig, fit, round_robin_batches, train_step

__version__ = "0.1.0"
