"""Weakly-supervised solar power plant classification and detection.

A from-scratch feedback CNN (FB-Net) and its baseline variants for
7-band 16x16 multi-spectral patches, with feature-averaging / CAM /
Grad-CAM localization baselines, m-PCNN feature fusion as the detection
head, IoU and ROC/AUC evaluation harnesses, and a synthetic dataset
generator.
"""

from .activation_maps import (
    ActivationMap,
    cam,
    feature_average,
    grad_cam,
    model_cam,
    normalize_map,
    resize_nearest,
)
from .data import (
    DataFormatError,
    PatchDataset,
    load_dataset,
    load_scene,
    stitch_maps,
    synth_generate,
    tile_scene,
    write_dataset,
    write_pgm,
    write_scene,
)
from .evaluation import (
    ConfusionCounts,
    RocCurve,
    common_tp_set,
    confusion,
    iou_from_counts,
    roc_auc,
    threshold_sweep,
)
from .gradcheck import gradcheck, model_gradcheck
from .models import (
    CheckpointError,
    FeatureBundle,
    ModelParams,
    backward,
    forward,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .mpcnn import (
    MPcnnConfig,
    MPcnnParams,
    MPcnnState,
    beta_from_fc_weights,
    linking_kernel,
    mpcnn_fuse,
    mpcnn_step,
)
from .ops import (
    BatchNormParams,
    ConvParams,
    LinearParams,
    NumericError,
    OptState,
    batchnorm,
    conv2d,
    dropout,
    global_average_pool,
    linear,
    relu,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from .training import TrainConfig, TrainLog, augment_positive, balanced_minibatch, train

__version__ = "0.1.0"
