"""Semantic-consistency CycleGAN for CT-style <-> ultrasound-style translation.

Subpackages: phantom (procedural dataset generator), data (formats and
preprocessing), networks (generators / discriminators / segmentors), losses,
trainer (three-phase optimization), evaluation (translation + metrics),
gradcheck (finite-difference oracle), cli.
"""

from . import data, evaluation, gradcheck, losses, networks, phantom, trainer
from .data import (
    DEFAULT_PALETTE,
    NUM_CLASSES,
    Dataset,
    DatasetManifest,
    FanGeometry,
    Sample,
    apply_fan_mask,
    decode_mask,
    denormalize,
    encode_mask,
    load_dataset,
    normalize,
    one_hot,
    sample_unpaired_batch,
)
from .evaluation import MetricsReport, export_report, semantic_consistency, translate
from .losses import (
    DiceParams,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    ce_loss,
    cycle_loss,
    dice_loss,
    generator_total,
    seg_loss,
)
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    NetworkHandle,
    SegmentorConfig,
    build_discriminator,
    build_generator,
    build_segmentor,
    discriminator_forward,
    generator_forward,
    load_parameters,
    parameters,
    segmentor_forward,
    set_mode,
)
from .phantom import (
    OrganBlob,
    PhantomScene,
    SpeckleParams,
    build_phantom_dataset,
    generate_scene,
    rasterize_mask,
    render_ct_style,
    render_us_style,
)
from .trainer import (
    CheckpointBundle,
    Networks,
    TrainConfig,
    TrainLogRecord,
    build_networks,
    load_checkpoint,
    lr_at,
    pretrain_segmentors,
    save_checkpoint,
    train,
    training_step,
)

__version__ = "0.1.0"
