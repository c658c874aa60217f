"""Volumetric conditional-GAN brain tumor segmentation: data, networks, training, ensembling, evaluation."""

from .augment import AugmentationConfig, augment
from .data_io import (PhantomSpec, Subject, center_crop, from_categorical, generate_phantom,
                      load_dataset, load_volume, normalize, to_categorical)
from .ensemble import Ensembler, EnsemblerConfig, build_ensembler, ensemble_predict, train_ensembler
from .loss import LossConfig, discriminator_loss, generalized_dice_loss, generator_loss
from .metrics import aggregate, dice, evaluate, hd95, remap_regions
from .model import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
                    count_parameters)
from .postprocess import relabel_small_et, remove_small_clusters
from .train import TrainConfig, cross_validate, make_folds, predict, train

__version__ = "0.1.0"
