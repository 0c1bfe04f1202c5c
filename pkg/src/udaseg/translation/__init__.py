"""Unpaired source-to-target image translation and the CutSeg end-to-end variant."""
from .cutseg import CutSegConfig, resolution_route, train_cutseg
from .losses import adversarial_loss, cycle_consistency_loss, mae_loss, patchnce_loss
from .train import (MODES, PseudoSample, PseudoTargetSet, TranslationConfig, TranslationResult,
                    generator_from_checkpoint, harvest, histogram_distance, identity_generator_checkpoint,
                    synthesize, train_translation, translate)
