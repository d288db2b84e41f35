"""Entropy-gated ensemble selection for semantic segmentation.

Each ensemble member joins the per-pixel vote only where its prediction
entropy falls below a per-model threshold; the thresholds are fitted with a
comprehensive-learning particle swarm that maximizes average Dice on
out-of-fold training predictions.
"""

from .clpso import SwarmConfig, optimize, run_swarm
from .fusion import entropy, fuse_pixel, fuse_stack, select
from .metrics import DiceReport, dice_average, dice_per_class
from .pipeline import (
    GridOracleSpec,
    PredictionMatrix,
    SyntheticPredictorSpec,
    build_prediction_matrix,
    fitness_of,
    grid_oracle,
    segment,
    synthesize_predictions,
    train,
)
from .tensor_io import (
    DatasetManifest,
    LabelMask,
    ProbabilityStack,
    ThresholdDocument,
    read_manifest,
    read_mask,
    read_stack,
    read_thresholds,
    write_manifest,
    write_mask,
    write_stack,
    write_thresholds,
)

__version__ = "0.1.0"
