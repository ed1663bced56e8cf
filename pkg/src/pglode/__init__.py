"""Physics-gated latent ODE testbed for extreme-rainfall forecasting.

The package is organized bottom-up:

- :mod:`pglode.grid` -- grid geometry, predictor stacks, thresholds, tiling
- :mod:`pglode.synth` -- synthetic regime generator and the PGL1 dataset codec
- :mod:`pglode.autodiff` -- minimal reverse-mode tape (conv, pool, pointwise)
- :mod:`pglode.models` -- gated latent ODE, ConvLSTM baseline, persistence,
  and the PGW1 checkpoint codec
- :mod:`pglode.training` -- extreme-weighted loss, Adam, the fit loop
- :mod:`pglode.verification` -- two-tier contingency scoring and CSV reports
- :mod:`pglode.cli` -- the ``pglode`` command-line harness
"""

from .grid import (
    CHANNEL_NAMES,
    GridSpec,
    NormStats,
    PredictorStack,
    RainField,
    ThresholdMap,
    TileIndex,
    compute_norm_stats,
    compute_threshold_map,
    inv_log1p,
    log1p_transform,
    normalize_predictors,
    tile_max,
    tile_partition,
)
from .ioutil import (
    BadMagicError,
    DimensionMismatchError,
    FileFormatError,
    FormatVersionError,
    TruncatedPayloadError,
)
from .models import (
    MODEL_KINDS,
    ConvLSTMForecaster,
    Forecast,
    GatedLatentODE,
    IntegrationError,
    ModelConfig,
    build_model,
    load_checkpoint,
    parameter_count,
    persistence_forecast,
    save_checkpoint,
)
from .synth import SampleSet, SynthConfig, generate, read_dataset, split, write_dataset
from .training import DivergenceError, LossConfig, TrainReport, fit
from .verification import ContingencyCounts, SkillScores, evaluate_model

__version__ = "0.1.0"

__all__ = [
    "CHANNEL_NAMES",
    "GridSpec",
    "NormStats",
    "PredictorStack",
    "RainField",
    "ThresholdMap",
    "TileIndex",
    "compute_norm_stats",
    "compute_threshold_map",
    "inv_log1p",
    "log1p_transform",
    "normalize_predictors",
    "tile_max",
    "tile_partition",
    "BadMagicError",
    "DimensionMismatchError",
    "FileFormatError",
    "FormatVersionError",
    "TruncatedPayloadError",
    "MODEL_KINDS",
    "ConvLSTMForecaster",
    "Forecast",
    "GatedLatentODE",
    "IntegrationError",
    "ModelConfig",
    "build_model",
    "load_checkpoint",
    "parameter_count",
    "persistence_forecast",
    "save_checkpoint",
    "SampleSet",
    "SynthConfig",
    "generate",
    "read_dataset",
    "split",
    "write_dataset",
    "DivergenceError",
    "LossConfig",
    "TrainReport",
    "fit",
    "ContingencyCounts",
    "SkillScores",
    "evaluate_model",
    "__version__",
]
