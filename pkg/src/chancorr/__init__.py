"""chancorr: correlation-aware few-shot adaptation of frozen forecasters.

The package trains a small correlation-aware adapter on top of a frozen
(channel-independent) time-series forecasting backbone:

* `autodiff`     -- minimal reverse-mode AD engine over numpy arrays
* `optim`        -- Adam with optional per-parameter rate scales
* `backbone`     -- frozen patch-linear forecaster surrogate
* `correlation`  -- Pearson rule, learned low-rank terms, composition
* `projection`   -- channel-aware squeeze/excite projection stacks
* `contrastive`  -- correlation-thresholded contrastive objectives
* `fusion`       -- gated fusion of adapter and backbone forecasts
* `adapter`      -- the assembled adapter: init / losses / predict
* `config`       -- TrainConfig plus the key = value file parser
* `data`         -- synthetic generators with planted correlation regimes,
                    CSV ingestion, chronological windowing
* `train`        -- fit / evaluate / ablate / export harness
* `bench`        -- wall-clock scaling measurements
* `serialize`    -- flat binary checkpoints
* `cli`          -- command-line entry points
"""

from . import (adapter, autodiff, backbone, bench, config, contrastive,
               correlation, data, fusion, optim, projection, serialize,
               train)  # noqa: F401
from .adapter import init_adapter, load_adapter, predict, save_adapter
from .backbone import (BackboneConfig, load_backbone, pretrain_backbone,
                       save_backbone)
from .config import ConfigError, TrainConfig, load_train_config, with_updates
from .data import (DataError, SplitSpec, generate_synthetic, load_csv,
                   make_windows, planted_regime, save_csv)
from .train import (DivergenceError, ablate, backbone_mse_mae, evaluate,
                    few_shot_protocol, few_shot_scenario, fit)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "ConfigError", "DataError", "DivergenceError",
    "SplitSpec", "TrainConfig", "ablate", "backbone_mse_mae", "evaluate",
    "few_shot_protocol", "few_shot_scenario", "fit", "generate_synthetic",
    "init_adapter", "load_adapter", "load_backbone", "load_csv",
    "load_train_config", "make_windows", "planted_regime",
    "predict", "pretrain_backbone", "save_adapter", "save_backbone",
    "save_csv", "with_updates",
]
