"""Hierarchical probabilistic forecasting with a distributional coherency loss."""
from .config import TrainConfig, load_config
from .datasets import TimeSeriesPanel, WindowSet, generate_synthetic, make_windows, mask_hfmv, preprocess
from .evaluation import MetricsReport, HfmvResult, evaluate, forecast, run_hfmv
from .gaussian import GaussianDist, GaussianForecastSet, coherency_loss, crps_gaussian, interval_score
from .hierarchy import Hierarchy, build_hierarchy, load_hierarchy
from .model import ModelConfig
from .refinement import Refinement, refine_all
from .state import ModelState, load_checkpoint, raw_forecast_pass, save_checkpoint
from .training import TrainHistory, backtest_select, fit, pretrain, train

__version__ = "0.1.0"
