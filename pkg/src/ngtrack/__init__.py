"""Adaptive photon-counting QPSK receiver with neural-network noise tracking."""

from .physics import (PhysicsConfig, heterodyne_mc_oracle, heterodyne_qnl_error,
                      mean_photon_number, pnr_pmf, sample_detection)
from .receiver import (DetectionMatrix, DiscriminationResult, LOState, ReceiverConfig,
                       SymbolInstance, discriminate)
from .noise import NoiseRealization, OUParams, PhaseNoiseParams, generate_realization
from .estimators import BayesGrid, MLPModel, RawEstimate, bayes_estimate, mlp_forward, nn_estimate
from .kalman import CalibrationTable, KalmanState, calibrate_variance
from .tracking import Estimator, TrackerConfig, heterodyne_baseline, run_tracking
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"
