"""Conformal prediction sets calibrated across federated clients.

Clients summarise their nonconformity scores in mergeable quantile sketches;
the server merges them and reads off a threshold at a rank that keeps the
marginal coverage guarantee for the mixture of client distributions.
"""

__version__ = "0.1.0"

from .errors import (
    DecodeError,
    DegenerateCalibrationWarning,
    EmptySketchError,
    FCPError,
    FormatError,
    InvalidInputError,
    ParseError,
    TrainingError,
    VacuousQuantileWarning,
)
from .federation import (
    ConformalPredictor,
    FederationPlan,
    QuantileRule,
    calibrate,
    calibrate_scores,
    make_partitions,
    predict,
    sample_test_mixture,
)
from .quantile import MixtureWeights, QuantileResult, Rule, federated_rank, iid_rank, robust_rank
from .scores import PredictionSet, ScoreFunctionSpec, ScoreKind, fit_temperature, score
from .sketch import DDSketch, ExactSketch, MeanOfClientQuantiles, SketchKind, TDigest, deserialize, serialize

__all__ = [
    "ConformalPredictor", "DDSketch", "DecodeError", "DegenerateCalibrationWarning", "EmptySketchError",
    "ExactSketch", "FCPError", "FederationPlan", "FormatError", "InvalidInputError", "MeanOfClientQuantiles",
    "MixtureWeights", "ParseError", "PredictionSet", "QuantileResult", "QuantileRule", "Rule",
    "ScoreFunctionSpec", "ScoreKind", "SketchKind", "TDigest", "TrainingError", "VacuousQuantileWarning",
    "calibrate", "calibrate_scores", "deserialize", "federated_rank", "fit_temperature", "iid_rank",
    "make_partitions", "predict", "robust_rank", "sample_test_mixture", "score", "serialize",
]
