"""Real-time Bayesian inference and goal-oriented prediction for LTI systems.

Offline: block Toeplitz parameter-to-observable and parameter-to-QoI maps
assembled from adjoint marches of an acoustic-gravity wave model, then a
data-space posterior factorization.  Online: the MAP estimate and QoI
forecast with intervals, computed without a single PDE solve.
"""

from .bayes import NoiseModel, PosteriorArtifacts, run_offline
from .pipeline import infer_map, predict_qoi, run_online
from .prior import EllipticOperator, PriorSpec
from .toeplitz import BlockToeplitzMap, SpaceTimeField
from .wave import GridSpec, ObservationSpec, PhysicalConstants, WaveModel

__version__ = "0.1.0"

__all__ = [
    "BlockToeplitzMap", "SpaceTimeField", "GridSpec", "ObservationSpec", "PhysicalConstants", "WaveModel",
    "EllipticOperator", "PriorSpec", "NoiseModel", "PosteriorArtifacts", "run_offline", "infer_map",
    "predict_qoi", "run_online",
]
