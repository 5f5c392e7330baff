"""Monte-Carlo estimators and a finite-volume oracle for killed jump diffusions
with a potential on balls, plus numerical checks of Harnack-type inequalities."""

__version__ = "0.1.0"

from .errors import JumplabError, NoCertificate, NotGaugeable
from .fields import Diffusion, JumpKernel, Potential
from .geometry import BallDomain, BallIntersection, BoundaryChart, ChartBox
from .model import OperatorModel, preset
from .partition import ExitPartition
from .sim import PathConfig, simulate_batch, simulate_until_exit

__all__ = [
    "JumplabError", "NoCertificate", "NotGaugeable", "Diffusion", "JumpKernel", "Potential",
    "BallDomain", "BallIntersection", "BoundaryChart", "ChartBox", "OperatorModel", "preset",
    "ExitPartition", "PathConfig", "simulate_batch", "simulate_until_exit",
]
