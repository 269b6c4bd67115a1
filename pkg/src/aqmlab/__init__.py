"""aqmlab: an L4S dual-queue AQM lab with an offline-distilled policy model.

Pipeline: simulate traffic through a dual-queue coupled AQM, turn the
kernel-style decision logs into return-conditioned trajectories, clone the
rule-based policy into a small decision-transformer, and evaluate the clone
back inside the closed loop.
"""

__version__ = "0.1.0"

from .features import STATE_FEATURES, STATE_DIM  # noqa: F401
from .simulator import Dualpi2Params, ScenarioConfig, run_scenario  # noqa: F401
from .pool import ExperiencePool, build_pool  # noqa: F401
from .model import ModelConfig, PolicyModel  # noqa: F401
