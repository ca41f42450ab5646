"""Stochastic economic MPC on finite-support disturbances."""
from .model import (DiscreteDistribution, StationaryEstimate, SystemModel,
                    expected_stage_cost, make_paper_example, model_from_config,
                    pushforward)

__all__ = ["DiscreteDistribution", "StationaryEstimate", "SystemModel",
           "expected_stage_cost", "make_paper_example", "model_from_config",
           "pushforward"]
