from .made import MadeConditioner, build_masks
from .model import FlowConfig, FlowError, FlowModel, PosteriorDraws, flow_log_prob, flow_sample
from .spline import SplineParams, knots_from_raw, rq_spline, rq_spline_forward, rq_spline_inverse

__all__ = [
    "FlowConfig",
    "FlowError",
    "FlowModel",
    "MadeConditioner",
    "PosteriorDraws",
    "SplineParams",
    "build_masks",
    "flow_log_prob",
    "flow_sample",
    "knots_from_raw",
    "rq_spline",
    "rq_spline_forward",
    "rq_spline_inverse",
]
