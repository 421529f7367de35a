"""Event-camera object detection with a spatiotemporal multigraph:
spline convolution over spatial edges, motion attention over temporal edges,
and an incremental engine that updates only the affected subgraph per event."""

from .events import EventStream, GroundTruth, SensorGeometry, parse_events, generate_synthetic
from .graph import GraphConfig, MultiGraph, build_graph
from .network import ModelConfig, init_model, model_forward, param_count
from .engine import AsyncEngine
from .detection import HeadConfig, detect, evaluate_map

__version__ = "0.1.0"
