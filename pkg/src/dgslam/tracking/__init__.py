from .ba import (dba_step, dspo_objective, dspo_step, edge_residual, fit_scale_shift, graph_residual,
                 init_scale_shift, run_alternation)
from .consistency import classify_disparities
from .graph import FactorGraph, FlowEdge, Keyframe, TrackingConfig
from .loop import (build_global_graph, detect_loops, global_ba_due, keyframe_gate, loop_nodes,
                   mean_flow_magnitude, normalize_scale, run_global_ba)

__all__ = [
    "FactorGraph", "FlowEdge", "Keyframe", "TrackingConfig", "build_global_graph",
    "classify_disparities", "dba_step", "detect_loops", "dspo_objective", "dspo_step", "edge_residual",
    "fit_scale_shift", "global_ba_due", "graph_residual", "init_scale_shift", "keyframe_gate", "loop_nodes",
    "mean_flow_magnitude", "normalize_scale", "run_alternation", "run_global_ba",
]
