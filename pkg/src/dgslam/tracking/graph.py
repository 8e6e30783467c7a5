"""Keyframes, flow edges and the factor graph that holds them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInput
from ..geometry import Intrinsics, Pose

EDGE_KINDS = ("odometry", "loop", "global")


@dataclass
class TrackingConfig:
    tau: float = 2.25
    tau_loop: float = 25.0
    tau_t: int = 20
    alpha1: float = 0.01
    alpha2: float = 0.1
    eta: float = 0.01
    n_consistency: int = 2
    global_ba_every: int = 20
    local_window: int = 8
    odometry_neighbors: int = 3
    warmup: int = 6
    init_iters: int = 10
    local_rounds: int = 2
    loop_rounds: int = 3
    global_rounds: int = 4
    dba_per_round: int = 2
    proximity_max_edges: int = 8
    loop_view_angle: float = 70.0


@dataclass
class Keyframe:
    id: int
    frame: int
    pose: Pose
    disparity: np.ndarray
    mono_depth: np.ndarray
    image: np.ndarray
    timestamp: float = 0.0
    scale: float = 1.0
    shift: float = 0.0
    consistency: np.ndarray | None = None
    low_error: np.ndarray | None = None
    exposure: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    depth_fit: tuple[float, float] | None = None

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=float)
        H, W = self.disparity.shape
        if self.consistency is None:
            self.consistency = np.zeros((H, W), dtype=np.int64)
        if self.low_error is None:
            self.low_error = np.zeros((H, W), dtype=bool)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.disparity) & (self.disparity > 0)

    @property
    def depth(self) -> np.ndarray:
        """Multi-view depth 1/d (nan where the disparity is invalid)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.valid, 1.0 / self.disparity, np.nan)

    @property
    def mono_regressor(self) -> np.ndarray:
        """1/D^mono with nan on invalid mono pixels."""
        m = self.mono_depth
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.isfinite(m) & (m > 0), 1.0 / m, np.nan)


@dataclass
class FlowEdge:
    i: int
    j: int
    target: np.ndarray
    weight: np.ndarray
    kind: str = "odometry"

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise InvalidInput(f"unknown edge kind '{self.kind}'")
        if np.any(self.weight < 0):
            raise InvalidInput("negative confidence")
        if not np.all(np.isfinite(self.target)):
            raise InvalidInput("non-finite flow")

    @property
    def key(self) -> tuple[int, int, str]:
        return self.i, self.j, self.kind


class FactorGraph:
    def __init__(self, K: Intrinsics, config: TrackingConfig | None = None):
        self.K = K
        self.config = config or TrackingConfig()
        self.keyframes: list[Keyframe] = []
        self.edges: list[FlowEdge] = []
        self._keys: set[tuple[int, int, str]] = set()
        self.damping = {"dba": 1e-4, "dspo": 1e-4}
        self.rays = K.rays().reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.keyframes)

    def add_keyframe(self, kf: Keyframe) -> Keyframe:
        if kf.id != len(self.keyframes):
            raise InvalidInput(f"keyframe id {kf.id} out of sequence")
        self.keyframes.append(kf)
        return kf

    def has_edge(self, i: int, j: int, kind: str | None = None) -> bool:
        if kind is not None:
            return (i, j, kind) in self._keys
        return any((i, j, k) in self._keys for k in EDGE_KINDS)

    def add_edge(self, edge: FlowEdge) -> bool:
        n = len(self.keyframes)
        if not (0 <= edge.i < n and 0 <= edge.j < n) or edge.i == edge.j:
            raise InvalidInput(f"edge ({edge.i}, {edge.j}) references missing nodes")
        if edge.key in self._keys:
            return False
        self._keys.add(edge.key)
        self.edges.append(edge)
        return True

    def add_flow_edge(self, provider, i: int, j: int, kind: str = "odometry") -> bool:
        if self.has_edge(i, j, kind):
            return False
        target, weight = provider.flow(self.keyframes[i].frame, self.keyframes[j].frame)
        return self.add_edge(FlowEdge(i, j, target, weight, kind))

    def edges_touching(self, nodes) -> list[FlowEdge]:
        nodes = set(nodes)
        return [e for e in self.edges if e.i in nodes or e.j in nodes]

    def poses(self) -> list[Pose]:
        return [kf.pose for kf in self.keyframes]

    def subgraph(self, edges) -> "FactorGraph":
        """Graph sharing the same keyframe objects but a different edge set."""
        g = FactorGraph(self.K, self.config)
        g.keyframes = self.keyframes
        for e in edges:
            g.add_edge(e)
        return g
