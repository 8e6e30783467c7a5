"""Sequential tracking-then-mapping over a frame stream, final refinement, evaluation and export."""
from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import EmptyOverlap, DegenerateGeometry, InvalidInput, IoError, PipelineError, SlamError
from .evaluation import align_sim3, ate_rmse, depth_l1, psnr, ssim
from .frontend_sim import Noise, TumDataset, generate_world, write_tum_trajectory
from .gaussian_map import DeformUpdate, GaussianMap, anchor_gaussians, deform_map, write_ply
from .geometry import Pose
from .mapping import (KeyframeWindow, MapFrame, MapperState, final_refine, optimize_map, refresh_visibility,
                      scene_extent, update_keyframe_window, visible_ids)
from .proxy_depth import ProxyDepth, keyframe_proxy
from .rasterizer import render
from .tracking import (FactorGraph, Keyframe, classify_disparities, dba_step, detect_loops, global_ba_due,
                       init_scale_shift, keyframe_gate, loop_nodes, normalize_scale, run_alternation,
                       run_global_ba)

log = logging.getLogger("dgslam")

DEPTH_PNG_SCALE = 5000.0
CHANGE_TOL = 1e-9


@dataclass
class PipelineStats:
    """Instrumentation of the mapping loop (checked by the ordering invariants)."""

    mapping_phases: int = 0
    deform_phases: int = 0
    deformed_gaussians: int = 0
    global_ba: int = 0
    loop_edges: int = 0
    stale_mappings: int = 0  # mapping phases that started with unapplied keyframe updates
    evicted_and_optimized: int = 0
    empty_anchors: int = 0  # keyframes mapped without new Gaussians (no valid proxy depth)
    events: list = field(default_factory=list)


@dataclass
class RunReport:
    metrics: dict
    artifacts: dict
    stats: PipelineStats
    runtime: float


def open_source(cfg: RunConfig):
    """Frame source for the configured input: a synthetic world spec or a TUM-style directory."""
    run = cfg.run
    if run.synthetic:
        return generate_world(run.synthetic, seed=run.seed)
    if run.input:
        p = Path(run.input)
        if p.is_dir():
            return TumDataset(p, scale=run.image_scale, max_frames=run.max_frames,
                              noise=Noise(flow_sigma=run.flow_sigma), seed=run.seed)
        return generate_world(str(p), seed=run.seed)
    raise InvalidInput("no input given (synthetic spec or dataset directory)")


class Slam:
    def __init__(self, source, cfg: RunConfig):
        self.src = source
        self.cfg = cfg
        self.K = source.K
        self.graph = FactorGraph(self.K, cfg.tracking)
        self.gmap = GaussianMap(seed=cfg.run.seed)
        self.window = KeyframeWindow(cfg.mapping.window_size)
        self.mstate = MapperState()
        self.proxies: dict[int, ProxyDepth] = {}
        self.mapped: dict[int, tuple] = {}  # pose, disparity and proxy depth when last mapped
        self.stats = PipelineStats()
        self.frame = -1

    # --- helpers -------------------------------------------------------------

    @contextlib.contextmanager
    def stage(self, name: str):
        try:
            yield
        except PipelineError:
            raise
        except (SlamError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise PipelineError(self.frame, name, exc) from exc

    @property
    def n(self) -> int:
        return len(self.graph)

    def _new_keyframe(self, frame: int) -> Keyframe:
        mono = self.src.mono_depth(frame)
        if self.n == 0:
            pose, disp = Pose.identity(), np.ones(mono.shape)
        else:
            prev = self.graph.keyframes[-1]
            pose = prev.pose
            mean = float(np.mean(prev.disparity[prev.valid])) if prev.valid.any() else 1.0
            disp = np.full(mono.shape, mean)
            if self.cfg.run.mono_depth and prev.depth_fit is not None:
                # seed from the mono prior mapped through the previous keyframe's fit
                d0 = prev.depth_fit[0] * mono + prev.depth_fit[1]
                ok = np.isfinite(d0) & (d0 > 1e-3)
                disp = np.where(ok, 1.0 / np.where(ok, d0, 1.0), mean)
        image = self.src.image(frame)
        return Keyframe(self.n, frame, pose, disp, mono, image, timestamp=self.src.timestamp(frame))

    def _classify(self, nodes):
        for i in nodes:
            classify_disparities(self.graph, i)

    # --- tracking ------------------------------------------------------------

    def track(self, frame: int) -> None:
        tc = self.cfg.tracking
        kf = self.graph.add_keyframe(self._new_keyframe(frame))
        k = kf.id
        for j in range(max(0, k - tc.odometry_neighbors), k):
            self.graph.add_flow_edge(self.src, k, j)
            self.graph.add_flow_edge(self.src, j, k)
        if self.n == 1:
            return
        dspo = self.cfg.run.mono_depth
        if self.n <= tc.warmup:
            for _ in range(tc.init_iters):
                dba_step(self.graph, range(self.n), fixed={0})
            if self.n == tc.warmup:
                normalize_scale(self.graph)
                self._classify(range(self.n))
                for i in range(self.n):
                    init_scale_shift(self.graph, i)
                run_alternation(self.graph, range(self.n), tc.local_rounds, tc.dba_per_round, {0}, dspo)
            return
        active = list(range(max(1, self.n - tc.local_window), self.n))
        for _ in range(tc.dba_per_round * tc.local_rounds):
            dba_step(self.graph, active)
        classify_disparities(self.graph, k)
        init_scale_shift(self.graph, k)
        run_alternation(self.graph, active, tc.local_rounds, tc.dba_per_round, None, dspo)
        if self.cfg.run.loop_closure:
            added = detect_loops(self.graph, active, self.src)
            if added:
                self.stats.loop_edges += len(added)
                nodes = loop_nodes(self.graph, active)
                fixed = {0} | (set(range(self.n)) - nodes)
                run_alternation(self.graph, nodes, tc.loop_rounds, tc.dba_per_round, fixed, dspo)
            if global_ba_due(self.n, tc.global_ba_every):
                self.global_ba()

    def global_ba(self) -> None:
        run_global_ba(self.graph, self.src, dspo=self.cfg.run.mono_depth)
        self.stats.global_ba += 1

    # --- mapping -------------------------------------------------------------

    def _proxy(self, i: int) -> ProxyDepth:
        kf = self.graph.keyframes[i]
        fallback = next((self.graph.keyframes[j].depth_fit for j in range(i - 1, -1, -1)
                         if self.graph.keyframes[j].depth_fit is not None), (1.0, 0.0))
        run = self.cfg.run
        p = keyframe_proxy(kf, fallback, use_mono=run.mono_depth, use_filter=run.multiview_filter)
        self.proxies[i] = p
        return p

    @staticmethod
    def _as_depth(p: ProxyDepth) -> np.ndarray:
        return np.where(p.valid, p.depth, np.nan)

    def pending_updates(self) -> list[int]:
        """Mapped keyframes whose pose or disparity moved since they were last mapped."""
        out = []
        for i, (pose, disp, _) in sorted(self.mapped.items()):
            kf = self.graph.keyframes[i]
            if not kf.pose.allclose(pose, atol=CHANGE_TOL) or not np.allclose(
                    kf.disparity, disp, atol=CHANGE_TOL, equal_nan=True):
                out.append(i)
        return out

    def deform_pass(self) -> list[int]:
        """Refresh proxies of updated keyframes and move their Gaussians to the new geometry."""
        pending = self.pending_updates()
        updates = []
        for i in pending:
            kf = self.graph.keyframes[i]
            old_pose, _, old_depth = self.mapped[i]
            classify_disparities(self.graph, i)
            new_depth = self._as_depth(self._proxy(i))
            updates.append(DeformUpdate(i, old_pose, kf.pose, old_depth, new_depth))
            self.mapped[i] = (kf.pose, kf.disparity.copy(), new_depth)
        if updates and self.cfg.run.deform:
            self.stats.deformed_gaussians += deform_map(self.gmap, updates, self.K)
            self.stats.deform_phases += 1
            self.stats.events.append(("deform", tuple(pending)))
        return pending

    def _frames(self, ids) -> list[MapFrame]:
        out = []
        for i in ids:
            kf = self.graph.keyframes[i]
            p = self.proxies[i]
            out.append(MapFrame(i, kf.pose, kf.image, self._as_depth(p), p.valid, kf.exposure))
        return out

    def _extent(self) -> float:
        ids = sorted(self.proxies)
        return scene_extent([self.graph.keyframes[i].pose for i in ids],
                            [self._as_depth(self.proxies[i]) for i in ids[-5:]])

    def map_keyframe(self, i: int) -> None:
        mc = self.cfg.mapping
        pending = self.deform_pass()
        kf = self.graph.keyframes[i]
        if i not in self.mapped:
            classify_disparities(self.graph, i)
            self._proxy(i)
        proxy = self.proxies[i]
        depth = self._as_depth(proxy)
        visible = visible_ids(self.gmap, kf.pose, self.K)
        last = self.window.last
        translation = (np.linalg.norm(kf.pose.t - self.graph.keyframes[last].pose.t)
                       if last is not None else np.inf)
        med = float(np.nanmedian(depth)) if np.isfinite(depth).any() else 1.0
        admitted, evicted = update_keyframe_window(self.window, i, visible, translation, med, mc)
        ds = mc.first_downsample if len(self.gmap) == 0 else mc.downsample
        if proxy.valid.any():
            anchor_gaussians(self.gmap, i, kf.pose, kf.image, proxy.depth, self.K, ds, valid=proxy.valid)
        else:
            # nothing trustworthy to seed from (possible without mono completion)
            self.stats.empty_anchors += 1
            log.warning("keyframe %d has no valid proxy depth; no Gaussians anchored", i)
        if admitted:
            self.window.visibility[i] = visible_ids(self.gmap, kf.pose, self.K)
        ids = list(self.window.kfs)
        if self.pending_updates():
            self.stats.stale_mappings += 1
        if set(ids) & set(evicted):
            self.stats.evicted_and_optimized += 1
        self.mapped[i] = (kf.pose, kf.disparity.copy(), depth)
        self.stats.mapping_phases += 1
        self.stats.events.append(("map", i, tuple(ids), tuple(evicted), tuple(pending)))
        optimize_map(self.gmap, self._frames(ids), self.K, mc, state=self.mstate, window=self.window,
                     extent=self._extent())
        refresh_visibility(self.window, self.gmap, {j: self.graph.keyframes[j].pose for j in ids}, self.K)

    # --- driver --------------------------------------------------------------

    def process(self, frame: int) -> bool:
        """Feed one frame; returns whether it became a keyframe."""
        self.frame = frame
        with self.stage("keyframe_gate"):
            if self.n and not keyframe_gate(self.src, self.graph.keyframes[-1], frame, self.cfg.tracking.tau):
                return False
        with self.stage("tracking"):
            self.track(frame)
        warm = self.cfg.tracking.warmup
        with self.stage("mapping"):
            if self.n == warm:
                for i in range(self.n):
                    self.map_keyframe(i)
            elif self.n > warm:
                self.map_keyframe(self.n - 1)
        return True

    def finish(self) -> None:
        self.frame = self.graph.keyframes[-1].frame if self.n else -1
        with self.stage("mapping"):
            for i in range(self.n):
                if i not in self.mapped:
                    self.map_keyframe(i)
        with self.stage("global_ba"):
            if self.cfg.run.loop_closure and self.n >= 2:
                self.global_ba()
        with self.stage("deformation"):
            self.deform_pass()
        with self.stage("final_refine"):
            ids = sorted(self.mapped)
            final_refine(self.gmap, self._frames(ids), self.K, self.cfg.mapping,
                         rng=np.random.default_rng(self.cfg.run.seed), state=self.mstate, extent=self._extent())

    # --- evaluation and export -----------------------------------------------

    def evaluate(self) -> dict:
        kfs = self.graph.keyframes
        est = {kf.frame: kf.pose for kf in kfs}
        m = {"n_keyframes": len(kfs), "n_gaussians": len(self.gmap), "n_frames": len(self.src)}
        gt = {kf.frame: self.src.gt_pose(kf.frame) for kf in kfs}
        scale = 1.0
        gpos = np.array([p.t for p in gt.values()])
        span = float(np.max(np.linalg.norm(gpos[:, None] - gpos[None], axis=-1))) if len(gpos) > 1 else 0.0
        m["trajectory_span_cm"] = span * 100.0
        try:
            scale = align_sim3(np.array([p.t for p in est.values()]), gpos)[0]
            m["ate_rmse_cm"] = ate_rmse(est, gt, align=True)
        except (DegenerateGeometry, EmptyOverlap):
            m["ate_rmse_cm"] = ate_rmse(est, gt, align=False) if len(kfs) else float("nan")
        ps, ss, dl, gd = [], [], [], []
        for kf in kfs:
            out = render(self.gmap, kf.pose, self.K, kf.exposure)
            ps.append(psnr(np.clip(out.color, 0, 1), kf.image))
            ss.append(ssim(np.clip(out.color, 0, 1), kf.image))
            g = self.src.gt_depth(kf.frame)
            ok = (out.alpha > 0.5) & np.isfinite(g)
            gd.append(float(np.mean(g[np.isfinite(g)])))
            try:
                dl.append(depth_l1(out.depth * scale, g, ok))
            except EmptyOverlap:
                dl.append(float("nan"))
        m["psnr"] = float(np.mean(ps))
        m["ssim"] = float(np.mean(ss))
        m["depth_l1_cm"] = float(np.nanmean(dl)) if np.isfinite(dl).any() else float("nan")
        m["mean_scene_depth_cm"] = float(np.mean(gd)) * 100.0
        m["ate_rel_span"] = m["ate_rmse_cm"] / m["trajectory_span_cm"] if span > 0 else float("nan")
        m["depth_l1_rel"] = m["depth_l1_cm"] / m["mean_scene_depth_cm"]
        return {k: (round(v, 10) if isinstance(v, float) else v) for k, v in m.items()}


def export_artifacts(slam: Slam, metrics: dict, outdir) -> dict:
    """Write trajectory, PLY, per-keyframe renders, metrics and the effective config."""
    from PIL import Image

    out = Path(outdir)
    try:
        (out / "renders").mkdir(parents=True, exist_ok=True)
        kfs = slam.graph.keyframes
        files = {"trajectory": out / "trajectory.txt", "ply": out / "map.ply", "metrics_txt": out / "metrics.txt",
                 "metrics_json": out / "metrics.json", "config": out / "config.ini", "renders": []}
        write_tum_trajectory(files["trajectory"], [kf.timestamp for kf in kfs], [kf.pose for kf in kfs])
        write_ply(slam.gmap, files["ply"])
        for kf in kfs:
            r = render(slam.gmap, kf.pose, slam.K, kf.exposure)
            color = (np.clip(r.color, 0, 1) * 255 + 0.5).astype(np.uint8)
            depth = np.clip(np.where(r.alpha > 0.5, r.depth, 0) * DEPTH_PNG_SCALE + 0.5, 0, 65535)
            pc, pd = out / "renders" / f"color_{kf.id:04d}.png", out / "renders" / f"depth_{kf.id:04d}.png"
            Image.fromarray(color).save(pc)
            Image.fromarray(depth.astype(np.uint16)).save(pd)
            files["renders"] += [pc, pd]
        with open(files["metrics_txt"], "w") as fh:
            fh.writelines(f"{k}: {v}\n" for k, v in metrics.items())
        with open(files["metrics_json"], "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
        slam.cfg.save(files["config"])
    except OSError as exc:
        raise IoError(f"cannot write artifacts to {out}: {exc}") from exc
    return files


def run_pipeline(cfg: RunConfig, source=None) -> RunReport:
    """Run SLAM over every frame of the configured input and export the artifacts."""
    t0 = time.perf_counter()
    src = source if source is not None else open_source(cfg)
    if len(src) == 0:
        raise InvalidInput("empty frame stream")
    slam = Slam(src, cfg)
    for f in range(len(src)):
        if slam.process(f) and cfg.run.verbosity > 1:
            log.info("frame %d -> keyframe %d (%d gaussians)", f, slam.n - 1, len(slam.gmap))
    slam.finish()
    slam.frame = -1
    with slam.stage("evaluation"):
        metrics = slam.evaluate()
    files = export_artifacts(slam, metrics, cfg.run.output)
    report = RunReport(metrics, files, slam.stats, time.perf_counter() - t0)
    report.slam = slam
    return report
