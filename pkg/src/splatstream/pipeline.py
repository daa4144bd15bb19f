"""Frontend/backend orchestration over a shared keyframe buffer.

The frontend ingests posed frames, selects keyframes, estimates depth by
plane-sweep stereo against neighboring keyframes, and refines it by
multi-view fusion and filtering. Refined keyframes flow through a bounded
queue to the backend, which densifies the splat map from unexplored regions
and runs the per-keyframe optimization schedule. The two sides run as
independent threads; the frontend never blocks on optimization (a saturated
queue drops the oldest unintegrated keyframe unless configured to block).
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .fusion import (FusionConfig, confidence_filter, fuse,
                     geometric_consistency_filter)
from .geometry import (CameraIntrinsics, ConfidenceMap, DepthMap, ImageBuffer,
                       Pose, project_points)
from .mapper import (MapperConfig, PointCloud, extract_points, init_splats,
                     schedule_iterations, unexplored_mask, voxel_downsample)
from .mvs import (CascadeConfig, InsufficientViewsError, NoPriorError, View,
                  cascade_estimate, select_sources)
from .splats import (DensityConfig, LearningRates, LossWeights, SplatModel,
                     adaptive_density_control, backward, loss, psnr, render,
                     ssim, step)

# keyframe lifecycle
PENDING = 0
DEPTH_ESTIMATED = 1
REFINED = 2
INTEGRATED = 3
STATE_NAMES = {PENDING: "pending", DEPTH_ESTIMATED: "depth_estimated",
               REFINED: "refined", INTEGRATED: "integrated"}


@dataclass
class Keyframe:
    index: int
    image: ImageBuffer
    pose: Pose
    intrinsics: CameraIntrinsics
    prior: DepthMap | None = None
    raw_depth: DepthMap | None = None
    raw_conf: ConfidenceMap | None = None
    refined_depth: DepthMap | None = None
    refined_conf: ConfidenceMap | None = None
    state: int = PENDING
    failed: bool = False
    # per-keyframe report entries (CPU milliseconds)
    t_mvs_ms: float = 0.0
    t_fuse_ms: float = 0.0
    t_integrate_ms: float = 0.0
    splats_added: int = 0

    def to_state(self, new_state: int) -> None:
        if new_state != self.state + 1:
            raise ValueError(
                f"keyframe {self.index}: illegal transition "
                f"{STATE_NAMES[self.state]} -> {STATE_NAMES.get(new_state)}")
        self.state = new_state


class KeyframeBuffer:
    """Ordered keyframe store shared by the frontend and backend."""

    def __init__(self):
        self._frames: dict[int, Keyframe] = {}
        self._lock = threading.Lock()

    def add(self, kf: Keyframe) -> None:
        with self._lock:
            if self._frames and kf.index <= max(self._frames):
                raise ValueError("keyframe indices must strictly increase")
            self._frames[kf.index] = kf

    def get(self, index: int) -> Keyframe:
        with self._lock:
            return self._frames[index]

    def indices(self) -> list[int]:
        with self._lock:
            return sorted(self._frames)

    def keyframes(self) -> list[Keyframe]:
        with self._lock:
            return [self._frames[i] for i in sorted(self._frames)]

    def __len__(self):
        with self._lock:
            return len(self._frames)


@dataclass
class PipelineConfig:
    n_nbr: int = 4
    # keyframe selection thresholds (any one trips acceptance)
    min_translation: float = 0.05    # meters
    min_rotation_deg: float = 3.0
    min_flow_px: float = 8.0
    flow_stride: int = 8             # depth subsampling for the flow check
    # frontend -> backend queue
    queue_capacity: int = 4
    queue_policy: str = "drop_oldest"  # or "block"
    final_refine_iters: int = 500
    density_interval: int = 100      # optimizer steps between density passes
    prior_rel_noise: float = 0.2     # simulated coarse-prior error level
    # ablation switches
    use_mvs: bool = True
    use_filtering: bool = True
    use_mask: bool = True
    seed: int = 0
    mvs: CascadeConfig = field(default_factory=CascadeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    lrs: LearningRates = field(default_factory=LearningRates)
    density: DensityConfig = field(default_factory=DensityConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.n_nbr < 1:
            raise ValueError("n_nbr must be >= 1")
        if self.queue_policy not in ("drop_oldest", "block"):
            raise ValueError("queue_policy must be drop_oldest or block")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")


class RefinedQueue:
    """Bounded handoff of refined keyframes to the backend.

    With the drop_oldest policy a put into a full queue evicts the oldest
    queued keyframe (counted in .drops) so the producer never waits.
    """

    def __init__(self, capacity: int, policy: str = "drop_oldest"):
        self._items: deque[Keyframe] = deque()
        self._capacity = capacity
        self._policy = policy
        self._mutex = threading.Lock()
        self._nonempty = threading.Condition(self._mutex)
        self._nonfull = threading.Condition(self._mutex)
        self._closed = False
        self.drops = 0
        self.dropped: list[int] = []

    def put(self, kf: Keyframe) -> None:
        with self._mutex:
            if self._policy == "block":
                while len(self._items) >= self._capacity and not self._closed:
                    self._nonfull.wait()
            elif len(self._items) >= self._capacity:
                victim = self._items.popleft()
                self.drops += 1
                self.dropped.append(victim.index)
            self._items.append(kf)
            self._nonempty.notify()

    def get(self) -> Keyframe | None:
        """Next keyframe, or None once closed and drained."""
        with self._mutex:
            while not self._items and not self._closed:
                self._nonempty.wait()
            if not self._items:
                return None
            kf = self._items.popleft()
            self._nonfull.notify()
            return kf

    def close(self) -> None:
        with self._mutex:
            self._closed = True
            self._nonempty.notify_all()
            self._nonfull.notify_all()


# ---------------------------------------------------------------------------
# frontend


def _rotation_deg(a: Pose, b: Pose) -> float:
    dot = abs(float(np.dot(a.q, b.q)))
    return float(np.degrees(2.0 * np.arccos(min(dot, 1.0))))


def _mean_flow_px(last: Keyframe, candidate_pose: Pose,
                  K: CameraIntrinsics, stride: int) -> float:
    depth = last.prior if last.prior is not None else last.raw_depth
    if depth is None:
        return 0.0
    vals = depth.values[::stride, ::stride]
    valid = vals > 0
    if not valid.any():
        return 0.0
    h, w = depth.shape
    v, u = np.mgrid[0:h:stride, 0:w:stride].astype(np.float64)
    x = (u - K.cx) / K.fx * vals
    y = (v - K.cy) / K.fy * vals
    cam = np.stack([x, y, vals], axis=2)
    world = last.pose.to_world(cam[valid])
    uv, _, ok = project_points(candidate_pose.to_camera(world), K)
    if not ok.any():
        return float(max(K.width, K.height))  # everything left the frame
    src = np.stack([u[valid], v[valid]], axis=1)
    return float(np.linalg.norm(uv[ok] - src[ok], axis=1).mean())


def select_keyframe(candidate, last: Keyframe | None,
                    K: CameraIntrinsics, cfg: PipelineConfig) -> bool:
    """Accept a posed frame as a keyframe if it moved far enough.

    Acceptance when translation, rotation, or mean reprojected depth flow
    against the last keyframe exceeds its threshold; the first frame is
    always accepted.
    """
    if last is None:
        return True
    if np.linalg.norm(candidate.pose.t - last.pose.t) >= cfg.min_translation:
        return True
    if _rotation_deg(candidate.pose, last.pose) >= cfg.min_rotation_deg:
        return True
    return _mean_flow_px(last, candidate.pose, K,
                         cfg.flow_stride) >= cfg.min_flow_px


def _estimate_depth(kf: Keyframe, sources: list[Keyframe],
                    cfg: PipelineConfig) -> None:
    t0 = time.thread_time()
    if cfg.use_mvs:
        if kf.prior is None:
            raise NoPriorError(f"keyframe {kf.index} has no depth prior")
        views = [View(s.image, s.pose, s.index) for s in sources]
        ref = View(kf.image, kf.pose, kf.index)
        kf.raw_depth, kf.raw_conf = cascade_estimate(
            ref, views, kf.prior, kf.intrinsics, cfg.mvs)
    else:
        if kf.prior is None:
            raise NoPriorError(f"keyframe {kf.index} has no depth prior")
        kf.raw_depth = kf.prior.copy()
        kf.raw_conf = ConfidenceMap(np.ones(kf.prior.shape))
    kf.t_mvs_ms = (time.thread_time() - t0) * 1e3
    kf.to_state(DEPTH_ESTIMATED)


def _refine_depth(kf: Keyframe, sources: list[Keyframe],
                  cfg: PipelineConfig) -> None:
    t0 = time.thread_time()
    if cfg.use_filtering:
        neighbors = [(s.raw_depth, s.raw_conf, s.pose) for s in sources]
        fused, conf = fuse(kf.raw_depth, kf.raw_conf, kf.pose, neighbors,
                           kf.intrinsics, cfg.fusion)
        filtered = confidence_filter(fused, conf, cfg.fusion.conf_threshold)
        filtered = geometric_consistency_filter(
            filtered, kf.pose, [(s.raw_depth, s.pose) for s in sources],
            kf.intrinsics, cfg.fusion)
        kf.refined_depth, kf.refined_conf = filtered, conf
    else:
        kf.refined_depth = kf.raw_depth.copy()
        kf.refined_conf = kf.raw_conf.copy()
    kf.t_fuse_ms = (time.thread_time() - t0) * 1e3
    kf.to_state(REFINED)


def _live(frames: list[Keyframe]) -> list[Keyframe]:
    return [f for f in frames if not f.failed]


def _advance(buffer: KeyframeBuffer, cfg: PipelineConfig,
             at_stream_end: bool) -> list[Keyframe]:
    """Drive every keyframe as far through the state machine as possible."""
    refined = []
    frames = _live(buffer.keyframes())
    index_set = [f.index for f in frames]
    by_index = {f.index: f for f in frames}

    for kf in frames:
        if kf.state != PENDING:
            continue
        trailing = sum(1 for i in index_set if i > kf.index)
        if trailing < cfg.n_nbr and not at_stream_end:
            continue
        sources = [by_index[i]
                   for i in select_sources(kf.index, index_set, cfg.n_nbr)]
        try:
            if cfg.use_mvs and not sources:
                raise InsufficientViewsError(
                    f"keyframe {kf.index} has no neighbors")
            _estimate_depth(kf, sources, cfg)
        except (NoPriorError, InsufficientViewsError, ValueError):
            kf.failed = True

    frames = _live(buffer.keyframes())
    index_set = [f.index for f in frames]
    by_index = {f.index: f for f in frames}
    for kf in frames:
        if kf.state != DEPTH_ESTIMATED:
            continue
        sources = [by_index[i]
                   for i in select_sources(kf.index, index_set, cfg.n_nbr)]
        ready = [s for s in sources if s.state >= DEPTH_ESTIMATED]
        trailing = sum(1 for s in sources if s.index > kf.index)
        if not at_stream_end and (len(ready) < len(sources)
                                  or trailing < cfg.n_nbr):
            continue
        if at_stream_end and len(ready) < cfg.fusion.min_consistent_views:
            kf.failed = True  # not enough views left to ever refine
            continue
        try:
            _refine_depth(kf, ready, cfg)
            refined.append(kf)
        except ValueError:
            kf.failed = True
    return refined


def advance_frontend(buffer: KeyframeBuffer, new_keyframe: Keyframe,
                     cfg: PipelineConfig) -> list[Keyframe]:
    """Insert a keyframe and return every keyframe newly refined by it.

    A keyframe's depth is estimated once its n_nbr trailing neighbors
    exist; it is refined once all its 2*n_nbr fusion neighbors have
    estimated depth. Failures mark the keyframe and never block the stream.
    """
    buffer.add(new_keyframe)
    return _advance(buffer, cfg, at_stream_end=False)


def finalize_frontend(buffer: KeyframeBuffer,
                      cfg: PipelineConfig) -> list[Keyframe]:
    """Refine trailing keyframes with the neighbors that exist."""
    return _advance(buffer, cfg, at_stream_end=True)


# ---------------------------------------------------------------------------
# backend


class Backend:
    """Single-consumer owner of the SplatModel."""

    def __init__(self, buffer: KeyframeBuffer, cfg: PipelineConfig):
        self.buffer = buffer
        self.cfg = cfg
        self.model = SplatModel.empty()
        self.integrated: list[int] = []
        self.iteration_scale = 1.0  # test hook: inflate the schedule length
        # spatial hash of voxels already seeded with a splat: keyframes
        # overlap heavily, and re-seeding the same surface every time buries
        # it under redundant semi-transparent layers
        self._occupied: set[tuple[int, int, int]] = set()

    def _optimize(self, schedule) -> None:
        cfg = self.cfg
        for it, target_idx in enumerate(schedule):
            target = self.buffer.get(int(target_idx))
            out = render(self.model, target.pose, target.intrinsics,
                         update_stats=True)
            _, pixel_grad = loss(out.color.pixels, target.image.pixels,
                                 cfg.loss_weights)
            grads = backward(self.model, target.pose, target.intrinsics,
                             pixel_grad)
            self.model.pos_grad_sum += grads.pos_grad_px
            step(self.model, grads, cfg.lrs)
            if cfg.density_interval and (it + 1) % cfg.density_interval == 0:
                adaptive_density_control(self.model, cfg.density)

    def _novel_points(self, cloud: PointCloud,
                      voxel_size: float) -> PointCloud:
        """Points whose voxel has not been seeded before (marks them used)."""
        if len(cloud) == 0:
            return cloud
        keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
        fresh = np.fromiter(
            (tuple(k) not in self._occupied for k in keys),
            dtype=bool, count=len(keys))
        self._occupied.update(map(tuple, keys))
        return PointCloud(cloud.positions[fresh], cloud.colors[fresh])

    def integrate(self, kf: Keyframe) -> None:
        """Densify from the keyframe's unexplored regions, then optimize."""
        cfg = self.cfg
        t0 = time.thread_time()
        before = len(self.model)

        if cfg.use_mask:
            rendered = render(self.model, kf.pose, kf.intrinsics)
            mask = unexplored_mask(kf.image, rendered, cfg.mapper)
        else:
            mask = np.ones(kf.image.shape[:2], dtype=bool)
        cloud = extract_points(kf.refined_depth, kf.image, mask, kf.pose,
                               kf.intrinsics)
        cloud = voxel_downsample(cloud, cfg.mapper.voxel_size)
        if cfg.use_mask:
            cloud = self._novel_points(cloud, cfg.mapper.voxel_size)
        self.model.append_splats(init_splats(cloud, cfg.mapper.voxel_size))
        kf.to_state(INTEGRATED)
        self.integrated.append(kf.index)

        schedule = schedule_iterations(kf.index, self.integrated, cfg.mapper)
        if self.iteration_scale != 1.0:
            schedule = np.tile(schedule,
                               int(np.ceil(self.iteration_scale)))[
                :int(len(schedule) * self.iteration_scale)]
        self._optimize(schedule)

        kf.splats_added = len(self.model) - before
        kf.t_integrate_ms = (time.thread_time() - t0) * 1e3

    def final_refinement(self) -> None:
        cfg = self.cfg
        if not self.integrated or cfg.final_refine_iters <= 0:
            return
        rng = np.random.default_rng((cfg.seed, 2 ** 31))
        schedule = rng.choice(np.asarray(self.integrated, dtype=np.int64),
                              size=cfg.final_refine_iters, replace=True)
        self._optimize(schedule)


# ---------------------------------------------------------------------------
# end-to-end run


def evaluate(model: SplatModel, views, K: CameraIntrinsics):
    """Render each (image, pose) view; returns (per-view list, means).

    Each per-view entry is (PSNR dB capped at 100, SSIM).
    """
    per_view = []
    for image, pose in views:
        out = render(model, pose, K)
        per_view.append((psnr(out.color.pixels, image.pixels),
                         ssim(out.color.pixels, image.pixels)))
    if not per_view:
        return [], (0.0, 0.0)
    means = (float(np.mean([p for p, _ in per_view])),
             float(np.mean([s for _, s in per_view])))
    return per_view, means


def _make_prior(depth: DepthMap | None, index: int,
                cfg: PipelineConfig) -> DepthMap | None:
    """Simulated coarse tracking prior: relative noise on the dataset depth."""
    if depth is None:
        return None
    if cfg.prior_rel_noise <= 0:
        return depth.copy()
    rng = np.random.default_rng((cfg.seed, index))
    noise = rng.uniform(-cfg.prior_rel_noise, cfg.prior_rel_noise,
                        depth.shape)
    vals = depth.values * (1.0 + noise)
    vals[~depth.valid_mask()] = 0.0
    return DepthMap(vals)


def run(dataset, config: PipelineConfig, K: CameraIntrinsics | None = None,
        iteration_scale: float = 1.0):
    """Full online reconstruction over a frame sequence.

    `dataset` is a sequence of SequenceFrame-like objects (image, pose,
    optional depth). `iteration_scale` multiplies the backend's per-keyframe
    schedule length (load-testing hook). Returns (report dict, SplatModel,
    KeyframeBuffer).
    """
    frames = list(dataset)
    report = {"keyframes": [], "fps": 0.0, "frontend_fps": 0.0,
              "mean_psnr": 0.0, "mean_ssim": 0.0, "drops": 0,
              "failures": 0, "splat_count": 0, "wall_time_s": 0.0}
    buffer = KeyframeBuffer()
    backend = Backend(buffer, config)
    backend.iteration_scale = iteration_scale
    if not frames:
        return report, backend.model, buffer

    if K is None:
        h, w = frames[0].load_image().shape[:2]
        K = CameraIntrinsics(fx=float(w), fy=float(w),
                             cx=w / 2.0, cy=h / 2.0, width=w, height=h)

    queue = RefinedQueue(config.queue_capacity, config.queue_policy)
    errors: list[str] = []
    frontend_cpu = [0.0]

    def frontend():
        t0 = time.thread_time()
        last = None
        next_index = 0
        try:
            for frame in frames:
                frame.load_image()
                if not select_keyframe(frame, last, K, config):
                    continue
                kf = Keyframe(index=next_index, image=frame.image,
                              pose=frame.pose, intrinsics=K,
                              prior=_make_prior(frame.depth, next_index,
                                                config))
                next_index += 1
                for done in advance_frontend(buffer, kf, config):
                    queue.put(done)
                last = kf
            for done in finalize_frontend(buffer, config):
                queue.put(done)
        except Exception as exc:  # dataset faults abort the stream
            errors.append(f"frontend: {exc!r}")
        finally:
            frontend_cpu[0] = time.thread_time() - t0
            queue.close()

    wall0 = time.time()
    producer = threading.Thread(target=frontend, name="frontend")
    producer.start()
    while True:
        kf = queue.get()
        if kf is None:
            break
        try:
            backend.integrate(kf)
        except Exception as exc:
            errors.append(f"backend keyframe {kf.index}: {exc!r}")
            kf.failed = True
    producer.join()
    backend.final_refinement()
    wall = time.time() - wall0

    model = backend.model
    keyframes = buffer.keyframes()
    report["keyframes"] = [
        {"index": kf.index, "t_mvs_ms": kf.t_mvs_ms,
         "t_fuse_ms": kf.t_fuse_ms, "t_integrate_ms": kf.t_integrate_ms,
         "splats_added": kf.splats_added} for kf in keyframes]
    report["drops"] = queue.drops
    report["dropped_indices"] = list(queue.dropped)
    report["failures"] = sum(kf.failed for kf in keyframes)
    report["errors"] = errors
    report["splat_count"] = len(model)
    report["wall_time_s"] = wall
    report["fps"] = len(keyframes) / wall if wall > 0 else 0.0
    report["frontend_fps"] = (len(keyframes) / frontend_cpu[0]
                              if frontend_cpu[0] > 0 else 0.0)

    train_views = [(buffer.get(i).image, buffer.get(i).pose)
                   for i in backend.integrated]
    _, (mean_psnr, mean_ssim) = evaluate(model, train_views, K)
    report["mean_psnr"] = mean_psnr
    report["mean_ssim"] = mean_ssim
    return report, model, buffer
