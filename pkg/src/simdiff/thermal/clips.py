"""Synthetic thermal clips for the flow-guided experiment.

A clip is ten frames of a laser crossing the plate while spatter flies off.
The first two frames are context and the last five the prediction target,
stacked as channels. The cheap condition is the melt-pool field at the target
times from calibrated heat parameters; the expensive one is the dense flow
between consecutive ground-truth target frames, paired with spatter masks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import RejectedInputError
from .calibrate import CalibrationConfig, calibrate
from .flow import estimate_flows
from .heat import HeatParams, LaserPath, ThermalGrid, meltpool_field
from .spatter import SpawnConfig, ThermalScene, render_frame, spatter_mask, spatter_step

TRUE_PARAMS = HeatParams(rho=0.5, kappa_x=1.5, kappa_y=1.0, amplitude=4.0)
CALIBRATION_START = HeatParams(rho=0.3, kappa_x=1.0, kappa_y=1.5, amplitude=3.0)


@dataclass(frozen=True)
class ClipSpec:
    n: int = 60
    seed: int = 0
    size: int = 32
    frames: int = 10
    context_frames: tuple[int, ...] = (0, 1)
    target_frames: tuple[int, ...] = (5, 6, 7, 8, 9)
    frame_interval: float = 1.0
    warmup_steps: int = 2
    speed: tuple[float, float] = (1.0, 1.8)
    test_fraction: float = 0.2
    mask_threshold: float = 0.15
    flow_lambda: float = 0.1
    flow_iterations: int = 100
    calibration_clips: int = 4
    true_params: HeatParams = TRUE_PARAMS
    spawn: SpawnConfig = field(default_factory=SpawnConfig)

    def __post_init__(self):
        if self.n < 1:
            raise RejectedInputError("need at least one clip")
        used = self.context_frames + self.target_frames
        if min(used) < 0 or max(used) >= self.frames:
            raise RejectedInputError("context/target frame indices fall outside the clip")
        if len(self.target_frames) < 2:
            raise RejectedInputError("flow conditioning needs at least two target frames")

    @property
    def grid(self) -> ThermalGrid:
        return ThermalGrid(self.size, self.size, 1.0)

    def frame_times(self) -> np.ndarray:
        first = (self.warmup_steps + 1) * self.frame_interval
        return first + self.frame_interval * np.arange(self.frames)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_params"] = asdict(self.true_params)
        return d


def random_path(spec: ClipSpec, rng: np.random.Generator) -> LaserPath:
    """Straight constant-power pass through the middle of the plate."""
    end_time = float(spec.frame_times()[-1])
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(*spec.speed)
    travel = speed * end_time
    mid = spec.size / 2 - 0.5 + rng.uniform(-2.0, 2.0, 2)
    direction = np.array([np.cos(angle), np.sin(angle)])
    start = mid - 0.5 * travel * direction
    end = mid + 0.5 * travel * direction
    return LaserPath((0.0, end_time), (float(start[0]), float(end[0])), (float(start[1]), float(end[1])),
                     (1.0, 1.0))


def render_clip(spec: ClipSpec, seed: int) -> tuple[LaserPath, np.ndarray]:
    """Laser path and the ``(frames, H, W)`` ground-truth video for one clip seed."""
    rng = np.random.default_rng([seed, 0])
    path = random_path(spec, rng)
    scene = ThermalScene(spec.grid, path, spec.true_params, frame_interval=spec.frame_interval,
                         time=spec.frame_interval, seed=seed, spawn=spec.spawn)
    for _ in range(spec.warmup_steps):
        scene = spatter_step(scene)
    frames = [render_frame(scene)]
    for _ in range(spec.frames - 1):
        scene = spatter_step(scene)
        frames.append(render_frame(scene))
    return path, np.stack(frames)


def clip_seeds(spec: ClipSpec) -> list[int]:
    return [int(np.random.default_rng([spec.seed, i]).integers(2 ** 31)) for i in range(spec.n)]


def split_clips(n: int, seed: int, test_fraction: float) -> dict[int, str]:
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    order = np.random.default_rng([seed, 9002]).permutation(n)
    test = set(order[:n_test].tolist())
    return {i: ("test" if i in test else "train") for i in range(n)}


def calibrate_from_clips(spec: ClipSpec, videos, paths, cfg: CalibrationConfig | None = None):
    """Fit heat parameters to every frame of the given clips, spatter included."""
    cfg = cfg or CalibrationConfig(dq=spec.frame_interval / 20)
    times = spec.frame_times()
    params = []
    losses = []
    # one fit per clip since each has its own path; average in log space
    for video, path in zip(videos, paths):
        obs = list(zip(times, video))
        res = calibrate(obs, path, CALIBRATION_START, spec.grid, cfg)
        params.append(np.log(res.params.as_array()))
        losses.append(res.loss)
    return HeatParams.from_array(np.exp(np.mean(params, axis=0))), losses


def clip_record(spec: ClipSpec, path: LaserPath, video: np.ndarray, phi_hat: HeatParams) -> dict:
    """Context, stacked target, melt-pool condition, flows and spatter masks for one clip."""
    times = spec.frame_times()
    target = video[list(spec.target_frames)]
    c1 = np.stack([meltpool_field(path, times[k], phi_hat, spec.grid, dq=spec.frame_interval / 20)
                   for k in spec.target_frames])
    flows = estimate_flows(target, spec.flow_lambda, spec.flow_iterations)
    masks = np.stack([spatter_mask(c1[k], spec.mask_threshold) for k in range(1, len(c1))])
    return {
        "context": video[list(spec.context_frames)],
        "target": target,
        "c1": c1,
        "c2": flows,
        "masks": masks.astype(np.float64),
    }


def gen_thermal_dataset(spec: ClipSpec):
    """Calibrate on the first training clips, then yield ``(id, split, meta, record)`` per clip."""
    seeds = clip_seeds(spec)
    splits = split_clips(spec.n, spec.seed, spec.test_fraction)
    rendered = [render_clip(spec, s) for s in seeds]
    train_idx = [i for i in range(spec.n) if splits[i] == "train"] or list(range(spec.n))
    cal = train_idx[:spec.calibration_clips]
    phi_hat, _ = calibrate_from_clips(spec, [rendered[i][1] for i in cal], [rendered[i][0] for i in cal])
    times = spec.frame_times().tolist()
    for i, (seed, (path, video)) in enumerate(zip(seeds, rendered)):
        meta = {"seed": seed, "frame_times": times, "laser": path.to_dict(),
                "true_params": asdict(spec.true_params), "calibrated_params": asdict(phi_hat)}
        yield f"thermal-{i:05d}", splits[i], meta, clip_record(spec, path, video, phi_hat)


__all__ = ["CALIBRATION_START", "ClipSpec", "TRUE_PARAMS", "calibrate_from_clips", "clip_record", "clip_seeds",
           "gen_thermal_dataset", "random_path", "render_clip", "split_clips"]
