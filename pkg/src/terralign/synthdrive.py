"""Synthetic off-road driving generator.

Produces causally consistent (observation, action, locomotion) sessions on a
procedural terrain patchwork: the terrain class visible ahead of the vehicle
determines both the image texture and — through a slip factor and a
roughness-scaled vibration floor — the locomotion response to a given
throttle/steering profile.  That mutual dependence is precisely the signal
the contrastive alignment is supposed to exploit.

Dynamics skeleton is a kinematic bicycle: per simulation step

    v     <- v + (a_max * throttle * (1 - 0.5 * r) - drag * v) * dt
    dtheta = (v / wheelbase) * tan(steer * max_steer)

with yaw-only quaternions and zero-mean vertical acceleration noise of
standard deviation sigma0 + k_r * r * v.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from terralign import trajectory as tj
from terralign.errors import ConfigError, UsageError

_TERRAIN_STREAM = 0x7E44
_TRAJ_STREAM = 0x7A13
_SPLIT_STREAM = 0x59C7


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 30.0
    world_size: float = 600.0
    cell_size: float = 2.0
    block_cells: int = 8
    classes: int = 4
    a_max: float = 3.0
    drag: float = 0.5
    wheelbase: float = 2.0
    max_steer: float = 0.5
    noise_floor: float = 0.05
    roughness_gain: float = 0.6
    wheel_diameter: float = 0.6
    image_h: int = 64
    image_w: int = 64
    sim_hz: float = 100.0
    loco_hz: float = 100.0
    act_hz: float = 50.0
    cam_hz: float = 10.0
    hi_hz: float = 400.0
    lo_hz: float = 40.0
    policy_dwell_s: float = 1.5
    lookahead_m: float = 4.0
    throttle_range: tuple = (0.15, 1.0)
    steering_range: tuple = (-0.8, 0.8)

    def __post_init__(self):
        for name in ("a_max", "drag", "wheelbase", "max_steer", "wheel_diameter", "duration_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.sim_hz % self.loco_hz or self.sim_hz % self.act_hz or self.sim_hz % self.cam_hz:
            raise ConfigError("sim_hz must be an integer multiple of every sensor rate")


@dataclass
class TerrainField:
    """Roughness grid over the world square plus per-cell terrain class."""

    roughness: np.ndarray
    class_map: np.ndarray
    cell_size: float
    world_size: float
    n_classes: int

    def _cell(self, x, y):
        n = self.roughness.shape[0]
        i = min(max(int(y / self.cell_size), 0), n - 1)
        j = min(max(int(x / self.cell_size), 0), n - 1)
        return i, j

    def roughness_at(self, x, y):
        i, j = self._cell(x, y)
        return float(self.roughness[i, j])

    def class_at(self, x, y):
        i, j = self._cell(x, y)
        return int(self.class_map[i, j])

    def contains(self, x, y):
        return 0.0 <= x < self.world_size and 0.0 <= y < self.world_size


def class_bands(classes):
    """Disjoint, ordered roughness bands, one per terrain class."""
    return [(j / classes, (j + 0.6) / classes) for j in range(classes)]


def generate_terrain(seed, classes, world_size=600.0, cell_size=2.0, block_cells=8, bands=None):
    """Deterministic patchwork of terrain-class blocks with banded roughness."""
    if classes < 1:
        raise ConfigError("need at least one terrain class")
    if bands is None:
        bands = class_bands(classes)
    if len(bands) != classes:
        raise ConfigError("one roughness band per class required")
    rng = np.random.default_rng([_TERRAIN_STREAM, seed])
    n_cells = int(math.ceil(world_size / cell_size))
    n_blocks = -(-n_cells // block_cells)
    block_classes = rng.integers(0, classes, size=(n_blocks, n_blocks))
    class_map = np.repeat(np.repeat(block_classes, block_cells, 0), block_cells, 1)
    class_map = class_map[:n_cells, :n_cells]
    lo = np.array([bands[k][0] for k in range(classes)])[class_map]
    hi = np.array([bands[k][1] for k in range(classes)])[class_map]
    roughness = lo + (hi - lo) * rng.random(class_map.shape)
    return TerrainField(
        roughness=roughness.astype(np.float64),
        class_map=class_map.astype(np.int64),
        cell_size=cell_size,
        world_size=world_size,
        n_classes=classes,
    )


def class_texture_stats(class_idx, n_classes):
    """Per-class texture parameters: (mean gray, grain amplitude, grain size)."""
    u = class_idx / max(n_classes - 1, 1)
    return 0.25 + 0.5 * u, 0.05 + 0.15 * u, 1 + class_idx % 4


def render_patch(class_idx, n_classes, h, w, rng):
    """Procedural texture patch for one terrain class."""
    gray, amp, grain = class_texture_stats(class_idx, n_classes)
    noise = rng.standard_normal((h, w))
    if grain > 1:
        noise = uniform_filter(noise, size=grain, mode="wrap")
        noise = noise / max(noise.std(), 1e-8)
    return np.clip(gray + amp * noise, 0.0, 1.0).astype(np.float32)


def _piecewise_policy(rng, n_steps, dwell_steps, throttle_range, steering_range):
    """Seed-deterministic piecewise-constant (throttle, steering) profile."""
    n_seg = -(-n_steps // dwell_steps)
    throttle = rng.uniform(throttle_range[0], throttle_range[1], size=n_seg)
    steering = rng.uniform(steering_range[0], steering_range[1], size=n_seg)
    segs = np.repeat(np.stack([throttle, steering], axis=1), dwell_steps, axis=0)
    return segs[:n_steps]


def generate_trajectory(terrain, cfg, seed, source_id=None):
    """Simulate one driving session and emit its three sensor streams.

    The vehicle starts at the world center with a random heading; leaving the
    world truncates the session (still a valid, shorter trajectory).
    """
    rng_policy = np.random.default_rng([_TRAJ_STREAM, seed, 0])
    rng_noise = np.random.default_rng([_TRAJ_STREAM, seed, 1])
    rng_image = np.random.default_rng([_TRAJ_STREAM, seed, 2])
    if source_id is None:
        source_id = f"traj{seed:05d}"

    dt = 1.0 / cfg.sim_hz
    # run one camera period past the nominal duration so every stream covers
    # [0, duration_s] and synchronization keeps the full nominal length
    n_steps = int(round((cfg.duration_s + 1.0 / cfg.cam_hz) * cfg.sim_hz))
    actions = _piecewise_policy(
        rng_policy, n_steps, int(round(cfg.policy_dwell_s * cfg.sim_hz)),
        cfg.throttle_range, cfg.steering_range,
    )
    normals = rng_noise.standard_normal((n_steps, 9))  # vert, 4 shocks, 2 lat/lon, 2 angvel

    x = y = cfg.world_size / 2.0
    theta = rng_policy.uniform(0.0, 2.0 * math.pi)
    v = 0.0
    shock = np.zeros(4)
    alpha = 0.1  # shock low-pass coefficient

    loco = np.zeros((n_steps, 27), dtype=np.float64)
    kept = 0
    for t in range(n_steps):
        throttle, steering = actions[t]
        r = terrain.roughness_at(x, y)
        a_lon = cfg.a_max * throttle * (1.0 - 0.5 * r) - cfg.drag * v
        v = v + a_lon * dt
        omega = (v / cfg.wheelbase) * math.tan(steering * cfg.max_steer)
        a_lat = v * omega
        theta += omega * dt
        x += v * math.cos(theta) * dt
        y += v * math.sin(theta) * dt
        if not terrain.contains(x, y):
            break  # truncated session; frames recorded so far stay valid

        sigma = cfg.noise_floor + cfg.roughness_gain * r * v
        vert = sigma * normals[t, 0]
        shock = (1 - alpha) * shock + alpha * np.abs(sigma * normals[t, 1:5])
        rpm = 60.0 * v / (math.pi * cfg.wheel_diameter)

        row = loco[t]
        row[0:3] = (x, y, 0.0)
        row[3:7] = (0.0, 0.0, math.sin(theta / 2.0), math.cos(theta / 2.0))
        row[7:10] = (0.1 * sigma * normals[t, 7], 0.1 * sigma * normals[t, 8], omega)
        row[10:13] = (
            a_lon + 0.3 * sigma * normals[t, 5],
            a_lat + 0.3 * sigma * normals[t, 6],
            vert,
        )
        row[13:17] = shock
        row[17:21] = rpm
        kept = t + 1

    if kept == 0:
        raise UsageError("vehicle started outside the world")
    loco = loco[:kept]
    actions = actions[:kept]
    times = np.arange(kept, dtype=np.float64) * dt

    loco_step = int(round(cfg.sim_hz / cfg.loco_hz))
    act_step = int(round(cfg.sim_hz / cfg.act_hz))
    cam_step = int(round(cfg.sim_hz / cfg.cam_hz))

    cam_idx = np.arange(0, kept, cam_step)
    images = np.zeros((len(cam_idx), cfg.image_h * cfg.image_w), dtype=np.float32)
    for k, t in enumerate(cam_idx):
        px, py, pth = loco[t, 0], loco[t, 1], 2.0 * math.atan2(loco[t, 5], loco[t, 6])
        lx = px + math.cos(pth) * cfg.lookahead_m
        ly = py + math.sin(pth) * cfg.lookahead_m
        cls = terrain.class_at(lx, ly) if terrain.contains(lx, ly) else terrain.class_at(px, py)
        images[k] = render_patch(cls, terrain.n_classes, cfg.image_h, cfg.image_w, rng_image).ravel()

    return tj.Trajectory(
        obs=tj.ModalityStream("obs", cfg.cam_hz, times[cam_idx], images),
        loco=tj.ModalityStream("loco", cfg.loco_hz, times[::loco_step], loco[::loco_step].astype(np.float32)),
        action=tj.ModalityStream("action", cfg.act_hz, times[::act_step], actions[::act_step].astype(np.float32)),
        image_shape=(cfg.image_h, cfg.image_w),
        source_id=source_id,
    )


def generate_dataset(cfg, n_traj, split_ratios=(0.75, 0.25), out_dir=None,
                     window_s=6.0, stride_s=2.0, log=None):
    """Generate, synchronize, and window n_traj sessions into train/test datasets.

    Splits are disjoint by trajectory.  Returns {"train": TripletDataset,
    "test": TripletDataset}; when out_dir is given both splits plus the
    generator config are saved there.
    """
    if n_traj < 2:
        raise UsageError("need at least 2 trajectories to form disjoint splits")
    if abs(sum(split_ratios) - 1.0) > 1e-9 or len(split_ratios) != 2:
        raise ConfigError("split_ratios must be two fractions summing to 1")
    terrain = generate_terrain(
        cfg.seed, cfg.classes, world_size=cfg.world_size,
        cell_size=cfg.cell_size, block_cells=cfg.block_cells,
    )
    rng_split = np.random.default_rng([_SPLIT_STREAM, cfg.seed])
    order = rng_split.permutation(n_traj)
    n_train = int(round(split_ratios[0] * n_traj))
    n_train = min(max(n_train, 1), n_traj - 1)
    split_of = {int(t): ("train" if k < n_train else "test") for k, t in enumerate(order)}

    samples = {"train": [], "test": []}
    for i in range(n_traj):
        traj = generate_trajectory(terrain, cfg, seed=cfg.seed * 100003 + i, source_id=f"traj{i:04d}")
        synced = tj.synchronize(traj, hi_hz=cfg.hi_hz, lo_hz=cfg.lo_hz, cam_hz=cfg.cam_hz)
        triplets = tj.window_triplets(synced, window_s=window_s, stride_s=stride_s)
        samples[split_of[i]].extend(triplets)
        if log is not None and (i + 1) % 50 == 0:
            log(f"generated {i + 1}/{n_traj} trajectories")

    rates = {"hi_hz": cfg.hi_hz, "lo_hz": cfg.lo_hz, "cam_hz": cfg.cam_hz}
    out = {}
    for split in ("train", "test"):
        out[split] = tj.TripletDataset.from_samples(
            samples[split], rates, split=split, seed=cfg.seed
        )
    if out_dir is not None:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
        for split in ("train", "test"):
            tj.save_dataset(out[split], out_dir / split)
    return out
