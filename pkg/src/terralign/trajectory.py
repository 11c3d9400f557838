"""Driving-session data model and preparation pipeline.

A trajectory carries three time-stamped streams (camera observations,
locomotion states, control actions) recorded at different rates.
``synchronize`` brings locomotion and actions onto a common 40 Hz grid by
upsampling to 400 Hz (linear interpolation for continuous sensors,
zero-order hold for actions) and averaging non-overlapping windows;
``window_triplets`` slices the synchronized session into 6 s training
triplets sampled every 2 s.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from terralign.errors import (
    AlignmentError,
    ConfigError,
    CorruptionError,
    DimensionError,
    FormatError,
    VersionError,
)

DATASET_FORMAT_VERSION = 1

# Locomotion channel composition (27 channels total).  The trailing reserved
# block keeps the width configurable without changing the wire format.
DEFAULT_CHANNEL_MAP = (
    ("pose", 7),
    ("angvel", 3),
    ("linacc", 3),
    ("shock", 4),
    ("rpm", 4),
    ("reserved", 6),
)


def channel_offsets(channel_map=DEFAULT_CHANNEL_MAP):
    """Map block name -> (start, stop) column indices."""
    out, start = {}, 0
    for name, width in channel_map:
        out[name] = (start, start + width)
        start += width
    return out


@dataclass
class ModalityStream:
    """One sensor stream: (frames, channels) values with per-frame timestamps."""

    name: str
    rate_hz: float
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionError(f"stream {self.name}: values must be (frames, channels)")
        if self.timestamps.ndim != 1 or len(self.timestamps) != len(self.values):
            raise FormatError(f"stream {self.name}: one timestamp per frame required")
        if len(self.timestamps) >= 2 and not np.all(np.diff(self.timestamps) > 0):
            raise FormatError(f"stream {self.name}: timestamps must be strictly increasing")

    @property
    def frames(self):
        return len(self.timestamps)

    @property
    def channels(self):
        return self.values.shape[1]


@dataclass
class Trajectory:
    """One driving session: observation images plus locomotion/action streams."""

    obs: ModalityStream
    loco: ModalityStream
    action: ModalityStream
    image_shape: tuple
    source_id: str = "traj"

    def __post_init__(self):
        h, w = self.image_shape
        if self.obs.channels != h * w:
            raise DimensionError(
                f"{self.source_id}: obs channels {self.obs.channels} != {h}x{w}"
            )
        act = self.action.values
        if act.shape[1] != 2:
            raise DimensionError(f"{self.source_id}: action stream must have 2 channels")
        if act.size and (act[:, 0].min() < 0 or act[:, 0].max() > 1):
            raise FormatError(f"{self.source_id}: throttle outside [0, 1]")
        if act.size and (act[:, 1].min() < -1 or act[:, 1].max() > 1):
            raise FormatError(f"{self.source_id}: steering outside [-1, 1]")


@dataclass
class TripletSample:
    """One aligned training example: image + 6 s locomotion/action windows."""

    o: np.ndarray
    s: np.ndarray
    c: np.ndarray
    source_id: str
    t0: float


@dataclass
class DatasetManifest:
    split: str
    count: int
    obs_shape: tuple
    loco_shape: tuple
    act_shape: tuple
    rates: dict
    channel_map: tuple
    seed: int
    samples: list = field(default_factory=list)
    version: int = DATASET_FORMAT_VERSION


class TripletDataset:
    """In-memory dataset: stacked sample arrays plus the manifest."""

    def __init__(self, manifest, obs, loco, act):
        self.manifest = manifest
        self.obs = obs
        self.loco = loco
        self.act = act

    def __len__(self):
        return self.manifest.count

    @classmethod
    def from_samples(cls, samples, rates, split="train", seed=0, channel_map=DEFAULT_CHANNEL_MAP):
        if samples:
            obs = np.stack([s.o for s in samples]).astype(np.float32)
            loco = np.stack([s.s for s in samples]).astype(np.float32)
            act = np.stack([s.c for s in samples]).astype(np.float32)
            obs_shape, loco_shape, act_shape = obs.shape[1:], loco.shape[1:], act.shape[1:]
        else:
            obs = np.zeros((0,), dtype=np.float32)
            loco = np.zeros((0,), dtype=np.float32)
            act = np.zeros((0,), dtype=np.float32)
            obs_shape, loco_shape, act_shape = (), (), ()
        manifest = DatasetManifest(
            split=split,
            count=len(samples),
            obs_shape=tuple(obs_shape),
            loco_shape=tuple(loco_shape),
            act_shape=tuple(act_shape),
            rates=dict(rates),
            channel_map=tuple(tuple(c) for c in channel_map),
            seed=seed,
            samples=[{"source_id": s.source_id, "t0": float(s.t0)} for s in samples],
        )
        return cls(manifest, obs, loco, act)


def _resample_to_grid(stream, grid, mode):
    """Upsample one stream onto `grid` timestamps (float64 math)."""
    values = stream.values.astype(np.float64)
    if mode == "linear":
        out = np.empty((len(grid), stream.channels), dtype=np.float64)
        for ch in range(stream.channels):
            out[:, ch] = np.interp(grid, stream.timestamps, values[:, ch])
        return out
    if mode == "hold":
        idx = np.searchsorted(stream.timestamps, grid + 1e-12, side="right") - 1
        idx = np.clip(idx, 0, stream.frames - 1)
        return values[idx]
    raise ConfigError(f"unknown resample mode {mode!r}")


def synchronize(traj, hi_hz=400.0, lo_hz=40.0, cam_hz=10.0):
    """Bring locomotion/action streams onto a shared lo_hz grid.

    Continuous locomotion channels are upsampled to hi_hz by linear
    interpolation, action channels by zero-order hold; both are then averaged
    over non-overlapping hi_hz/lo_hz windows.  Camera frames are kept as-is
    when already at cam_hz, otherwise re-picked by nearest timestamp.
    """
    ratio = hi_hz / lo_hz
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError(f"hi_hz {hi_hz} must be an integer multiple of lo_hz {lo_hz}")
    ratio = int(round(ratio))

    streams = (traj.obs, traj.loco, traj.action)
    if any(s.frames == 0 for s in streams):
        raise AlignmentError(f"{traj.source_id}: empty stream")
    t0 = max(s.timestamps[0] for s in streams)
    t_end = min(s.timestamps[-1] for s in streams)
    if t_end <= t0:
        raise AlignmentError(f"{traj.source_id}: streams share no time interval")

    n_hi = int(np.floor((t_end - t0) * hi_hz + 1e-9)) + 1
    grid = t0 + np.arange(n_hi, dtype=np.float64) / hi_hz

    loco_hi = _resample_to_grid(traj.loco, grid, "linear")
    act_hi = _resample_to_grid(traj.action, grid, "hold")

    n_lo = n_hi // ratio
    if n_lo == 0:
        raise AlignmentError(f"{traj.source_id}: overlap shorter than one {lo_hz} Hz frame")
    lo_times = t0 + np.arange(n_lo, dtype=np.float64) / lo_hz
    loco_lo = loco_hi[: n_lo * ratio].reshape(n_lo, ratio, -1).mean(axis=1)
    act_lo = act_hi[: n_lo * ratio].reshape(n_lo, ratio, -1).mean(axis=1)

    spacing = np.diff(traj.obs.timestamps)
    native = (
        abs(traj.obs.rate_hz - cam_hz) < 1e-9
        and (len(spacing) == 0 or np.all(np.abs(spacing - 1.0 / cam_hz) < 1e-6))
    )
    if native:
        keep = (traj.obs.timestamps >= t0 - 1e-9) & (traj.obs.timestamps <= t_end + 1e-9)
        obs_times = traj.obs.timestamps[keep]
        obs_vals = traj.obs.values[keep]
    else:
        n_cam = int(np.floor((t_end - t0) * cam_hz + 1e-9)) + 1
        obs_times = t0 + np.arange(n_cam, dtype=np.float64) / cam_hz
        nearest = np.abs(traj.obs.timestamps[None, :] - obs_times[:, None]).argmin(axis=1)
        obs_vals = traj.obs.values[nearest]

    return Trajectory(
        obs=ModalityStream("obs", cam_hz, obs_times, obs_vals),
        loco=ModalityStream("loco", lo_hz, lo_times, loco_lo.astype(np.float32)),
        action=ModalityStream(
            "action", lo_hz, lo_times.copy(), np.clip(act_lo, [0.0, -1.0], [1.0, 1.0]).astype(np.float32)
        ),
        image_shape=traj.image_shape,
        source_id=traj.source_id,
    )


def crop_lower_half(image):
    """Keep the bottom half of an image; odd heights duplicate the top row first."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"crop_lower_half: expected H x W image, got {image.shape}")
    h = image.shape[0]
    if h % 2 == 1:
        image = np.vstack([image[:1], image])
        h += 1
    return image[h // 2 :].copy()


def window_triplets(traj, window_s=6.0, stride_s=2.0):
    """Slice a synchronized trajectory into overlapping triplet samples."""
    if traj.loco.frames != traj.action.frames or not np.array_equal(
        traj.loco.timestamps, traj.action.timestamps
    ):
        raise FormatError(f"{traj.source_id}: streams are not synchronized")
    lo_hz = traj.loco.rate_hz
    win = int(round(window_s * lo_hz))
    step = int(round(stride_s * lo_hz))
    if win <= 0 or step <= 0:
        raise ConfigError("window and stride must be positive")
    n = traj.loco.frames
    if n < win:
        return []
    h, w = traj.image_shape
    out = []
    count = (n - win) // step + 1
    for i in range(count):
        start = i * step
        t0 = float(traj.loco.timestamps[start])
        obs_idx = int(np.searchsorted(traj.obs.timestamps, t0 - 1e-9))
        if obs_idx >= traj.obs.frames:
            break
        image = traj.obs.values[obs_idx].reshape(h, w)
        out.append(
            TripletSample(
                o=crop_lower_half(image),
                s=traj.loco.values[start : start + win].copy(),
                c=traj.action.values[start : start + win].copy(),
                source_id=traj.source_id,
                t0=t0,
            )
        )
    return out


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + raw little-endian float32 blobs
# ---------------------------------------------------------------------------

_BLOBS = (("obs", "obs.f32"), ("loco", "loco.f32"), ("act", "act.f32"))


def save_dataset(dataset, path):
    """Write manifest.json plus obs/loco/act blobs into directory `path`."""
    from pathlib import Path

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = dataset.manifest
    blobs = {}
    for attr, fname in _BLOBS:
        arr = getattr(dataset, attr).astype("<f4")
        raw = arr.tobytes()
        (path / fname).write_bytes(raw)
        blobs[attr] = {"file": fname, "dtype": "<f4", "bytes": len(raw)}
    doc = {
        "version": m.version,
        "split": m.split,
        "count": m.count,
        "obs_shape": list(m.obs_shape),
        "loco_shape": list(m.loco_shape),
        "act_shape": list(m.act_shape),
        "rates": m.rates,
        "channel_map": [list(c) for c in m.channel_map],
        "seed": m.seed,
        "blobs": blobs,
        "samples": m.samples,
    }
    (path / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path / "manifest.json"


def load_dataset(path):
    """Load a dataset directory; blob sizes are validated against the manifest."""
    from pathlib import Path

    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {path}")
    doc = json.loads(manifest_path.read_text())
    if doc.get("version") != DATASET_FORMAT_VERSION:
        raise VersionError(f"unsupported dataset version {doc.get('version')!r}")
    count = doc["count"]
    shapes = {
        "obs": tuple(doc["obs_shape"]),
        "loco": tuple(doc["loco_shape"]),
        "act": tuple(doc["act_shape"]),
    }
    arrays = {}
    for attr, fname in _BLOBS:
        meta = doc["blobs"][attr]
        raw = (path / meta["file"]).read_bytes()
        expected = count * int(np.prod(shapes[attr], dtype=np.int64)) * 4 if count else 0
        if len(raw) != meta["bytes"] or len(raw) != expected:
            raise CorruptionError(
                f"{fname}: {len(raw)} bytes on disk, manifest expects {expected}"
            )
        arr = np.frombuffer(raw, dtype="<f4")
        arrays[attr] = arr.reshape((count,) + shapes[attr]) if count else arr
    manifest = DatasetManifest(
        split=doc["split"],
        count=count,
        obs_shape=shapes["obs"],
        loco_shape=shapes["loco"],
        act_shape=shapes["act"],
        rates=doc["rates"],
        channel_map=tuple(tuple(c) for c in doc["channel_map"]),
        seed=doc["seed"],
        samples=doc["samples"],
    )
    return TripletDataset(manifest, arrays["obs"], arrays["loco"], arrays["act"])
