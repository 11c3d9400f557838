"""Encoder branches, fusion head, and checkpoint serialization.

The observation branch is a strided 2D conv stack with a 2-layer MLP head;
the locomotion and action branches are stacked 1D convs with group norms,
mean-pooled over time and projected by a 2-layer MLP.  All branches emit
vectors of the same dimension (128 by default).  The fused image+action
embedding is produced by a 2-layer MLP over the concatenated pair.
"""

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from terralign import diffengine as de
from terralign.diffengine import Tensor
from terralign.errors import CheckpointError, ConfigError, DimensionError

CHECKPOINT_FORMAT_VERSION = 1

# temperature is stored as the log of the inverse temperature (CLIP style)
INIT_LOG_SCALE = math.log(1.0 / 0.07)
TAU_MIN, TAU_MAX = 5e-3, 5.0

_INIT_STREAM = 0x1217


@dataclass(frozen=True)
class SeqEncoderConfig:
    """Stacked conv1d -> group_norm -> relu blocks, mean pool, 2-layer MLP."""

    in_channels: int
    channels: tuple = (32, 32, 64, 64)
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    groups: int = 4
    hidden: int = 256
    out_dim: int = 128

    def __post_init__(self):
        for c in self.channels:
            if c % self.groups != 0:
                raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")


@dataclass(frozen=True)
class ObsEncoderConfig:
    """Strided conv2d stack over the cropped image plus a 2-layer MLP head."""

    height: int = 32
    width: int = 64
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    groups: int = 4
    hidden: int = 256
    out_dim: int = 128

    def __post_init__(self):
        for c in self.channels:
            if c % self.groups != 0:
                raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")

    def feature_size(self):
        h, w = self.height, self.width
        for _ in self.channels:
            h = (h + 2 * self.padding - self.kernel) // self.stride + 1
            w = (w + 2 * self.padding - self.kernel) // self.stride + 1
            if h < 1 or w < 1:
                raise ConfigError("conv stack collapses the image to nothing")
        return self.channels[-1] * h * w


@dataclass(frozen=True)
class ModelConfig:
    obs: ObsEncoderConfig = field(default_factory=ObsEncoderConfig)
    loco: SeqEncoderConfig = field(default_factory=lambda: SeqEncoderConfig(in_channels=27))
    act: SeqEncoderConfig = field(
        default_factory=lambda: SeqEncoderConfig(in_channels=2, channels=(16, 32, 64, 64))
    )
    fusion_hidden: int = 256
    out_dim: int = 128
    window: int = 240
    mask_action: bool = False

    def __post_init__(self):
        if self.obs.out_dim != self.out_dim or self.loco.out_dim != self.out_dim or self.act.out_dim != self.out_dim:
            raise ConfigError("all encoder branches must share out_dim")

    @staticmethod
    def from_dict(doc):
        return ModelConfig(
            obs=ObsEncoderConfig(**{k: tuple(v) if k == "channels" else v for k, v in doc["obs"].items()}),
            loco=SeqEncoderConfig(**{k: tuple(v) if k == "channels" else v for k, v in doc["loco"].items()}),
            act=SeqEncoderConfig(**{k: tuple(v) if k == "channels" else v for k, v in doc["act"].items()}),
            fusion_hidden=doc["fusion_hidden"],
            out_dim=doc["out_dim"],
            window=doc["window"],
            mask_action=doc["mask_action"],
        )


@dataclass
class ModelCheckpoint:
    params: OrderedDict
    config: ModelConfig
    seed: int

    def trainable(self):
        return [t for t in self.params.values() if t.requires_grad]

    def tau(self):
        return 1.0 / float(np.exp(self.params["logit_scale"].data))


def _seq_layer_dims(cfg):
    dims = [cfg.in_channels] + list(cfg.channels)
    return list(zip(dims[:-1], dims[1:]))


def init_params(config, seed):
    """Deterministic fan-in-scaled uniform init; biases zero; tau = 0.07."""
    rng = np.random.default_rng([_INIT_STREAM, seed])
    params = OrderedDict()

    def weight(name, shape, fan_in):
        params[name] = Tensor(de.he_uniform(rng, shape, fan_in), requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True, name=name)

    obs = config.obs
    c_in = 1
    for i, c_out in enumerate(obs.channels):
        weight(f"obs.conv{i}.w", (c_out, c_in, obs.kernel, obs.kernel), c_in * obs.kernel**2)
        zeros(f"obs.conv{i}.b", (c_out,))
        ones(f"obs.gn{i}.gamma", (c_out,))
        zeros(f"obs.gn{i}.beta", (c_out,))
        c_in = c_out
    flat = obs.feature_size()
    weight("obs.head.w0", (obs.hidden, flat), flat)
    zeros("obs.head.b0", (obs.hidden,))
    weight("obs.head.w1", (obs.out_dim, obs.hidden), obs.hidden)
    zeros("obs.head.b1", (obs.out_dim,))

    for prefix, cfg in (("loco", config.loco), ("act", config.act)):
        for i, (ci, co) in enumerate(_seq_layer_dims(cfg)):
            weight(f"{prefix}.conv{i}.w", (co, ci, cfg.kernel), ci * cfg.kernel)
            zeros(f"{prefix}.conv{i}.b", (co,))
            ones(f"{prefix}.gn{i}.gamma", (co,))
            zeros(f"{prefix}.gn{i}.beta", (co,))
        weight(f"{prefix}.proj.w0", (cfg.hidden, cfg.channels[-1]), cfg.channels[-1])
        zeros(f"{prefix}.proj.b0", (cfg.hidden,))
        weight(f"{prefix}.proj.w1", (cfg.out_dim, cfg.hidden), cfg.hidden)
        zeros(f"{prefix}.proj.b1", (cfg.out_dim,))

    weight("fusion.w0", (config.fusion_hidden, 2 * config.out_dim), 2 * config.out_dim)
    zeros("fusion.b0", (config.fusion_hidden,))
    weight("fusion.w1", (config.out_dim, config.fusion_hidden), config.fusion_hidden)
    zeros("fusion.b1", (config.out_dim,))

    params["logit_scale"] = Tensor(np.asarray(INIT_LOG_SCALE), requires_grad=True, name="logit_scale")
    return ModelCheckpoint(params=params, config=config, seed=seed)


def clamp_temperature(ckpt):
    """Keep tau inside [TAU_MIN, TAU_MAX] (applied after each optimizer step)."""
    ls = ckpt.params["logit_scale"]
    ls.data = np.clip(ls.data, math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN))


def _ensure_batch(x, ndim, what):
    """Return (batched Tensor-ready array or Tensor, squeeze flag)."""
    if isinstance(x, Tensor):
        if x.ndim == ndim - 1:
            return de.reshape(x, (1,) + x.shape), True
        if x.ndim == ndim:
            return x, False
        raise DimensionError(f"{what}: expected {ndim - 1}D or {ndim}D input, got {x.ndim}D")
    arr = np.asarray(x)
    if arr.ndim == ndim - 1:
        return Tensor(arr[None]), True
    if arr.ndim == ndim:
        return Tensor(arr), False
    raise DimensionError(f"{what}: expected {ndim - 1}D or {ndim}D input, got {arr.ndim}D")


def encode_observation(ckpt, obs):
    """Embed cropped terrain images: (H, W) or (N, H, W) -> out_dim vector(s)."""
    cfg = ckpt.config.obs
    p = ckpt.params
    x, squeeze = _ensure_batch(obs, 3, "encode_observation")
    if x.shape[-2:] != (cfg.height, cfg.width):
        raise DimensionError(
            f"encode_observation: image {x.shape[-2:]} != configured {(cfg.height, cfg.width)}"
        )
    n = x.shape[0]
    x = de.reshape(x, (n, 1, cfg.height, cfg.width))
    for i in range(len(cfg.channels)):
        x = de.conv2d(x, p[f"obs.conv{i}.w"], p[f"obs.conv{i}.b"], stride=cfg.stride, padding=cfg.padding)
        x = de.group_norm(x, p[f"obs.gn{i}.gamma"], p[f"obs.gn{i}.beta"], cfg.groups)
        x = de.relu(x)
    x = de.reshape(x, (n, cfg.feature_size()))
    x = de.relu(de.linear(x, p["obs.head.w0"], p["obs.head.b0"]))
    x = de.linear(x, p["obs.head.w1"], p["obs.head.b1"])
    return de.reshape(x, (cfg.out_dim,)) if squeeze else x


def _encode_sequence(ckpt, prefix, cfg, seq, window):
    x, squeeze = _ensure_batch(seq, 3, f"encode_{prefix}")
    if x.shape[-1] != cfg.in_channels:
        raise DimensionError(
            f"encode_{prefix}: {x.shape[-1]} channels, expected {cfg.in_channels}"
        )
    if x.shape[-2] > window:
        raise DimensionError(f"encode_{prefix}: {x.shape[-2]} frames exceed window {window}")
    x = de.swap_last2(x)  # (N, C, T)
    if x.shape[-1] < window:
        x = de.pad_replicate(x, window)
    p = ckpt.params
    for i in range(len(cfg.channels)):
        x = de.conv1d(x, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"], stride=cfg.stride, padding=cfg.padding)
        x = de.group_norm(x, p[f"{prefix}.gn{i}.gamma"], p[f"{prefix}.gn{i}.beta"], cfg.groups)
        x = de.relu(x)
    x = de.mean_pool(x)
    x = de.relu(de.linear(x, p[f"{prefix}.proj.w0"], p[f"{prefix}.proj.b0"]))
    x = de.linear(x, p[f"{prefix}.proj.w1"], p[f"{prefix}.proj.b1"])
    return de.reshape(x, (cfg.out_dim,)) if squeeze else x


def encode_locomotion(ckpt, s):
    """Embed locomotion windows: (T, 27) or (N, T, 27); short inputs are tiled to 6 s."""
    return _encode_sequence(ckpt, "loco", ckpt.config.loco, s, ckpt.config.window)


def encode_action(ckpt, c):
    """Embed action windows: (T, 2) or (N, T, 2); short inputs are tiled to 6 s."""
    return _encode_sequence(ckpt, "act", ckpt.config.act, c, ckpt.config.window)


def fuse(ckpt, v_obs, v_act):
    """Fuse observation and action embeddings with the 2-layer MLP."""
    p = ckpt.params
    d = ckpt.config.out_dim
    vo, sq_o = _ensure_batch(v_obs, 2, "fuse")
    va, sq_a = _ensure_batch(v_act, 2, "fuse")
    if vo.shape[-1] != d or va.shape[-1] != d or vo.shape[0] != va.shape[0]:
        raise DimensionError(f"fuse: inputs {vo.shape} / {va.shape} must both be (n, {d})")
    x = de.concat([vo, va], axis=-1)
    x = de.relu(de.linear(x, p["fusion.w0"], p["fusion.b0"]))
    x = de.linear(x, p["fusion.w1"], p["fusion.b1"])
    return de.reshape(x, (d,)) if (sq_o and sq_a) else x


def forward_embeddings(ckpt, obs, loco, act, mask_action=None):
    """Run the full batch pipeline, returning (v_s, v_m).

    mask_action defaults to the checkpoint's configuration; when set, the raw
    action input is replaced by zeros before encoding (both in training and
    at evaluation time).
    """
    if mask_action is None:
        mask_action = ckpt.config.mask_action
    if mask_action:
        act = np.zeros_like(np.asarray(act))
    v_o = encode_observation(ckpt, obs)
    v_c = encode_action(ckpt, act)
    v_s = encode_locomotion(ckpt, loco)
    v_m = fuse(ckpt, v_o, v_c)
    return v_s, v_m


# ---------------------------------------------------------------------------
# checkpoint serialization: model.bin + model.manifest.json
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt, path):
    """Write model.bin (concatenated little-endian f32) and its manifest."""
    from pathlib import Path

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name, tensor in ckpt.params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        table.append(
            {"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    (path / "model.bin").write_bytes(b"".join(chunks))
    doc = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "seed": ckpt.seed,
        "config": asdict(ckpt.config),
        "tensors": table,
    }
    (path / "model.manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, config=None):
    """Load a checkpoint directory; optionally enforce an expected config."""
    from pathlib import Path

    path = Path(path)
    manifest_path = path / "model.manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no model.manifest.json under {path}")
    doc = json.loads(manifest_path.read_text())
    if doc.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    loaded_config = ModelConfig.from_dict(doc["config"])
    if config is not None and loaded_config != config:
        raise CheckpointError("checkpoint config does not match the expected config")
    raw = (path / "model.bin").read_bytes()
    expected = sum(t["nbytes"] for t in doc["tensors"])
    if len(raw) != expected:
        raise CheckpointError(f"model.bin has {len(raw)} bytes, manifest expects {expected}")
    reference = init_params(loaded_config, doc["seed"])
    params = OrderedDict()
    for entry in doc["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in reference.params:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if reference.params[name].shape != shape:
            raise CheckpointError(
                f"tensor {name!r}: shape {shape} drifted from config-implied "
                f"{reference.params[name].shape}"
            )
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != n_items * 4:
            raise CheckpointError(f"tensor {name!r}: byte length inconsistent with shape")
        arr = np.frombuffer(raw, dtype="<f4", count=n_items, offset=entry["offset"])
        # frombuffer views are read-only; copy so the optimizer can update in place
        params[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True, name=name)
    missing = set(reference.params) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return ModelCheckpoint(params=params, config=loaded_config, seed=doc["seed"])
