"""Downstream evaluation harnesses.

Task 1: bidirectional cross-modal retrieval between locomotion embeddings
and fused image+action embeddings, reported as rank-k accuracy.
Task 2: dynamics prediction — a GRU consumes future actions, seeded by an
affine map of the frozen locomotion encoder's history embedding, and emits
per-step pose differentials that are accumulated into absolute poses and
scored with RMSE against ground truth; the kinematic bicycle model serves
as the no-learning baseline.
"""

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from terralign import diffengine as de
from terralign import encoders
from terralign.diffengine import Tape, Tensor
from terralign.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    UsageError,
)
from terralign.trajectory import channel_offsets

_PREDICTOR_STREAM = 0xD123
_PRED_SHUFFLE_STREAM = 0xD124


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embed_dataset(ckpt, dataset, batch_size=64, mask_action=None):
    """Embed every sample; returns dict with v_o, v_c, v_s, v_m arrays."""
    n = len(dataset)
    d = ckpt.config.out_dim
    out = {k: np.zeros((n, d), dtype=np.float32) for k in ("v_o", "v_c", "v_s", "v_m")}
    if mask_action is None:
        mask_action = ckpt.config.mask_action
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        act = dataset.act[lo:hi]
        if mask_action:
            act = np.zeros_like(act)
        v_o = encoders.encode_observation(ckpt, dataset.obs[lo:hi])
        v_c = encoders.encode_action(ckpt, act)
        v_s = encoders.encode_locomotion(ckpt, dataset.loco[lo:hi])
        v_m = encoders.fuse(ckpt, v_o, v_c)
        out["v_o"][lo:hi] = v_o.data
        out["v_c"][lo:hi] = v_c.data
        out["v_s"][lo:hi] = v_s.data
        out["v_m"][lo:hi] = v_m.data
    return out


def _unit_rows(x):
    norms = np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm embedding row")
    return (x / norms).astype(np.float64)


# ---------------------------------------------------------------------------
# Task 1: cross-modal retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalReport:
    direction: str
    gallery_size: int
    ks: tuple
    accuracies: dict
    ranks: list
    chance: dict = field(default_factory=dict)

    def rows(self):
        for k in self.ks:
            yield {
                "metric": f"rank{k}_acc",
                "direction": self.direction,
                "gallery_size": self.gallery_size,
                "value": self.accuracies[k],
                "chance": self.chance[k],
            }


def retrieval_ranks(queries, gallery):
    """Rank of the true target i within the gallery for each query i.

    Scores are cosine similarities; ties are broken by ascending gallery
    index, so an item with equal score but smaller index outranks the target.
    """
    q = _unit_rows(queries)
    g = _unit_rows(gallery)
    sims = q @ g.T
    n = sims.shape[0]
    target = sims[np.arange(n), np.arange(n)]
    higher = (sims > target[:, None]).sum(axis=1)
    tied_before = np.array(
        [int((sims[i, :i] == target[i]).sum()) for i in range(n)], dtype=np.int64
    )
    return higher + tied_before + 1


def eval_retrieval(ckpt, dataset, direction="m2s", ks=(1, 10, 50), batch_size=64):
    """Bidirectional cross-modal retrieval; gallery is the whole dataset.

    direction "m2s": fused (observation+action) queries against locomotion
    gallery; "s2m" is the reverse.
    """
    if direction not in ("m2s", "s2m"):
        raise UsageError(f"unknown retrieval direction {direction!r}")
    n = len(dataset)
    if n < 2:
        raise UsageError("retrieval needs at least 2 samples")
    emb = embed_dataset(ckpt, dataset, batch_size=batch_size)
    if direction == "m2s":
        ranks = retrieval_ranks(emb["v_m"], emb["v_s"])
    else:
        ranks = retrieval_ranks(emb["v_s"], emb["v_m"])
    clipped = []
    for k in ks:
        if k > n:
            warnings.warn(f"rank-{k} clipped to gallery size {n}")
        clipped.append(min(k, n))
    accuracies = {k: float((ranks <= k).mean()) for k in clipped}
    chance = {k: k / n for k in clipped}
    return RetrievalReport(
        direction=direction,
        gallery_size=n,
        ks=tuple(clipped),
        accuracies=accuracies,
        ranks=ranks.tolist(),
        chance=chance,
    )


# ---------------------------------------------------------------------------
# pose utilities
# ---------------------------------------------------------------------------


def rmse(predicted, truth):
    """Root-mean-square error over all entries of two equal-shape arrays."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise DimensionError(f"rmse: {predicted.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


def rollout_accumulate(initial_pose, diffs):
    """Accumulate pose differentials from an initial 7-dim pose.

    Positions are cumulative sums; quaternions add the differential and are
    renormalized each step.  Returns (n_steps, 7) float64.
    """
    initial_pose = np.asarray(initial_pose, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if initial_pose.shape != (7,) or diffs.ndim != 2 or diffs.shape[1] != 7:
        raise DimensionError("rollout_accumulate: pose must be 7-dim, diffs (n, 7)")
    q0 = initial_pose[3:]
    if abs(np.linalg.norm(q0) - 1.0) > 1e-5:
        raise DegenerateInputError("initial quaternion is not unit norm")
    out = np.empty_like(diffs)
    pos = initial_pose[:3].copy()
    quat = q0.copy()
    for t in range(len(diffs)):
        pos = pos + diffs[t, :3]
        quat = quat + diffs[t, 3:]
        norm = np.linalg.norm(quat)
        if norm == 0.0:
            raise DegenerateInputError(f"zero-norm quaternion at step {t}")
        quat = quat / norm
        out[t, :3] = pos
        out[t, 3:] = quat
    return out


def pose_differentials(poses):
    """Per-step differentials of a pose sequence (inverse of rollout)."""
    poses = np.asarray(poses, dtype=np.float64)
    return poses[1:] - poses[:-1]


# ---------------------------------------------------------------------------
# Task 2 baselines: kinematic bicycle model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KBMParams:
    wheelbase: float = 2.0
    a_max: float = 3.0
    drag: float = 0.5
    max_steer: float = 0.5
    wheel_diameter: float = 0.6

    @staticmethod
    def from_synth_config(doc):
        return KBMParams(
            wheelbase=doc["wheelbase"],
            a_max=doc["a_max"],
            drag=doc["drag"],
            max_steer=doc["max_steer"],
            wheel_diameter=doc["wheel_diameter"],
        )


def kbm_baseline(initial_state, actions, params, dt):
    """Forward-integrate bicycle kinematics; no learning, no terrain model.

    initial_state: dict-like with x, y, z, heading, speed.  actions: (n, 2)
    throttle/steering.  Midpoint updates keep the constant-steer circle tight
    at dt = 1/40 s.  Returns (n, 7) poses.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != 2:
        raise DimensionError("kbm_baseline: actions must be (n, 2)")
    x, y, z = initial_state["x"], initial_state["y"], initial_state["z"]
    theta = initial_state["heading"]
    v = initial_state["speed"]
    out = np.empty((len(actions), 7), dtype=np.float64)
    for t, (throttle, steering) in enumerate(actions):
        a = params.a_max * throttle - params.drag * v
        v_new = v + a * dt
        v_mid = 0.5 * (v + v_new)
        omega = (v_mid / params.wheelbase) * math.tan(steering * params.max_steer)
        theta_mid = theta + 0.5 * omega * dt
        x += v_mid * math.cos(theta_mid) * dt
        y += v_mid * math.sin(theta_mid) * dt
        theta += omega * dt
        v = v_new
        out[t] = (x, y, z, 0.0, 0.0, math.sin(theta / 2.0), math.cos(theta / 2.0))
    return out


# ---------------------------------------------------------------------------
# Task 2: learned dynamics predictor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorConfig:
    history_s: float = 2.0
    horizon_s: float = 2.0
    hidden: int = 48
    epochs: int = 240
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    freeze_encoder: bool = True
    use_history: bool = True

    def __post_init__(self):
        if self.history_s <= 0 or self.horizon_s <= 0:
            raise ConfigError("history and horizon must be positive")


def _frames(pcfg, lo_hz, window):
    m = int(round(pcfg.history_s * lo_hz))
    n = int(round(pcfg.horizon_s * lo_hz))
    if m + n > window:
        raise ConfigError(f"history+horizon ({m}+{n} frames) exceed the {window}-frame window")
    if m < 2:
        raise ConfigError("history must cover at least 2 frames")
    return m, n


def prepare_dynamics_arrays(dataset, pcfg):
    """Slice triplets into (history, future actions, target diffs, truth poses).

    "cond" is the raw final history frame: instance normalization strips
    absolute speed/heading from the encoded history, and a rollout from the
    last pose is ill-posed without them, so the predictor is additionally
    conditioned on the state it starts from.
    """
    lo_hz = dataset.manifest.rates["lo_hz"]
    window = dataset.loco.shape[1]
    m, n = _frames(pcfg, lo_hz, window)
    pose_lo, pose_hi = channel_offsets(dataset.manifest.channel_map)["pose"]
    pose = dataset.loco[:, :, pose_lo:pose_hi].astype(np.float64)
    history = dataset.loco[:, :m, :]
    actions = dataset.act[:, m - 1 : m + n - 1, :]
    truth = pose[:, m : m + n]
    diffs = truth - pose[:, m - 1 : m + n - 1]
    return {
        "history": history,
        "cond": dataset.loco[:, m - 1, :].astype(np.float32),
        "actions": actions.astype(np.float32),
        "diffs": diffs.astype(np.float32),
        "truth": truth,
        "initial": pose[:, m - 1],
        "m": m,
        "n": n,
        "lo_hz": lo_hz,
    }


def normalize_history(history):
    """Instance-normalize each history window per channel (no gradient path)."""
    x = Tensor(np.asarray(history).transpose(0, 2, 1))  # (N, C, T)
    return de.instance_norm(x).data.transpose(0, 2, 1)


def history_embeddings(ckpt, history, batch_size=128):
    """Frozen-encoder embeddings of instance-normalized, tiled history windows."""
    normed = normalize_history(history)
    out = np.zeros((len(normed), ckpt.config.out_dim), dtype=np.float32)
    for lo in range(0, len(normed), batch_size):
        hi = min(lo + batch_size, len(normed))
        out[lo:hi] = encoders.encode_locomotion(ckpt, normed[lo:hi]).data
    return out


def init_predictor(pcfg, in_dim=2, embed_dim=128, cond_dim=27, out_dim=7):
    """GRU predictor parameters: h0 affine map, GRU cell, output head."""
    rng = np.random.default_rng([_PREDICTOR_STREAM, pcfg.seed])
    h = pcfg.hidden
    params = OrderedDict()

    def weight(name, shape, fan_in):
        params[name] = Tensor(de.he_uniform(rng, shape, fan_in), requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    weight("h0.w", (h, embed_dim + cond_dim), embed_dim + cond_dim)
    zeros("h0.b", (h,))
    weight("gru.w_ih", (3 * h, in_dim), in_dim)
    weight("gru.w_hh", (3 * h, h), h)
    zeros("gru.b_ih", (3 * h,))
    zeros("gru.b_hh", (3 * h,))
    # bias the update gate open so the initial state persists across the
    # horizon by default (the rollout spans 80 steps)
    params["gru.b_hh"].data[h : 2 * h] = 1.0
    weight("out.w", (out_dim, h), h)
    zeros("out.b", (out_dim,))
    # standardization constants for the conditioning frame, set at train time
    params["cond.mu"] = Tensor(np.zeros(cond_dim), name="cond.mu")
    params["cond.sd"] = Tensor(np.ones(cond_dim), name="cond.sd")
    return params


def standardize_cond(params, cond):
    return (np.asarray(cond) - params["cond.mu"].data) / params["cond.sd"].data


def predictor_forward(params, actions, context, use_history=True):
    """Predict per-step pose differentials for a batch.

    actions: (B, T, 2) Tensor/array; context: (B, E + C) Tensor/array holding
    the history embedding concatenated with the standardized final frame.
    ``use_history=False`` zeroes the initial hidden state entirely.
    """
    if not isinstance(actions, Tensor):
        actions = Tensor(actions)
    if not isinstance(context, Tensor):
        context = Tensor(context)
    b, t_len, _ = actions.shape
    if use_history:
        h0 = de.linear(context, params["h0.w"], params["h0.b"])
    else:
        h0 = Tensor(np.zeros((b, params["h0.w"].shape[0])))
    hs = de.gru_sequence(actions, h0, params["gru.w_ih"], params["gru.w_hh"],
                         params["gru.b_ih"], params["gru.b_hh"])
    flat = de.reshape(hs, (b * t_len, params["gru.w_hh"].shape[1]))
    y = de.linear(flat, params["out.w"], params["out.b"])
    return de.reshape(y, (b, t_len, params["out.w"].shape[0]))


def train_dynamics_predictor(ckpt, dataset, pcfg, log=None):
    """Fit the GRU predictor on a training split with a frozen encoder.

    Returns (params, curve).  ``freeze_encoder=False`` must be requested
    explicitly in the config and additionally trains the locomotion branch.
    """
    from terralign.contrastive import Adam

    data = prepare_dynamics_arrays(dataset, pcfg)
    n_samples = len(data["history"])
    if n_samples == 0:
        raise UsageError("empty dynamics training set")
    cond_dim = data["cond"].shape[1]
    params = init_predictor(pcfg, in_dim=2, embed_dim=ckpt.config.out_dim, cond_dim=cond_dim)
    params["cond.mu"].data = data["cond"].mean(axis=0)
    params["cond.sd"].data = np.maximum(data["cond"].std(axis=0), 1e-6).astype(np.float32)
    trainable = [t for t in params.values() if t.requires_grad]
    if not pcfg.freeze_encoder:
        trainable += [t for name, t in ckpt.params.items() if name.startswith("loco.")]
    optimizer = Adam(trainable)
    cond_std = standardize_cond(params, data["cond"]).astype(np.float32)
    normed_history = normalize_history(data["history"])
    context = None
    if pcfg.freeze_encoder:
        embeds = history_embeddings(ckpt, data["history"])
        context = np.concatenate([embeds, cond_std], axis=1)
    curve = []
    for epoch in range(pcfg.epochs):
        rng = np.random.default_rng([_PRED_SHUFFLE_STREAM, pcfg.seed, epoch])
        perm = rng.permutation(n_samples)
        epoch_losses = []
        for lo in range(0, n_samples, pcfg.batch_size):
            idx = perm[lo : lo + pcfg.batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                if pcfg.freeze_encoder:
                    ctx = Tensor(context[idx])
                else:
                    emb = encoders.encode_locomotion(ckpt, normed_history[idx])
                    ctx = de.concat([emb, Tensor(cond_std[idx])], axis=1)
                pred = predictor_forward(params, Tensor(data["actions"][idx]), ctx,
                                         use_history=pcfg.use_history)
                err = de.sub(pred, Tensor(data["diffs"][idx]))
                loss = de.mean_all(de.mul(err, err))
            de.backward(tape, loss)
            optimizer.step(pcfg.lr)
            epoch_losses.append(loss.item())
        mean_loss = float(np.mean(epoch_losses))
        curve.append({"epoch": epoch, "loss": mean_loss})
        if log is not None and (epoch + 1) % 40 == 0:
            log(f"predictor epoch {epoch + 1}/{pcfg.epochs}: mse {mean_loss:.6f}")
    return params, curve


def predict_differentials(params, ckpt, dataset, pcfg, batch_size=256):
    """Predicted pose differentials for every sample of a dataset."""
    data = prepare_dynamics_arrays(dataset, pcfg)
    embeds = history_embeddings(ckpt, data["history"])
    cond_std = standardize_cond(params, data["cond"]).astype(np.float32)
    context = np.concatenate([embeds, cond_std], axis=1)
    n = len(embeds)
    out = np.zeros_like(data["diffs"])
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        pred = predictor_forward(params, Tensor(data["actions"][lo:hi]),
                                 Tensor(context[lo:hi]), use_history=pcfg.use_history)
        out[lo:hi] = pred.data
    return out, data


@dataclass
class DynamicsReport:
    baseline: str
    rmse: float
    rmse_position: float
    rmse_quaternion: float
    per_step: list
    n_samples: int
    horizon_steps: int

    def rows(self):
        yield {"metric": "rmse", "baseline": self.baseline, "value": self.rmse}
        yield {"metric": "rmse_position", "baseline": self.baseline, "value": self.rmse_position}
        yield {"metric": "rmse_quaternion", "baseline": self.baseline, "value": self.rmse_quaternion}
        for i, v in enumerate(self.per_step):
            yield {"metric": "rmse_step", "baseline": self.baseline, "step": i, "value": v}


def score_poses(pred_poses, truth_poses, baseline):
    """Assemble a DynamicsReport from stacked (N, T, 7) pose arrays."""
    pred_poses = np.asarray(pred_poses, dtype=np.float64)
    truth_poses = np.asarray(truth_poses, dtype=np.float64)
    if pred_poses.shape != truth_poses.shape:
        raise DimensionError("score_poses: prediction/truth shapes differ")
    per_step = [
        float(np.sqrt(np.mean((pred_poses[:, t] - truth_poses[:, t]) ** 2)))
        for t in range(pred_poses.shape[1])
    ]
    return DynamicsReport(
        baseline=baseline,
        rmse=rmse(pred_poses, truth_poses),
        rmse_position=rmse(pred_poses[..., :3], truth_poses[..., :3]),
        rmse_quaternion=rmse(pred_poses[..., 3:], truth_poses[..., 3:]),
        per_step=per_step,
        n_samples=pred_poses.shape[0],
        horizon_steps=pred_poses.shape[1],
    )


def eval_learned_dynamics(params, ckpt, dataset, pcfg, baseline="pretrained"):
    """Roll out predicted differentials and score against ground truth."""
    diffs, data = predict_differentials(params, ckpt, dataset, pcfg)
    preds = np.stack(
        [rollout_accumulate(data["initial"][i], diffs[i]) for i in range(len(diffs))]
    )
    return score_poses(preds, data["truth"], baseline)


def eval_kbm_dynamics(dataset, pcfg, params, channel_map=None):
    """Score the kinematic bicycle baseline on a dataset split."""
    data = prepare_dynamics_arrays(dataset, pcfg)
    offs = channel_offsets(channel_map or dataset.manifest.channel_map)
    rpm_lo, rpm_hi = offs["rpm"]
    m = data["m"]
    dt = 1.0 / data["lo_hz"]
    preds = []
    for i in range(len(data["history"])):
        pose0 = data["initial"][i]
        rpm = float(dataset.loco[i, m - 1, rpm_lo:rpm_hi].mean())
        speed = rpm * math.pi * params.wheel_diameter / 60.0
        heading = 2.0 * math.atan2(pose0[5], pose0[6])
        state = {"x": pose0[0], "y": pose0[1], "z": pose0[2], "heading": heading, "speed": speed}
        preds.append(kbm_baseline(state, data["actions"][i], params, dt))
    return score_poses(np.stack(preds), data["truth"], "kbm")


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def export_embeddings(ckpt, dataset, out_dir, batch_size=64):
    """Write one embedding row per sample: v_o | v_c | v_s | v_m (f32)."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emb = embed_dataset(ckpt, dataset, batch_size=batch_size)
    blocks = ("v_o", "v_c", "v_s", "v_m")
    table = np.concatenate([emb[b] for b in blocks], axis=1).astype("<f4")
    (out_dir / "embeddings.bin").write_bytes(table.tobytes())
    doc = {
        "version": 1,
        "count": len(dataset),
        "dim": ckpt.config.out_dim,
        "blocks": list(blocks),
        "row_width": table.shape[1] if table.size else 4 * ckpt.config.out_dim,
        "mask_action": ckpt.config.mask_action,
        "samples": dataset.manifest.samples,
    }
    (out_dir / "embeddings.manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out_dir


def write_report(rows, jsonl_path, csv_path):
    """Emit metric rows as line-delimited JSON plus a CSV summary."""
    import csv as _csv

    rows = list(rows)
    with open(jsonl_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    keys = sorted({k for row in rows for k in row})
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
