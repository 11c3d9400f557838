"""Symmetric contrastive alignment: similarity matrix, loss, training loop.

The batch similarity matrix holds cosine similarities between locomotion
embeddings (rows) and fused image+action embeddings (columns).  The loss is
the CLIP-style symmetric InfoNCE: -log softmax of the diagonal over rows
plus over columns, with a learnable temperature dividing the logits.  The
equations as printed in some write-ups omit the log (a plain negative
softmax probability); that literal variant stays available behind
``literal_form`` for comparison, the corrected form is the default.
"""

import csv
from dataclasses import dataclass

import numpy as np

from terralign import diffengine as de
from terralign import encoders
from terralign.diffengine import Tape, Tensor
from terralign.errors import DegenerateInputError, DimensionError, NumericalError, UsageError

_SHUFFLE_STREAM = 0x51AF


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    base_lr: float = 1e-4
    peak_lr: float = 1e-3
    warmup_frac: float = 0.5
    seed: int = 0
    literal_form: bool = False
    eval_every: int = 0  # record cadence in steps for stdout progress; 0 = epoch ends only

    def __post_init__(self):
        if self.batch_size < 2:
            raise UsageError("contrastive training needs batch_size >= 2")
        if self.base_lr <= 0 or self.peak_lr <= 0:
            raise UsageError("learning rates must be positive")


def similarity_matrix(v_s, v_m):
    """Pairwise cosine similarities: entry (i, j) = cos(v_s[i], v_m[j])."""
    if not isinstance(v_s, Tensor):
        v_s = Tensor(v_s)
    if not isinstance(v_m, Tensor):
        v_m = Tensor(v_m)
    if v_s.ndim != 2 or v_m.ndim != 2 or v_s.shape != v_m.shape:
        raise DimensionError(f"similarity_matrix: {v_s.shape} vs {v_m.shape}")
    z_s = de.l2_normalize(v_s)
    z_m = de.l2_normalize(v_m)
    return de.matmul(z_s, de.swap_last2(z_m))


def contrastive_loss(sim, tau=None, logit_scale=None, literal_form=False):
    """Symmetric contrastive loss over a similarity matrix.

    Exactly one of ``tau`` (fixed float) or ``logit_scale`` (learnable scalar
    Tensor holding log(1/tau)) must be given.  Returns (raw loss Tensor,
    stats dict); stats carry the 2n-normalized value and per-direction means.
    """
    if not isinstance(sim, Tensor):
        sim = Tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"contrastive_loss: similarity matrix must be square, got {sim.shape}")
    n = sim.shape[0]
    if (tau is None) == (logit_scale is None):
        raise UsageError("pass exactly one of tau / logit_scale")
    if tau is not None:
        if tau <= 0:
            raise DegenerateInputError("tau must be positive")
        logits = de.scale(sim, 1.0 / float(tau))
    else:
        logits = de.mul(sim, de.exp(logit_scale))
    rows = de.log_softmax(logits, axis=1)
    cols = de.log_softmax(logits, axis=0)
    if literal_form:
        rows, cols = de.exp(rows), de.exp(cols)
    loss_rows = de.scale(de.sum_all(de.take_diag(rows)), -1.0)
    loss_cols = de.scale(de.sum_all(de.take_diag(cols)), -1.0)
    loss = de.add(loss_rows, loss_cols)
    stats = {
        "loss_raw": loss.item(),
        "loss_norm": loss.item() / (2 * n),
        "loss_s_to_m": loss_rows.item() / n,
        "loss_m_to_s": loss_cols.item() / n,
        "batch_size": n,
    }
    return loss, stats


class Adam:
    """Adam with the usual defaults; lr is supplied per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * (p.grad * p.grad)
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def learning_rate(step, total_steps, cfg):
    """Linear warmup from base to peak over the warmup fraction, then constant."""
    warmup_steps = max(int(round(cfg.warmup_frac * total_steps)), 1)
    frac = min(step / warmup_steps, 1.0)
    return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * frac


def train_step(ckpt, batch, optimizer, lr, literal_form=False):
    """One optimization step over a batch dict(obs, loco, act)."""
    if len(batch["obs"]) < 2:
        raise UsageError("train_step needs a batch of at least 2 samples")
    optimizer.zero_grad()
    with Tape() as tape:
        v_s, v_m = encoders.forward_embeddings(ckpt, batch["obs"], batch["loco"], batch["act"])
        sim = similarity_matrix(v_s, v_m)
        loss, stats = contrastive_loss(
            sim, logit_scale=ckpt.params["logit_scale"], literal_form=literal_form
        )
    if not np.isfinite(loss.data):
        raise NumericalError(
            f"training loss became non-finite (batch={len(batch['obs'])}, lr={lr:.3g}, tau={ckpt.tau():.4f})"
        )
    stats["tau"] = ckpt.tau()
    de.backward(tape, loss)
    optimizer.step(lr)
    encoders.clamp_temperature(ckpt)
    return stats


def iter_batches(n, batch_size, rng):
    """Seed-deterministic permutation chunked into batches (singletons dropped)."""
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        chunk = perm[lo : lo + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _count_steps(n, batch_size):
    return sum(1 for lo in range(0, n, batch_size) if min(batch_size, n - lo) >= 2)


def pretrain(dataset, model_cfg, train_cfg, out_dir=None, log=None):
    """Run the full contrastive pre-training loop.

    Returns (checkpoint, curve) where curve is a list of per-step records
    ``{step, epoch, lr, loss_raw, loss_norm, tau}``.  When ``out_dir`` is
    given, the loss curve CSV plus final/best checkpoints are written there.
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot pretrain on an empty dataset")
    ckpt = encoders.init_params(model_cfg, train_cfg.seed)
    optimizer = Adam(ckpt.trainable())
    steps_per_epoch = _count_steps(n, train_cfg.batch_size)
    if steps_per_epoch == 0:
        raise UsageError("dataset smaller than the minimum contrastive batch (2)")
    total_steps = steps_per_epoch * train_cfg.epochs
    curve = []
    best = (np.inf, None)
    step = 0
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([_SHUFFLE_STREAM, train_cfg.seed, epoch])
        epoch_losses = []
        for idx in iter_batches(n, train_cfg.batch_size, rng):
            batch = {"obs": dataset.obs[idx], "loco": dataset.loco[idx], "act": dataset.act[idx]}
            lr = learning_rate(step, total_steps, train_cfg)
            stats = train_step(ckpt, batch, optimizer, lr, literal_form=train_cfg.literal_form)
            curve.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_raw": stats["loss_raw"],
                    "loss_norm": stats["loss_norm"],
                    "tau": stats["tau"],
                }
            )
            epoch_losses.append(stats["loss_norm"])
            step += 1
        epoch_mean = float(np.mean(epoch_losses))
        if log is not None:
            log(f"epoch {epoch + 1}/{train_cfg.epochs}: mean normalized loss {epoch_mean:.4f}")
        if epoch_mean < best[0]:
            best = (epoch_mean, {k: v.data.copy() for k, v in ckpt.params.items()})
    if out_dir is not None:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_curve(curve, out_dir / "loss_curve.csv")
        encoders.save_checkpoint(ckpt, out_dir / "checkpoint_final")
        if best[1] is not None:
            best_ckpt = encoders.init_params(model_cfg, train_cfg.seed)
            for k, v in best[1].items():
                best_ckpt.params[k].data = v
            encoders.save_checkpoint(best_ckpt, out_dir / "checkpoint_best")
    return ckpt, curve


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss_raw", "loss_norm", "tau"])
        for row in curve:
            writer.writerow(
                [row["step"], row["epoch"], f"{row['lr']:.8g}", f"{row['loss_raw']:.8g}",
                 f"{row['loss_norm']:.8g}", f"{row['tau']:.8g}"]
            )
