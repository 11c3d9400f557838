"""Similarity matrix, symmetric loss, schedule, and training-loop checks."""

import math

import numpy as np
import pytest

from terralign import contrastive, diffengine as de, encoders
from terralign.errors import DegenerateInputError, NumericalError, UsageError
from tests.conftest import tiny_batch, tiny_model_config


def test_similarity_identity_for_orthonormal_rows():
    v = np.eye(4, dtype=np.float32)
    s = contrastive.similarity_matrix(v, v).data
    np.testing.assert_allclose(s, np.eye(4), atol=1e-6)


def test_similarity_hand_dot_products():
    vs = np.array([[1.0, 0.0], [0.0, 1.0]])
    vm = np.array([[1.0, 1.0], [1.0, 0.0]])
    s = contrastive.similarity_matrix(vs, vm).data
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(s, [[r, 1.0], [r, 0.0]], atol=1e-4)


def test_similarity_scale_invariance():
    rng = np.random.default_rng(0)
    vs = rng.standard_normal((5, 8)).astype(np.float32)
    vm = rng.standard_normal((5, 8)).astype(np.float32)
    base = contrastive.similarity_matrix(vs, vm).data
    # power-of-two scaling is exact in binary floating point: bitwise equality
    scaled = vs.copy()
    scaled[2] *= 4.0
    assert np.array_equal(contrastive.similarity_matrix(scaled, vm).data, base)
    # arbitrary positive scaling agrees to rounding
    scaled = vs.copy()
    scaled[1] *= 2.7
    np.testing.assert_allclose(contrastive.similarity_matrix(scaled, vm).data, base, atol=1e-6)


def test_similarity_entries_bounded():
    rng = np.random.default_rng(1)
    s = contrastive.similarity_matrix(
        rng.standard_normal((6, 16)), rng.standard_normal((6, 16))
    ).data
    assert np.all(s <= 1 + 1e-5) and np.all(s >= -1 - 1e-5)


def test_similarity_rejects_zero_rows():
    vs = np.zeros((2, 4), dtype=np.float32)
    with pytest.raises(DegenerateInputError):
        contrastive.similarity_matrix(vs, np.ones((2, 4), dtype=np.float32))


# ---------------------------------------------------------------------------
# loss values
# ---------------------------------------------------------------------------


def test_uniform_similarity_gives_log_n():
    for tau in (0.07, 0.5, 1.0):
        loss, stats = contrastive.contrastive_loss(np.full((8, 8), 0.3, dtype=np.float32), tau=tau)
        assert abs(stats["loss_norm"] - math.log(8)) < 1e-4
        assert abs(stats["loss_raw"] - 33.27107) < 1e-3


def test_perfect_separation_limit():
    s = 2 * np.eye(4, dtype=np.float32) - np.ones((4, 4), dtype=np.float32)
    _, stats = contrastive.contrastive_loss(s, tau=0.02)
    assert stats["loss_norm"] < 1e-6


def test_two_sample_identity_at_unit_temperature():
    _, stats = contrastive.contrastive_loss(np.eye(2, dtype=np.float32), tau=1.0)
    assert abs(stats["loss_norm"] - math.log(1 + math.exp(-1))) < 1e-4


def test_loss_symmetry_under_transpose():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((6, 6)).astype(np.float32)
    _, stats = contrastive.contrastive_loss(s, tau=0.3)
    _, stats_t = contrastive.contrastive_loss(s.T.copy(), tau=0.3)
    assert abs(stats["loss_raw"] - stats_t["loss_raw"]) < 1e-4
    assert abs(stats["loss_s_to_m"] - stats_t["loss_m_to_s"]) < 1e-5


def test_loss_nonnegative(rng):
    for _ in range(10):
        s = rng.uniform(-1, 1, (5, 5)).astype(np.float32)
        _, stats = contrastive.contrastive_loss(s, tau=0.5)
        assert stats["loss_norm"] >= 0


def test_increasing_diagonal_never_increases_loss(rng):
    s = rng.uniform(-1, 1, (6, 6)).astype(np.float32)
    _, base = contrastive.contrastive_loss(s, tau=0.4)
    for i in range(6):
        bumped = s.copy()
        bumped[i, i] += 0.2
        _, stats = contrastive.contrastive_loss(bumped, tau=0.4)
        assert stats["loss_raw"] <= base["loss_raw"] + 1e-6


def test_literal_form_differs_from_corrected():
    s = np.full((4, 4), 0.5, dtype=np.float32)
    _, corrected = contrastive.contrastive_loss(s, tau=1.0)
    _, literal = contrastive.contrastive_loss(s, tau=1.0, literal_form=True)
    assert abs(corrected["loss_norm"] - math.log(4)) < 1e-5
    # literal form is the negative softmax probability itself: -1/n per term
    assert abs(literal["loss_norm"] + 0.25) < 1e-5


def test_loss_rejects_bad_temperature():
    s = np.eye(2, dtype=np.float32)
    with pytest.raises(DegenerateInputError):
        contrastive.contrastive_loss(s, tau=0.0)
    with pytest.raises(UsageError):
        contrastive.contrastive_loss(s)


def full_batch_loss_check(step, seed=5, batch_seed=99):
    """End-to-end gradient of the batch loss against the central-difference oracle.

    The check point (seed, batch) is frozen at one where no relu preactivation
    falls inside the finite-difference window; at a kink the two-sided quotient
    measures a different (valid sub-)gradient and the comparison is meaningless.
    """
    rng = np.random.default_rng(batch_seed)
    ckpt = encoders.init_params(tiny_model_config(), seed=seed)
    batch = tiny_batch(rng, n=4)
    names = list(ckpt.params)

    def loss_of(*tensors):
        for name, t in zip(names, tensors):
            ckpt.params[name] = t
        v_s, v_m = encoders.forward_embeddings(ckpt, batch["obs"], batch["loco"], batch["act"])
        sim = contrastive.similarity_matrix(v_s, v_m)
        loss, _ = contrastive.contrastive_loss(sim, logit_scale=ckpt.params["logit_scale"])
        return loss

    inputs = [ckpt.params[n].data.copy() for n in names]
    return de.grad_check(loss_of, inputs, step=step)


def test_full_loss_gradient_matches_finite_differences():
    assert full_batch_loss_check(step=3e-4) <= 1e-3


def test_full_loss_gradient_in_verification_precision():
    with de.precision("float64"):
        assert full_batch_loss_check(step=1e-5) <= 1e-6


# ---------------------------------------------------------------------------
# schedule and loop
# ---------------------------------------------------------------------------


def test_learning_rate_schedule_endpoints():
    cfg = contrastive.TrainConfig(epochs=20, warmup_frac=0.5)
    total = 100
    assert contrastive.learning_rate(0, total, cfg) == pytest.approx(1e-4)
    assert contrastive.learning_rate(50, total, cfg) == pytest.approx(1e-3)
    assert contrastive.learning_rate(99, total, cfg) == pytest.approx(1e-3)
    mid = contrastive.learning_rate(25, total, cfg)
    assert 1e-4 < mid < 1e-3


def test_batch_iteration_is_seed_deterministic():
    rng_a = np.random.default_rng([1, 2])
    rng_b = np.random.default_rng([1, 2])
    a = [list(idx) for idx in contrastive.iter_batches(10, 4, rng_a)]
    b = [list(idx) for idx in contrastive.iter_batches(10, 4, rng_b)]
    assert a == b
    flat = [i for chunk in a for i in chunk]
    assert sorted(flat) == list(range(10))


def test_singleton_tail_batch_dropped():
    rng = np.random.default_rng(0)
    chunks = list(contrastive.iter_batches(5, 2, rng))
    assert [len(c) for c in chunks] == [2, 2]


def test_train_step_is_deterministic(rng):
    batch = tiny_batch(rng, n=4)

    def one_step():
        ckpt = encoders.init_params(tiny_model_config(), seed=7)
        opt = contrastive.Adam(ckpt.trainable())
        stats = contrastive.train_step(ckpt, batch, opt, lr=1e-3)
        return stats["loss_raw"], ckpt

    loss_a, ckpt_a = one_step()
    loss_b, ckpt_b = one_step()
    assert abs(loss_a - loss_b) < 1e-6
    for name in ckpt_a.params:
        assert np.array_equal(ckpt_a.params[name].data, ckpt_b.params[name].data)


def test_batch_of_identical_samples_gives_log_n(rng):
    ckpt = encoders.init_params(tiny_model_config(), seed=7)
    opt = contrastive.Adam(ckpt.trainable())
    one = tiny_batch(rng, n=1)
    batch = {k: np.repeat(v, 6, axis=0) for k, v in one.items()}
    stats = contrastive.train_step(ckpt, batch, opt, lr=0.0)
    assert abs(stats["loss_norm"] - math.log(6)) < 1e-4


def test_nan_loss_aborts_with_numerical_error(rng):
    ckpt = encoders.init_params(tiny_model_config(), seed=7)
    ckpt.params["logit_scale"].data = np.asarray(1000.0, dtype=np.float32)
    opt = contrastive.Adam(ckpt.trainable())
    with pytest.raises(NumericalError):
        contrastive.train_step(ckpt, tiny_batch(rng, n=4), opt, lr=1e-3)


def _toy_dataset(rng, n=12):
    from terralign.trajectory import TripletDataset, TripletSample

    samples = [
        TripletSample(
            o=rng.random((8, 8)).astype(np.float32),
            s=rng.standard_normal((12, 5)).astype(np.float32),
            c=rng.random((12, 2)).astype(np.float32),
            source_id=f"t{i}",
            t0=float(i),
        )
        for i in range(n)
    ]
    return TripletDataset.from_samples(samples, {"lo_hz": 2.0, "hi_hz": 20.0, "cam_hz": 1.0})


def test_pretrain_records_schedule_and_losses(rng, tmp_path):
    ds = _toy_dataset(rng)
    cfg = contrastive.TrainConfig(batch_size=4, epochs=4, seed=1)
    ckpt, curve = contrastive.pretrain(ds, tiny_model_config(), cfg, out_dir=tmp_path)
    assert len(curve) == 3 * 4
    assert curve[0]["lr"] == pytest.approx(1e-4)
    assert curve[-1]["lr"] == pytest.approx(1e-3)
    assert (tmp_path / "loss_curve.csv").exists()
    assert (tmp_path / "checkpoint_final" / "model.bin").exists()
    assert (tmp_path / "checkpoint_best" / "model.bin").exists()
    header = (tmp_path / "loss_curve.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,loss_raw,loss_norm,tau"
    reloaded = encoders.load_checkpoint(tmp_path / "checkpoint_final")
    for name in ckpt.params:
        assert np.array_equal(reloaded.params[name].data, ckpt.params[name].data)


def test_pretrain_empty_dataset_rejected(rng):
    ds = _toy_dataset(rng, n=0)
    with pytest.raises(UsageError):
        contrastive.pretrain(ds, tiny_model_config(), contrastive.TrainConfig())


def test_mask_action_training_gives_distinct_checkpoint(rng):
    ds = _toy_dataset(rng)
    cfg = contrastive.TrainConfig(batch_size=4, epochs=2, seed=1)
    full, _ = contrastive.pretrain(ds, tiny_model_config(), cfg)
    masked, _ = contrastive.pretrain(ds, tiny_model_config(mask_action=True), cfg)
    assert masked.config.mask_action
    assert any(
        not np.array_equal(full.params[n].data, masked.params[n].data) for n in full.params
    )
