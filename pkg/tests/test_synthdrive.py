"""Generator checks: terrain determinism, dynamics causality, dataset splits."""

import math

import numpy as np
import pytest

from terralign import synthdrive as sd
from terralign import trajectory as tj
from terralign.errors import UsageError
from terralign.trajectory import channel_offsets

OFFS = channel_offsets()
VERT = OFFS["linacc"][0] + 2
RPM = OFFS["rpm"]
QUAT = (OFFS["pose"][0] + 3, OFFS["pose"][1])


def test_single_class_zero_band_is_uniformly_smooth():
    field = sd.generate_terrain(0, classes=1, bands=[(0.0, 0.0)])
    assert np.all(field.roughness == 0.0)
    assert np.all(field.class_map == 0)


def test_same_seed_identical_terrain():
    a = sd.generate_terrain(4, classes=4)
    b = sd.generate_terrain(4, classes=4)
    assert np.array_equal(a.roughness, b.roughness)
    assert np.array_equal(a.class_map, b.class_map)
    c = sd.generate_terrain(5, classes=4)
    assert not np.array_equal(a.class_map, c.class_map)


def test_class_bands_disjoint_and_ordered():
    for k in (1, 2, 4, 7):
        bands = sd.class_bands(k)
        for lo, hi in bands:
            assert 0.0 <= lo <= hi <= 1.0
        for (lo_a, hi_a), (lo_b, hi_b) in zip(bands[:-1], bands[1:]):
            assert hi_a < lo_b
    field = sd.generate_terrain(1, classes=4)
    for j in range(4):
        cells = field.roughness[field.class_map == j]
        lo, hi = sd.class_bands(4)[j]
        assert cells.min() >= lo and cells.max() <= hi


def test_zero_throttle_means_zero_displacement():
    cfg = sd.SynthConfig(seed=2, duration_s=8.0, throttle_range=(0.0, 0.0))
    terrain = sd.generate_terrain(cfg.seed, cfg.classes)
    traj = sd.generate_trajectory(terrain, cfg, seed=1)
    pose = traj.loco.values[:, :2]
    assert np.all(pose == pose[0])
    vert = traj.loco.values[:, VERT].astype(np.float64)
    # v = 0, so sigma = noise floor exactly
    assert abs(vert.std() - cfg.noise_floor) < 4 * cfg.noise_floor / math.sqrt(2 * len(vert))


def test_smooth_terrain_noise_floor_statistics():
    cfg = sd.SynthConfig(seed=3, duration_s=120.0)
    terrain = sd.generate_terrain(cfg.seed, 1, bands=[(0.0, 0.0)])
    traj = sd.generate_trajectory(terrain, cfg, seed=9)
    vert = traj.loco.values[:, VERT].astype(np.float64)
    assert len(vert) >= 10_000
    se = cfg.noise_floor / math.sqrt(2 * len(vert))
    assert abs(vert.std(ddof=1) - cfg.noise_floor) <= 3 * se


def test_rougher_terrain_increases_vertical_variance():
    cfg = sd.SynthConfig(seed=4, duration_s=30.0)
    variances = []
    for r in (0.2, 0.8):
        terrain = sd.generate_terrain(cfg.seed, 1, bands=[(r, r)])
        traj = sd.generate_trajectory(terrain, cfg, seed=11)
        variances.append(traj.loco.values[:, VERT].astype(np.float64).var())
    assert variances[1] > variances[0]


def test_actions_respect_valid_ranges():
    cfg = sd.SynthConfig(seed=5, duration_s=20.0)
    terrain = sd.generate_terrain(cfg.seed, cfg.classes)
    traj = sd.generate_trajectory(terrain, cfg, seed=13)
    act = traj.action.values
    assert act[:, 0].min() >= 0.0 and act[:, 0].max() <= 1.0
    assert act[:, 1].min() >= -1.0 and act[:, 1].max() <= 1.0


def test_quaternions_unit_norm_every_frame():
    cfg = sd.SynthConfig(seed=6, duration_s=15.0)
    terrain = sd.generate_terrain(cfg.seed, cfg.classes)
    traj = sd.generate_trajectory(terrain, cfg, seed=17)
    quat = traj.loco.values[:, QUAT[0] : QUAT[1]].astype(np.float64)
    np.testing.assert_allclose(np.linalg.norm(quat, axis=1), 1.0, atol=1e-6)


def test_terminal_speed_bound():
    cfg = sd.SynthConfig(seed=7, duration_s=40.0, throttle_range=(1.0, 1.0))
    terrain = sd.generate_terrain(cfg.seed, 1, bands=[(0.0, 0.0)])
    traj = sd.generate_trajectory(terrain, cfg, seed=19)
    speed = traj.loco.values[:, RPM[0]].astype(np.float64) * math.pi * cfg.wheel_diameter / 60.0
    assert speed.max() <= cfg.a_max / cfg.drag + 1e-6


def test_vehicle_leaving_world_truncates_trajectory():
    cfg = sd.SynthConfig(seed=8, duration_s=60.0, world_size=40.0,
                         steering_range=(0.0, 0.0), throttle_range=(1.0, 1.0))
    terrain = sd.generate_terrain(cfg.seed, cfg.classes, world_size=40.0)
    traj = sd.generate_trajectory(terrain, cfg, seed=23)
    assert traj.loco.timestamps[-1] < cfg.duration_s
    x = traj.loco.values[:, 0]
    y = traj.loco.values[:, 1]
    assert np.all((x >= 0) & (x < 40.0) & (y >= 0) & (y < 40.0))


def test_images_reflect_terrain_class_statistics():
    cfg = sd.SynthConfig(seed=9, duration_s=10.0)
    rng = np.random.default_rng(0)
    means = []
    for cls in range(4):
        patch = sd.render_patch(cls, 4, cfg.image_h, cfg.image_w, rng)
        assert patch.min() >= 0.0 and patch.max() <= 1.0
        means.append(patch.mean())
    assert all(b > a for a, b in zip(means[:-1], means[1:]))


def test_per_trajectory_triplet_count_at_defaults():
    cfg = sd.SynthConfig(seed=10, duration_s=30.0)
    data = sd.generate_dataset(cfg, n_traj=4, split_ratios=(0.5, 0.5))
    total = len(data["train"]) + len(data["test"])
    assert total == 4 * 13  # floor((30 - 6) / 2) + 1 per trajectory


def test_generate_dataset_is_byte_deterministic(tmp_path):
    cfg = sd.SynthConfig(seed=11, duration_s=12.0)
    sd.generate_dataset(cfg, n_traj=4, out_dir=tmp_path / "a")
    sd.generate_dataset(cfg, n_traj=4, out_dir=tmp_path / "b")
    for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_split_trajectory_ids_disjoint(tmp_path):
    cfg = sd.SynthConfig(seed=12, duration_s=12.0)
    data = sd.generate_dataset(cfg, n_traj=6, out_dir=tmp_path)
    train_ids = {s["source_id"] for s in data["train"].manifest.samples}
    test_ids = {s["source_id"] for s in data["test"].manifest.samples}
    assert train_ids and test_ids
    assert train_ids.isdisjoint(test_ids)
    loaded = tj.load_dataset(tmp_path / "test")
    assert {s["source_id"] for s in loaded.manifest.samples} == test_ids


def test_generate_dataset_needs_two_trajectories():
    with pytest.raises(UsageError):
        sd.generate_dataset(sd.SynthConfig(), n_traj=1)
