"""Point cloud containers, farthest point sampling against the naive
reference, normalization round trips, and the NPCD binary format."""

import numpy as np
import pytest

from npdiff import pointcloud as pc
from npdiff.errors import FormatError
from oracles import fps_reference


def rng(seed=0):
    return np.random.default_rng(seed)


def random_cloud(m=16, d=4, seed=0):
    r = rng(seed)
    return pc.NeuralPointCloud(r.uniform(-1, 1, (m, 3)), r.standard_normal((m, d)))


# ---------------------------------------------------------------------------
# containers

def test_cloud_validation():
    with pytest.raises(ValueError):
        pc.NeuralPointCloud(np.ones((4, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        pc.NeuralPointCloud(np.ones((4, 3)), np.ones((3, 2)))
    bad = np.ones((4, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        pc.NeuralPointCloud(bad, np.ones((4, 2)))


def test_feature_init_modes():
    r = rng(1)
    positions = r.uniform(-1, 1, (8, 3))
    zero = pc.cloud_with_zero_features(positions, 5)
    assert zero.d == 5 and np.all(zero.features == 0.0)
    rand = pc.cloud_with_random_features(positions, 5, rng(2))
    rand2 = pc.cloud_with_random_features(positions, 5, rng(2))
    assert np.array_equal(rand.features, rand2.features)
    assert rand.features.std() > 0.5


def test_variational_cloud_clamps_logvars():
    r = rng(3)
    v = pc.VariationalNeuralPointCloud(
        r.uniform(-1, 1, (4, 3)), r.standard_normal((4, 2)),
        np.array([[-50.0, 0.0], [5.0, 50.0], [0.0, 0.0], [-1.0, 2.0]]),
    )
    assert v.feature_logvars.min() == pc.LOGVAR_MIN
    assert v.feature_logvars.max() == pc.LOGVAR_MAX
    mean = v.mean_cloud()
    assert np.array_equal(mean.features, v.feature_means)


# ---------------------------------------------------------------------------
# farthest point sampling

def test_fps_trivial_cases():
    pts = rng(4).uniform(-1, 1, (6, 3))
    assert np.array_equal(pc.farthest_point_sampling(pts, 1), [0])
    assert sorted(pc.farthest_point_sampling(pts, 6)) == list(range(6))


def test_fps_two_points_on_a_line():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [2.0, 0, 0]])
    # farthest from index 0 is x=3 (index 2); next is x=1 or x=2, min-dists 1 vs 1: tie -> lowest index
    assert np.array_equal(pc.farthest_point_sampling(pts, 3), [0, 2, 1])


def test_fps_matches_reference_on_random_clouds():
    for seed in range(20):
        r = rng(seed)
        n = int(r.integers(2, 9))
        pts = r.uniform(-1, 1, (n, 3))
        m = int(r.integers(1, n + 1))
        assert np.array_equal(pc.farthest_point_sampling(pts, m), fps_reference(pts, m))


def test_fps_tie_breaking_matches_reference():
    # symmetric square: lots of exact distance ties
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0],
                    [0.5, 0.5, 0], [0.0, 0, 0]])
    for m in range(1, 7):
        assert np.array_equal(pc.farthest_point_sampling(pts, m), fps_reference(pts, m))


def test_fps_validates_m():
    pts = np.zeros((3, 3))
    with pytest.raises(ValueError):
        pc.farthest_point_sampling(pts, 0)
    with pytest.raises(ValueError):
        pc.farthest_point_sampling(pts, 4)


# ---------------------------------------------------------------------------
# normalization

def test_normalization_pooled_moments():
    clouds = [random_cloud(m, 4, seed) for seed, m in enumerate([16, 9, 25])]
    stats = pc.compute_normalization(clouds)
    normed = [pc.normalize(c, stats) for c in clouds]
    pos = np.concatenate([c.positions for c in normed])
    assert np.allclose(pos.mean(axis=0), 0.0, atol=1e-12)
    assert np.isclose(np.sqrt(np.mean(pos ** 2)), 1.0, atol=1e-12)
    feats = np.concatenate([c.features for c in normed])
    assert np.isclose(feats.min(), -1.0) and np.isclose(feats.max(), 1.0)
    assert feats.min() >= -1.0 and feats.max() <= 1.0


def test_normalize_round_trip():
    clouds = [random_cloud(12, 6, s) for s in range(3)]
    stats = pc.compute_normalization(clouds)
    for c in clouds:
        back = pc.denormalize(pc.normalize(c, stats), stats)
        assert np.allclose(back.positions, c.positions, atol=1e-12)
        assert np.allclose(back.features, c.features, atol=1e-12)


def test_constant_feature_dim_maps_to_zero_and_back():
    r = rng(5)
    clouds = []
    for s in range(2):
        f = r.standard_normal((8, 3))
        f[:, 1] = 7.25  # constant across the whole dataset
        clouds.append(pc.NeuralPointCloud(r.uniform(-1, 1, (8, 3)), f))
    stats = pc.compute_normalization(clouds)
    normed = pc.normalize(clouds[0], stats)
    assert np.all(normed.features[:, 1] == 0.0)
    back = pc.denormalize(normed, stats)
    assert np.all(back.features[:, 1] == 7.25)


def test_stats_json_round_trip(tmp_path):
    stats = pc.compute_normalization([random_cloud(10, 4, 7)])
    path = tmp_path / "stats.json"
    stats.save(path)
    loaded = pc.NormalizationStats.load(path)
    assert np.array_equal(loaded.position_mean, stats.position_mean)
    assert loaded.position_scale == stats.position_scale
    assert np.array_equal(loaded.feature_min, stats.feature_min)
    assert np.array_equal(loaded.feature_max, stats.feature_max)
    with pytest.raises(FormatError):
        pc.NormalizationStats.from_json({"position_mean": [0, 0, 0]})


def test_normalized_clip_bounds_cover_dataset():
    clouds = [random_cloud(10, 4, s) for s in range(4)]
    stats = pc.compute_normalization(clouds)
    pos_lo, pos_hi, feat_lo, feat_hi = pc.normalized_clip_bounds(clouds, stats)
    assert np.allclose(feat_lo, -1.0) and np.allclose(feat_hi, 1.0)
    for c in clouds:
        n = pc.normalize(c, stats)
        assert np.all(n.positions >= pos_lo - 1e-12) and np.all(n.positions <= pos_hi + 1e-12)


# ---------------------------------------------------------------------------
# NPCD binary format

def test_npcd_round_trip_exact_at_float32(tmp_path):
    r = rng(8)
    cloud = pc.NeuralPointCloud(
        r.uniform(-1, 1, (17, 3)).astype(np.float32),
        r.standard_normal((17, 5)).astype(np.float32),
    )
    path = tmp_path / "cloud.npcd"
    pc.save_npcd(cloud, path)
    loaded = pc.load_npcd(path)
    assert loaded.m == 17 and loaded.d == 5
    assert np.array_equal(loaded.positions.astype(np.float32), cloud.positions.astype(np.float32))
    assert np.array_equal(loaded.features.astype(np.float32), cloud.features.astype(np.float32))


def test_npcd_header_layout(tmp_path):
    cloud = random_cloud(3, 2, 9)
    path = tmp_path / "cloud.npcd"
    pc.save_npcd(cloud, path)
    raw = path.read_bytes()
    assert raw[:4] == b"NPCD"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3
    assert int.from_bytes(raw[12:16], "little") == 2
    assert len(raw) == 16 + 4 * 3 * (3 + 2)


def test_npcd_rejects_bad_files(tmp_path):
    good = tmp_path / "good.npcd"
    pc.save_npcd(random_cloud(4, 2, 10), good)
    bad_magic = tmp_path / "bad_magic.npcd"
    bad_magic.write_bytes(b"XXXX" + good.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        pc.load_npcd(bad_magic)
    truncated = tmp_path / "trunc.npcd"
    truncated.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        pc.load_npcd(truncated)
    trailing = tmp_path / "trail.npcd"
    trailing.write_bytes(good.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        pc.load_npcd(trailing)
