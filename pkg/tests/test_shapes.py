import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvcp import shapes
from hvcp.encoder import PointCloud
from hvcp.shapes import (DatasetManifest, ManifestError, ShapeError, ViewError, occupancy_oracle,
                         partial_view, sample_surface, view_mask)


def rows_in(a, b):
    """Whether every row of ``a`` appears (bit-exactly) as a row of ``b``."""
    vb = {r.tobytes() for r in np.ascontiguousarray(b)}
    return all(r.tobytes() in vb for r in np.ascontiguousarray(a))


# occupancy


def test_sphere_center_inside():
    assert occupancy_oracle(shapes.sphere((0, 0, 0), 0.4), (0.0, 0.0, 0.0)) == 1


def test_sphere_outside_radius():
    assert occupancy_oracle(shapes.sphere((0, 0, 0), 0.4), (0.41, 0.0, 0.0)) == 0


def test_boundary_counts_inside():
    assert occupancy_oracle(shapes.box((0, 0, 0), (0.25, 0.25, 0.25)), (0.25, 0.0, -0.25)) == 1
    assert occupancy_oracle(shapes.sphere((0, 0, 0), 0.25), (0.25, 0.0, 0.0)) == 1


def test_capsule_cap():
    cap = shapes.capsule((0, 0, 0), 0.1, 0.2)
    assert occupancy_oracle(cap, (0.0, 0.0, 0.29)) == 1
    assert occupancy_oracle(cap, (0.09, 0.0, 0.25)) == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_union_is_max_of_parts(seed):
    rng = np.random.default_rng(seed)
    spec = shapes.random_shape("union2", rng)
    a, b = shapes.parts(spec)
    q = rng.uniform(-0.5, 0.5, (1000, 3))
    expected = np.maximum(occupancy_oracle(a, q), occupancy_oracle(b, q))
    np.testing.assert_array_equal(occupancy_oracle(spec, q), expected)


@pytest.mark.parametrize("family", shapes.FAMILIES)
def test_random_shapes_fit(family):
    rng = np.random.default_rng(0)
    for _ in range(50):
        lo, hi = shapes.bounds(shapes.random_shape(family, rng))
        assert np.all(lo > -0.45) and np.all(hi < 0.45)


def test_shape_too_large_rejected():
    with pytest.raises(ShapeError):
        shapes.validate(shapes.sphere((0, 0, 0), 0.46))


def test_unknown_family_rejected():
    with pytest.raises(ShapeError):
        shapes.ShapeSpec("torus", (0.0,))


# surface sampling


def test_sphere_samples_on_surface():
    c = np.array([0.05, -0.1, 0.02])
    cloud = sample_surface(shapes.sphere(c, 0.3), 5000, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(cloud.positions - c, axis=1), 0.3, atol=1e-12)


@pytest.mark.parametrize("family", shapes.FAMILIES)
def test_normals_unit_length(family):
    spec = shapes.random_shape(family, np.random.default_rng(1))
    cloud = sample_surface(spec, 3000, np.random.default_rng(2))
    np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-9)


def test_box_face_frequencies_follow_area():
    h = np.array([0.1, 0.2, 0.35])
    n = 100_000
    cloud = sample_surface(shapes.box((0, 0, 0), h), n, np.random.default_rng(3))
    on_face = np.isclose(np.abs(cloud.positions), h, rtol=0, atol=1e-15)
    assert np.all(on_face.sum(axis=1) >= 1)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    expected = np.repeat(areas / (2 * areas.sum()), 2) * n
    counts = []
    for axis in range(3):
        counts += [np.sum(on_face[:, axis] & (cloud.positions[:, axis] < 0)),
                   np.sum(on_face[:, axis] & (cloud.positions[:, axis] > 0))]
    np.testing.assert_allclose(counts, expected, rtol=0.05)


def test_union_samples_not_hidden():
    spec = shapes.union2(shapes.sphere((-0.1, 0, 0), 0.2), shapes.box((0.1, 0, 0), (0.15, 0.15, 0.15)))
    cloud = sample_surface(spec, 4000, np.random.default_rng(4))
    a, b = shapes.parts(spec)
    # no point lies strictly inside the other part
    d_sphere = np.linalg.norm(cloud.positions - [-0.1, 0, 0], axis=1)
    inside_box = np.all(np.abs(cloud.positions - [0.1, 0, 0]) < 0.15 - 1e-12, axis=1)
    assert not np.any((d_sphere < 0.2 - 1e-12) & inside_box)


def test_sampling_deterministic():
    spec = shapes.random_shape("stool2mode", np.random.default_rng(5))
    a = sample_surface(spec, 500, np.random.default_rng(6))
    b = sample_surface(spec, 500, np.random.default_rng(6))
    assert a.positions.tobytes() == b.positions.tobytes()


def test_sampling_count_checked():
    with pytest.raises(ValueError):
        sample_surface(shapes.sphere((0, 0, 0), 0.2), 0, np.random.default_rng(0))


# partial views


@pytest.fixture(scope="module")
def dense_sphere():
    return sample_surface(shapes.sphere((0, 0, 0), 0.3), 100_000, np.random.default_rng(7))


def test_bottom_below_midpoint(dense_sphere):
    mid = (dense_sphere.positions[:, 2].min() + dense_sphere.positions[:, 2].max()) / 2
    part = partial_view(dense_sphere, "bottom", np.random.default_rng(0))
    assert part.positions[:, 2].max() < mid


def test_octant_count_and_cut(dense_sphere):
    part = partial_view(dense_sphere, "octant", np.random.default_rng(0))
    assert len(part) == 1024
    pos = dense_sphere.positions
    mid = (pos.min(axis=0) + pos.max(axis=0)) / 2
    assert part.positions[:, 0].max() < mid[0] and part.positions[:, 2].max() < mid[2]


def test_true_octant_adds_y_cut(dense_sphere):
    quarter = view_mask(dense_sphere.positions, "octant", "quarter").mean()
    octant = view_mask(dense_sphere.positions, "octant", "true").mean()
    assert quarter == pytest.approx(0.25, rel=0.05) and octant == pytest.approx(0.125, rel=0.05)


def test_bottom_keeps_half_of_sphere(dense_sphere):
    assert view_mask(dense_sphere.positions, "bottom").mean() == pytest.approx(0.5, rel=0.05)


def test_partial_is_subset(dense_sphere):
    part = partial_view(dense_sphere, "bottom", np.random.default_rng(1))
    assert rows_in(part.positions, dense_sphere.positions)


def test_kept_region_too_small():
    cloud = PointCloud(np.random.default_rng(0).uniform(-0.3, 0.3, (1500, 3)))
    with pytest.raises(ViewError):
        partial_view(cloud, "octant", np.random.default_rng(0))


def test_unknown_view_mode(dense_sphere):
    with pytest.raises(ViewError):
        partial_view(dense_sphere, "left", np.random.default_rng(0))


# stool


def test_stool_modes_share_bottom_half():
    base = shapes.random_shape("stool2mode", np.random.default_rng(8))
    rnd, sq = shapes.with_mode(base, shapes.ROUND_TOP), shapes.with_mode(base, shapes.SQUARE_TOP)
    lo_r, hi_r = shapes.bounds(rnd)
    lo_s, hi_s = shapes.bounds(sq)
    np.testing.assert_allclose([lo_r[2], hi_r[2]], [lo_s[2], hi_s[2]], rtol=0, atol=1e-15)
    z_mid = (lo_r[2] + hi_r[2]) / 2
    # the leg is the same primitive in both modes and both tops lie above z_mid
    assert shapes.parts(rnd)[0] == shapes.parts(sq)[0]
    q = np.random.default_rng(9).uniform(-0.5, 0.5, (20000, 3))
    below = q[q[:, 2] < z_mid]
    np.testing.assert_array_equal(occupancy_oracle(rnd, below), occupancy_oracle(sq, below))
    above = q[q[:, 2] > z_mid + 0.05]
    assert np.any(occupancy_oracle(rnd, above) != occupancy_oracle(sq, above))


def test_stool_low_samples_lie_on_shared_leg():
    base = shapes.random_shape("stool2mode", np.random.default_rng(10))
    clouds = [sample_surface(shapes.with_mode(base, m), 20000, np.random.default_rng(11))
              for m in (shapes.ROUND_TOP, shapes.SQUARE_TOP)]
    z_mid = sum(shapes.bounds(base)[i][2] for i in (0, 1)) / 2
    _, _, zc, r, hh = shapes.parts(base)[0].params
    for cloud in clouds:
        low = cloud.positions[cloud.positions[:, 2] < z_mid]
        # every low sample lies on the leg: its side or its bottom disc
        radial = np.hypot(low[:, 0], low[:, 1])
        on_side = np.abs(radial - r) < 1e-12
        on_disc = (np.abs(low[:, 2] - (zc - hh)) < 1e-12) & (radial <= r + 1e-12)
        assert np.all(on_side | on_disc)


# manifests and datasets


SMALL = DatasetManifest(seed=3, weights={"sphere": 0.5, "union2": 0.25, "stool2mode": 0.25}, train=3, val=2,
                        test=2, partial_mode="bottom", dense_points=8192)


def test_manifest_round_trip():
    assert DatasetManifest.parse(SMALL.serialize()) == SMALL


def test_manifest_weights_must_sum_to_one():
    with pytest.raises(ManifestError, match="sum to 1"):
        DatasetManifest.parse("weights=sphere:0.5,box:0.4\n")


@pytest.mark.parametrize("text", ["train=0\n", "partial_mode=left\n", "colour=red\n", "weights=torus:1\n",
                                  "train=x\n", "no equals sign\n", "near_surface=1.5\n",
                                  "near_sigma=0\n", "pair_modes=yes\n"])
def test_manifest_rejects(text):
    with pytest.raises(ManifestError):
        DatasetManifest.parse(text)


def test_near_surface_oversampling():
    base = DatasetManifest(seed=5, weights={"sphere": 1.0}, train=1, val=1, test=1, query_points=4000)
    plain, _ = shapes.make_item(base, "train", 0)
    near, dense = shapes.make_item(dataclasses.replace(base, near_surface=0.25, near_sigma=0.01), "train", 0)
    # the uniform block is drawn first, so it is unchanged apart from its length
    np.testing.assert_array_equal(near.queries[:3000], plain.queries[:3000])
    assert near.spec == plain.spec and len(near.queries) == 4000
    cx, cy, cz, r = near.spec.params
    dist = np.abs(np.linalg.norm(near.queries[3000:] - (cx, cy, cz), axis=1) - r)
    assert np.mean(dist < 0.03) > 0.9
    assert np.array_equal(near.occupancies, shapes.occupancy_oracle(near.spec, near.queries).astype(float))


def test_paired_modes():
    m = DatasetManifest(seed=2, weights={"stool2mode": 1.0}, train=4, val=2, test=2, pair_modes=True,
                        dense_points=8192)
    specs = [shapes.make_item(m, "train", i)[0].spec for i in range(4)]
    for a, b in (specs[:2], specs[2:]):
        assert a.params[:3] == b.params[:3] and a.params[3] + b.params[3] == 1.0
    assert specs[0].params[:3] != specs[2].params[:3]
    # both items of a pair show the identical view, which lies in the odd item's dense cloud
    even, _ = shapes.make_item(m, "train", 2)
    odd, dense = shapes.make_item(m, "train", 3)
    assert odd.partial.positions.tobytes() == even.partial.positions.tobytes()
    assert np.array_equal(dense.positions[: len(odd.partial.positions)], odd.partial.positions)
    assert np.all(occupancy_oracle(odd.spec, odd.partial.positions - 1e-9 * odd.partial.normals))
    # other splits are unchanged by the flag
    plain = dataclasses.replace(m, pair_modes=False)
    for i in range(2):
        paired, unpaired = shapes.make_item(m, "test", i)[0], shapes.make_item(plain, "test", i)[0]
        assert shapes.encode_item(paired) == shapes.encode_item(unpaired)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    counts = shapes.make_dataset(SMALL, root / "a")
    shapes.make_dataset(SMALL, root / "b")
    return root, counts


def test_dataset_counts(small_dataset):
    root, counts = small_dataset
    assert counts == {"train": 3, "val": 2, "test": 2}
    for split, n in counts.items():
        assert len(list((root / "a" / split).glob("*.hvsd"))) == n


def test_dataset_byte_identical(small_dataset):
    root, _ = small_dataset
    files = sorted(p.relative_to(root / "a") for p in (root / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes()


def test_stored_occupancy_matches_oracle(small_dataset):
    root, _ = small_dataset
    for split in shapes.SPLITS:
        for item in shapes.load_split(root / "a", split):
            assert len(item.queries) == 2048 and set(np.unique(item.occupancies)) <= {0.0, 1.0}
            np.testing.assert_array_equal(item.occupancies, occupancy_oracle(item.spec, item.queries))


def test_item_shapes_and_subset(small_dataset):
    root, _ = small_dataset
    for item in shapes.load_split(root / "a", "train"):
        assert len(item.complete) == 2048 and len(item.partial) == 1024
        _, dense = shapes.make_item(SMALL, "train", 0)
        break
    item, dense = shapes.make_item(SMALL, "train", 1)
    assert rows_in(item.partial.positions, dense.positions)
    assert rows_in(item.complete.positions, dense.positions)


def test_manifest_file_written(small_dataset):
    root, _ = small_dataset
    assert shapes.load_manifest(root / "a") == SMALL


def test_item_record_round_trip():
    item, _ = shapes.make_item(SMALL, "val", 1)
    data = shapes.encode_item(item)
    assert data[:4] == b"HVSD"
    back = shapes.decode_item(data)
    assert back.spec == item.spec
    assert back.partial.positions.tobytes() == item.partial.positions.tobytes()
    assert shapes.encode_item(back) == data


def test_octant_dataset_partials():
    m = DatasetManifest(seed=1, weights={"box": 1.0}, train=1, val=1, test=1, partial_mode="octant",
                        dense_points=8192)
    item, dense = shapes.make_item(m, "test", 0)
    assert len(item.partial) == 1024
    assert np.all(view_mask(dense.positions, "octant")[
        [np.flatnonzero((dense.positions == p).all(axis=1))[0] for p in item.partial.positions[:20]]])
