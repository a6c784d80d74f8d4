import math

import numpy as np
import pytest

from mvlidar.errors import ShapeMismatch
from mvlidar.pointcloud import (SEG_CAR, SEG_ROAD, SEG_UNKNOWN, PointCloud,
                                PointLabels, TAXONOMY_SEG7)
from mvlidar.projection import (BevConfig, RangeImageConfig, bev_rasterize,
                                bev_cell_of_point, build_bev_grid, knn_smooth,
                                point_bins, reproject_semantics,
                                spherical_project, unproject_labels)

from oracles import brute_range_bins

SYM_FOV = RangeImageConfig(n_rows=64, n_cols=2048,
                           fov_up=math.radians(15), fov_down=math.radians(-15))


def cloud_of(rows):
    return PointCloud.from_array(np.asarray(rows, np.float32))


def random_cloud(rng, n, spread=60.0):
    pts = np.empty((n, 4), np.float32)
    pts[:, 0] = rng.uniform(-spread, spread, n)
    pts[:, 1] = rng.uniform(-spread, spread, n)
    pts[:, 2] = rng.uniform(-4.0, 6.0, n)
    pts[:, 3] = rng.uniform(0, 1, n)
    return PointCloud.from_array(pts)


def test_empty_cloud(backend):
    img = spherical_project(cloud_of(np.zeros((0, 4))), SYM_FOV)
    assert img.n_occupied == 0 and img.n_dropped == 0
    assert not img.occupancy.any()


def test_single_forward_point_bins_to_center(backend):
    img = spherical_project(cloud_of([[10, 0, 0, 0.3]]), SYM_FOV)
    # azimuth 0 -> column n_cols/2; elevation 0, symmetric FOV -> row n_rows/2
    assert img.occupancy[32, 1024]
    assert img.index_map[32, 1024] == 0
    assert img.channels[0, 32, 1024] == pytest.approx(10.0)
    assert img.channels[1, 32, 1024] == pytest.approx(0.3)
    assert img.n_occupied == 1 and img.n_dropped == 0


def test_min_range_wins_cell(backend):
    img = spherical_project(cloud_of([[9, 0, 0, 0.1], [5, 0, 0, 0.2]]), SYM_FOV)
    assert img.n_occupied == 1
    assert img.channels[0, 32, 1024] == pytest.approx(5.0)
    assert img.index_map[32, 1024] == 1
    assert img.n_shadowed == 1


def test_range_tie_breaks_to_lower_index(backend):
    img = spherical_project(cloud_of([[7, 0, 0, 0.1], [7, 0, 0, 0.9]]), SYM_FOV)
    assert img.index_map[32, 1024] == 0


def test_origin_point_dropped(backend):
    img = spherical_project(cloud_of([[0, 0, 0, 0.0]]), SYM_FOV)
    assert img.n_dropped == 1 and img.n_occupied == 0


def test_out_of_fov_dropped(backend):
    img = spherical_project(cloud_of([[1, 0, 5, 0.5]]), SYM_FOV)  # elev ~ 79 deg
    assert img.n_dropped == 1


def test_fov_boundaries_inclusive(backend):
    f = math.radians(15)
    cloud = cloud_of([[10 * math.cos(f), 0, 10 * math.sin(f), 0.5],
                      [10 * math.cos(f), 0, -10 * math.sin(f), 0.5]])
    # pin the FOV to the exact elevations the projector computes from the
    # float32 data, so both points sit exactly on the boundary
    xyz = cloud.xyz.astype(np.float64)
    elev = np.arcsin(xyz[:, 2] / np.sqrt((xyz ** 2).sum(axis=1)))
    cfg = RangeImageConfig(n_rows=64, n_cols=2048,
                           fov_up=float(elev[0]), fov_down=float(elev[1]))
    img = spherical_project(cloud, cfg)
    assert img.n_dropped == 0
    rows = sorted(r for r, c in zip(*np.nonzero(img.occupancy)))
    assert rows == [0, 63]


def test_projection_matches_brute_force_oracle(backend, rng):
    cfg = RangeImageConfig(n_rows=16, n_cols=128)
    for _ in range(10):
        cloud = random_cloud(rng, int(rng.integers(50, 2000)))
        img = spherical_project(cloud, cfg)
        cells, dropped = brute_range_bins(cloud, cfg)
        assert img.n_dropped == len(dropped)
        assert img.n_occupied == len(cells)
        for (r, c), lst in cells.items():
            rng_min, idx = lst[0]
            assert img.index_map[r, c] == idx
            assert img.channels[0, r, c] == pytest.approx(rng_min, rel=1e-6)
        # accounting: dropped + winners + shadowed = total
        assert img.n_dropped + img.n_occupied + img.n_shadowed == len(cloud)


def test_unproject_assigns_cell_labels(backend):
    cloud = cloud_of([[10, 0, 0, 0.5], [10.5, 0, 0, 0.5], [1, 0, 5, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    grid = np.full((64, 2048), SEG_UNKNOWN, np.int32)
    grid[32, 1024] = SEG_CAR
    labels = unproject_labels(grid, img, cloud)
    # both same-cell points take the cell label (bleeding); dropped -> unknown
    assert labels.ids.tolist() == [SEG_CAR, SEG_CAR, SEG_UNKNOWN]


def test_unproject_project_identity_single_occupancy(backend, rng):
    cfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 3000)
    img = spherical_project(cloud, cfg)
    keep = img.index_map[img.occupancy]
    sub = PointCloud.from_array(cloud.data[keep])
    sub_img = spherical_project(sub, cfg)
    assert sub_img.n_occupied == len(sub)  # one point per cell now
    ids = rng.integers(0, 7, len(sub)).astype(np.int32)
    grid = np.full((16, 128), SEG_UNKNOWN, np.int32)
    rows, cols, _, valid = point_bins(sub, cfg)
    assert valid.all()
    grid[rows, cols] = ids
    labels = unproject_labels(grid, sub_img, sub)
    assert (labels.ids == ids).all()


def test_unproject_shape_mismatch(backend):
    cloud = cloud_of([[10, 0, 0, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    with pytest.raises(ShapeMismatch):
        unproject_labels(np.zeros((8, 8), np.int32), img, cloud)


# ---------------------------------------------------------------- kNN

def knn_scene():
    # four points sharing one range-image cell at increasing range
    cloud = cloud_of([[10.0, 0, 0, 0.5], [10.1, 0, 0, 0.5],
                      [10.2, 0, 0, 0.5], [10.3, 0, 0, 0.5]])
    labels = PointLabels.from_array(
        [SEG_ROAD, SEG_CAR, SEG_CAR, SEG_ROAD], TAXONOMY_SEG7)
    return cloud, labels


def test_knn_majority_vote(backend):
    cloud, labels = knn_scene()
    img = spherical_project(cloud, SYM_FOV)
    out = knn_smooth(labels, cloud, img, k=3, window=3, cutoff=1.0)
    # point 0's three nearest neighbours vote {car, car, road} -> car
    assert out.ids[0] == SEG_CAR


def test_knn_cutoff_excludes_far_neighbours(backend):
    cloud, labels = knn_scene()
    img = spherical_project(cloud, SYM_FOV)
    out = knn_smooth(labels, cloud, img, k=3, window=3, cutoff=0.15)
    # only the range-10.1 car neighbour is eligible for point 0 -> car wins 1:0
    assert out.ids[0] == SEG_CAR
    # point 3 only reaches the range-10.2 car -> car
    assert out.ids[3] == SEG_CAR


def test_knn_single_point_keeps_label(backend):
    cloud = cloud_of([[10, 0, 0, 0.5]])
    labels = PointLabels.from_array([SEG_ROAD], TAXONOMY_SEG7)
    img = spherical_project(cloud, SYM_FOV)
    out = knn_smooth(labels, cloud, img, k=5, window=5, cutoff=1.0)
    assert out.ids.tolist() == [SEG_ROAD]


def test_knn_identity_when_cells_isolated(backend, rng):
    cfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 500)
    img = spherical_project(cloud, cfg)
    keep = img.index_map[img.occupancy]
    sub = PointCloud.from_array(cloud.data[keep])
    sub_img = spherical_project(sub, cfg)
    labels = PointLabels.from_array(rng.integers(0, 7, len(sub)), TAXONOMY_SEG7)
    out = knn_smooth(labels, sub, sub_img, k=1, window=1, cutoff=1e9)
    assert (out.ids == labels.ids).all()


def test_knn_tie_keeps_current_label(backend):
    cloud = cloud_of([[10.0, 0, 0, 0.5], [10.1, 0, 0, 0.5], [10.2, 0, 0, 0.5]])
    labels = PointLabels.from_array([SEG_ROAD, SEG_CAR, SEG_ROAD], TAXONOMY_SEG7)
    img = spherical_project(cloud, SYM_FOV)
    out = knn_smooth(labels, cloud, img, k=2, window=3, cutoff=1.0)
    # votes for point 0: {car, road} tie -> current label road
    assert out.ids[0] == SEG_ROAD


def test_knn_backends_agree(rng):
    from mvlidar import _kernels as kernels
    if len(kernels.available_backends()) < 2:
        pytest.skip("only one backend built")
    cfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 4000)
    img = spherical_project(cloud, cfg)
    labels = PointLabels.from_array(rng.integers(0, 7, len(cloud)), TAXONOMY_SEG7)
    outs = []
    for b in kernels.available_backends():
        with kernels.backend(b):
            outs.append(knn_smooth(labels, cloud, img, k=5, window=5,
                                   cutoff=1.0).ids)
    assert (outs[0] == outs[1]).all()


def test_knn_validates_arguments(backend):
    cloud, labels = knn_scene()
    img = spherical_project(cloud, SYM_FOV)
    with pytest.raises(ValueError):
        knn_smooth(labels, cloud, img, k=0, window=3, cutoff=1.0)
    with pytest.raises(ValueError):
        knn_smooth(labels, cloud, img, k=1, window=4, cutoff=1.0)


# ---------------------------------------------------------------- BEV

def test_bev_single_point(backend):
    cfg = BevConfig()
    raster = bev_rasterize(cloud_of([[0.0, 0.0, 1.5, 0.4]]), cfg)
    assert raster.occupancy.sum() == 1
    i, j = np.argwhere(raster.occupancy)[0]
    assert raster.height[0, i, j] == pytest.approx(1.5)  # min z
    assert raster.height[1, i, j] == pytest.approx(1.5)  # max z
    assert raster.height[2, i, j] == pytest.approx(0.4)  # mean intensity
    assert raster.n_dropped == 0


def test_bev_two_point_stats(backend):
    cfg = BevConfig()
    raster = bev_rasterize(cloud_of([[10.0, 5.0, -0.2, 0.2],
                                     [10.01, 5.01, 1.0, 0.6]]), cfg)
    assert raster.occupancy.sum() == 1
    i, j = np.argwhere(raster.occupancy)[0]
    assert raster.height[0, i, j] == pytest.approx(-0.2)
    assert raster.height[1, i, j] == pytest.approx(1.0)
    assert raster.height[2, i, j] == pytest.approx(0.4)


def test_bev_extent_half_open(backend):
    cfg = BevConfig()
    raster = bev_rasterize(cloud_of([[40.0, 0.0, 0.0, 0.5],
                                     [-40.0, 0.0, 0.0, 0.5]]), cfg)
    # +40 exactly is outside (half-open upper); -40 exactly inside
    assert raster.n_dropped == 1
    assert raster.occupancy.sum() == 1


def test_bev_cell_indexing_convention():
    cfg = BevConfig(width_cells=8, length_cells=8, extent=8.0, out_stride=2)
    cells = bev_cell_of_point(cloud_of([[-4.0, -4.0, 0, 0.5],
                                        [3.99, 3.99, 0, 0.5]]), cfg)
    assert cells[0] == 0
    assert cells[1] == 63


def test_bev_point_lists_account_for_inside_points(backend, rng):
    cfg = BevConfig(width_cells=64, length_cells=64, extent=40.0, out_stride=4)
    cloud = random_cloud(rng, 5000, spread=30.0)
    raster = bev_rasterize(cloud, cfg)
    inside = int((raster.cell_of_point >= 0).sum())
    assert raster.n_inside == inside
    assert inside + raster.n_dropped == len(cloud)
    # point lists cover exactly the inside points
    assert raster.seg_starts[-1] == inside
    assert int(np.diff(raster.seg_starts).sum()) == inside
    # each cell's point list lands in that cell, in ascending point order
    for cell in rng.integers(0, 64 * 64, 30):
        pts = raster.points_in_cell(int(cell))
        assert (raster.cell_of_point[pts] == cell).all()
        assert (np.diff(pts) > 0).all()
        expect = np.flatnonzero(raster.cell_of_point == cell)
        assert (pts == expect).all()
    occupied = raster.occupancy.reshape(-1)
    minz, maxz = raster.height[0].reshape(-1), raster.height[1].reshape(-1)
    assert (minz[occupied] <= maxz[occupied]).all()
    assert set(raster.seg_cells.tolist()) == set(np.flatnonzero(occupied).tolist())


def test_reproject_one_hot_point(backend):
    cfg = BevConfig()
    cloud = cloud_of([[10, 0, 0, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    probs = np.zeros((7, 64, 2048), np.float32)
    probs[SEG_CAR, 32, 1024] = 1.0
    sem = reproject_semantics(probs, img, cloud, cfg)
    cell = bev_cell_of_point(cloud, cfg)[0]
    i, j = divmod(int(cell), cfg.length_cells)
    assert sem[SEG_CAR, i, j] == pytest.approx(1.0)
    assert sem.sum() == pytest.approx(1.0)


def test_reproject_mean_of_vectors(backend):
    cfg = BevConfig()
    # two points, same BEV cell, different range-image columns
    cloud = cloud_of([[10.0, 0.0, 0.0, 0.5], [10.0, 0.02, 0.0, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    rows, cols, _, valid = point_bins(cloud, img.cfg)
    assert cols[0] != cols[1]
    p = np.array([0.6, 0.1, 0.1, 0.1, 0.1, 0.0, 0.0], np.float32)
    q = np.array([0.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.0], np.float32)
    probs = np.zeros((7, 64, 2048), np.float32)
    probs[:, rows[0], cols[0]] = p
    probs[:, rows[1], cols[1]] = q
    sem = reproject_semantics(probs, img, cloud, cfg)
    cell = bev_cell_of_point(cloud, cfg)[0]
    i, j = divmod(int(cell), cfg.length_cells)
    assert sem[:, i, j] == pytest.approx((p + q) / 2, abs=1e-6)
    assert sem[:, i, j].sum() == pytest.approx(1.0, abs=1e-5)


def test_reproject_out_of_extent_all_zero(backend):
    cfg = BevConfig(width_cells=16, length_cells=16, extent=8.0, out_stride=4)
    cloud = cloud_of([[30.0, 0, 0, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    sem = reproject_semantics(
        np.full((7, 64, 2048), 1 / 7, np.float32), img, cloud, cfg)
    assert not sem.any()


def test_reproject_fov_dropped_point_counts_as_unknown(backend):
    cfg = BevConfig()
    cloud = cloud_of([[1.0, 0.0, 5.0, 0.5]])  # inside extent, outside FOV
    img = spherical_project(cloud, SYM_FOV)
    sem = reproject_semantics(
        np.full((7, 64, 2048), 1 / 7, np.float32), img, cloud, cfg)
    cell = bev_cell_of_point(cloud, cfg)[0]
    i, j = divmod(int(cell), cfg.length_cells)
    assert sem[SEG_UNKNOWN, i, j] == pytest.approx(1.0)


def test_reproject_shape_mismatch(backend):
    cloud = cloud_of([[10, 0, 0, 0.5]])
    img = spherical_project(cloud, SYM_FOV)
    with pytest.raises(ShapeMismatch):
        reproject_semantics(np.zeros((7, 8, 8), np.float32), img, cloud)


def test_bev_grid_semantic_cells_sum_to_one(backend, rng):
    cfg = BevConfig(width_cells=128, length_cells=128, extent=80.0, out_stride=4)
    rcfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 4000)
    img = spherical_project(cloud, rcfg)
    logits = rng.normal(size=(7, 16, 128)).astype(np.float32)
    from mvlidar.nn.ops import softmax_channels
    grid = build_bev_grid(softmax_channels(logits), img, cloud, cfg)
    sums = grid.semantic.sum(axis=0)
    assert sums[grid.occupancy] == pytest.approx(1.0, abs=1e-5)
    assert not sums[~grid.occupancy].any()
    assert not grid.height[:, ~grid.occupancy].any()


def test_range_image_blob_roundtrip(backend, tmp_path, rng):
    from mvlidar.projection import load_range_image, save_range_image
    cfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 2000)
    img = spherical_project(cloud, cfg)
    p = tmp_path / "range.blob"
    save_range_image(img, p)
    back = load_range_image(p)
    assert back.cfg == cfg
    assert (back.channels == img.channels).all()
    assert (back.occupancy == img.occupancy).all()
    assert (back.index_map == img.index_map).all()
    assert back.n_points == img.n_points and back.n_dropped == img.n_dropped


def test_bev_grid_blob_roundtrip(backend, tmp_path, rng):
    from mvlidar.nn.ops import softmax_channels
    from mvlidar.projection import load_bev_grid, save_bev_grid
    cfg = BevConfig(width_cells=64, length_cells=64, extent=40.0, out_stride=4)
    rcfg = RangeImageConfig(n_rows=16, n_cols=128)
    cloud = random_cloud(rng, 1500, spread=18.0)
    img = spherical_project(cloud, rcfg)
    probs = softmax_channels(rng.normal(size=(7, 16, 128)).astype(np.float32))
    grid = build_bev_grid(probs, img, cloud, cfg)
    p = tmp_path / "bev.blob"
    save_bev_grid(grid, p)
    back = load_bev_grid(p)
    assert (back.semantic == grid.semantic).all()
    assert (back.height == grid.height).all()
    assert (back.occupancy == grid.occupancy).all()


def test_finite_check_debug_mode(monkeypatch):
    from mvlidar.errors import NonFiniteValue
    from mvlidar.nn import ops
    monkeypatch.setattr(ops, "CHECK_FINITE", True)
    x = np.full((1, 2, 2), 1e30, np.float32)
    w = np.full((1, 1, 3, 3), 1e30, np.float32)
    with pytest.raises(NonFiniteValue):
        ops.conv2d(x, w)  # overflows float32 -> inf
    ok = ops.conv2d(np.ones((1, 2, 2), np.float32),
                    np.ones((1, 1, 3, 3), np.float32))
    assert np.isfinite(ok).all()


def test_bev_config_validation():
    with pytest.raises(ValueError):
        BevConfig(width_cells=10, length_cells=10, extent=80.0, out_stride=4)
    cfg = BevConfig()
    assert cfg.cell_size == pytest.approx(0.078125)
    assert cfg.out_cell_size == pytest.approx(0.3125)
    assert cfg.out_cells == (256, 256)
