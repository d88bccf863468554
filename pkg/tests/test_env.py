import numpy as np
import pytest
from scipy import stats

from querycrop.env import (
    Action,
    BBox,
    EnvConfig,
    FeatureGrid,
    apply_action,
    box_size_for_area,
    center_crop,
    crop,
    embed_image,
    empirical_area_sampler,
    generate_instance,
    random_crop,
    read_area_distribution,
    uniform_area_sampler,
    write_area_distribution,
)
from querycrop.episode import Episode, crop_embeddings
from querycrop.errors import ConfigInfeasible, MalformedBox, OutOfBounds
from querycrop.scoring import score_pool

# FULL-baseline rank-1 count over seeds 0..99 with the default config, frozen at first green run
RANK1_OF_100 = 54


@pytest.fixture
def grid():
    rng = np.random.default_rng(0)
    return FeatureGrid(rng.standard_normal((4, 4, 3)))


def test_identity_crop(grid):
    assert crop(grid, BBox(0, 0, 4, 4)) == grid


def test_top_left_crop(grid):
    np.testing.assert_array_equal(crop(grid, BBox(0, 0, 2, 2)).cells, grid.cells[:2, :2])


def test_crop_errors(grid):
    with pytest.raises(MalformedBox):
        crop(grid, BBox(2, 0, 1, 3))
    with pytest.raises(OutOfBounds):
        crop(grid, BBox(0, 0, 5, 2))


def test_embed_image():
    c = np.array([1.0, -2.0, 2.0])
    np.testing.assert_allclose(embed_image(FeatureGrid(np.tile(c, (3, 2, 1)))), c / 3.0)
    np.testing.assert_allclose(embed_image(FeatureGrid(c[None, None, :])), c / 3.0)
    rng = np.random.default_rng(1)
    cells = rng.standard_normal((5, 3, 4))
    mean = [sum(cells[i, j, d] for i in range(5) for j in range(3)) / 15 for d in range(4)]
    norm = sum(m * m for m in mean) ** 0.5
    np.testing.assert_allclose(embed_image(FeatureGrid(cells)), np.array(mean) / norm, atol=1e-14)


def test_apply_action(grid):
    view, flag = apply_action(grid, Action.full())
    assert view is grid and flag == 0
    view, flag = apply_action(grid, Action.region((1, 1, 3, 4)))
    assert view == crop(grid, BBox(1, 1, 3, 4)) and flag == 0
    view, flag = apply_action(grid, Action.region((3, 0, 2, 2)))
    assert view is grid and flag == 1
    view, flag = apply_action(grid, Action.region((0, 0, 9, 2)))
    assert view is grid and flag == 1


def test_action_validation():
    with pytest.raises(ValueError):
        Action(Action.full().decision, BBox(0, 0, 1, 1))
    with pytest.raises(ValueError):
        Action(Action.region((0, 0, 1, 1)).decision)


def test_generate_deterministic():
    cfg = EnvConfig()
    a, b = generate_instance(cfg, 7), generate_instance(cfg, 7)
    assert a.image == b.image
    np.testing.assert_array_equal(a.question_vec, b.question_vec)
    assert a.target_box == b.target_box
    np.testing.assert_array_equal(a.pool.fused, b.pool.fused)
    assert not np.array_equal(generate_instance(cfg, 8).image.cells, a.image.cells)


def test_generate_structure():
    cfg = EnvConfig()
    x = generate_instance(cfg, 3)
    assert x.image.cells.shape == (16, 16, 16)
    assert len(x.pool) == 20 and x.pool.n_positive == 1
    area = x.target_box.area / 256
    assert 0.10 <= area <= 0.60
    assert len(x.distractor_boxes) == cfg.n_distractor_regions


def test_zero_noise_target_crop_recovers_positive(clean_cfg):
    for seed in range(5):
        x = generate_instance(clean_cfg, seed)
        q = embed_image(crop(x.image, x.target_box))
        s = score_pool(q, x.pool)
        assert s[x.pool.labels == 1][0] == pytest.approx(1.0, abs=1e-12)


def test_rank1_fraction_regression(anchors):
    cfg = EnvConfig()
    n = sum(Episode.from_instance(generate_instance(cfg, s), anchors).baseline.rank == 1
            for s in range(100))
    assert 0 < n < 100
    assert n == RANK1_OF_100


@pytest.mark.parametrize("bad", [dict(H=0), dict(pool_size=1), dict(noise_q=-1.0), dict(seed=-1)])
def test_env_config_validation(bad):
    with pytest.raises(ValueError):
        EnvConfig(**bad)


def test_infeasible_config():
    with pytest.raises(ConfigInfeasible):
        generate_instance(EnvConfig(H=1, W=1), 0)


@pytest.mark.parametrize("H,W,fraction,box", [
    (4, 4, 1.0, (0, 0, 4, 4)),
    (4, 4, 0.25, (1, 1, 3, 3)),
])
def test_center_crop(H, W, fraction, box):
    img = FeatureGrid(np.ones((H, W, 2)))
    assert center_crop(img, fraction).box == BBox(*box)


def test_center_crop_rounding_5x5():
    b = center_crop(FeatureGrid(np.ones((5, 5, 2))), 0.5).box
    best = min(abs(h * w - 12.5) for h in range(1, 6) for w in range(1, 6))
    assert abs(b.area - 12.5) == best
    assert abs(b.area - 12.5) <= 5
    # centered: left/right and top/bottom margins differ by at most one cell
    assert abs(b.x1 - (5 - b.x2)) <= 1 and abs(b.y1 - (5 - b.y2)) <= 1


def test_box_size_matches_enumeration():
    for fraction in np.linspace(0.05, 1.0, 20):
        h, w = box_size_for_area(16, 16, fraction)
        assert abs(h * w - fraction * 256) == min(abs(a * b - fraction * 256)
                                                 for a in range(1, 17) for b in range(1, 17))


def test_random_crop_full_area_and_reproducible():
    img = FeatureGrid(np.ones((6, 5, 2)))
    for s in range(5):
        assert random_crop(img, lambda rng: 1.0, np.random.default_rng(s)).box == BBox(0, 0, 5, 6)
    a = random_crop(img, uniform_area_sampler(), np.random.default_rng(4))
    b = random_crop(img, uniform_area_sampler(), np.random.default_rng(4))
    assert a == b
    assert a.box.valid_for(5, 6)


def test_random_crop_area_distribution_matches_sampler():
    # on a fine grid the cell rounding is negligible
    H = W = 200
    img = FeatureGrid(np.ones((H, W, 1)))
    rng = np.random.default_rng(11)
    areas = [random_crop(img, uniform_area_sampler(0.1, 0.9), rng).box.area / (H * W) for _ in range(10_000)]
    d = stats.kstest(areas, stats.uniform(loc=0.1, scale=0.8).cdf).statistic
    assert d <= 0.05


def test_area_file_round_trip(tmp_path):
    vals = [0.25, 1 / 3, 0.9375]
    write_area_distribution(vals, tmp_path / "a.txt")
    assert read_area_distribution(tmp_path / "a.txt") == vals
    sampler = empirical_area_sampler(vals)
    rng = np.random.default_rng(0)
    assert {sampler(rng) for _ in range(200)} == set(vals)
    with pytest.raises(ValueError):
        empirical_area_sampler([])


def test_batched_crop_embeddings_match_per_box(anchors):
    x = generate_instance(EnvConfig(), 5)
    batch = crop_embeddings(x.image, anchors)
    for b, e in zip(anchors, batch):
        np.testing.assert_allclose(e, embed_image(crop(x.image, b)), atol=1e-12)
