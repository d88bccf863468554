import itertools
import math

import numpy as np
import pytest

from querycrop.env import Action, BBox, EnvConfig, generate_instance
from querycrop.episode import Episode
from querycrop.errors import ConfigInfeasible
from querycrop.policy import (
    DEFAULT_SCALES,
    FEATURE_DIM,
    ActionDistribution,
    PolicyParams,
    action_features,
    build_anchors,
    distribution,
    greedy_index,
    log_prob_grad,
    sample_action,
)


def brute_anchors(H, W, scales, stride):
    """Independent enumerator: every stride offset plus the far-edge offset."""
    out = []
    for s in scales:
        bw, bh = int(s * W + 0.5), int(s * H + 0.5)
        xs = sorted(set(list(range(0, W - bw + 1, stride)) + [W - bw]))
        ys = sorted(set(list(range(0, H - bh + 1, stride)) + [H - bh]))
        for y, x in itertools.product(ys, xs):
            b = (x, y, x + bw, y + bh)
            if b not in out:
                out.append(b)
    return out


def test_scale_one_is_full_image():
    assert build_anchors(7, 5, (1.0,), 2) == (BBox(0, 0, 5, 7),)


def test_small_grid_enumeration():
    assert set(build_anchors(4, 4, (0.5,), 2)) == {BBox(0, 0, 2, 2), BBox(2, 0, 4, 2),
                                                  BBox(0, 2, 2, 4), BBox(2, 2, 4, 4)}


@pytest.mark.parametrize("H,W,stride", [(16, 16, 2), (16, 16, 3), (9, 13, 2), (5, 5, 1)])
def test_anchor_count_matches_enumerator(H, W, stride):
    got = build_anchors(H, W, DEFAULT_SCALES, stride)
    assert [tuple(b) for b in got] == brute_anchors(H, W, DEFAULT_SCALES, stride)
    assert all(b.valid_for(W, H) for b in got)


def test_anchor_errors():
    with pytest.raises(ValueError):
        build_anchors(4, 4, (0.5,), 0)
    with pytest.raises(ValueError):
        build_anchors(4, 4, (1.5,), 1)
    with pytest.raises(ConfigInfeasible):
        build_anchors(4, 4, (0.01,), 1)


def test_full_action_features():
    x = generate_instance(EnvConfig(), 0)
    f = action_features(x, Action.full())
    assert f[2] == 1.0 and f[1] == 1.0


def test_clean_target_feature(clean_cfg):
    x = generate_instance(clean_cfg, 2)
    f = action_features(x, Action.region(x.target_box))
    assert f[0] == pytest.approx(1.0, abs=1e-12)
    assert f[1] == x.target_box.area / 256 and f[2] == 0.0


def test_features_reproducible_and_match_episode(anchors):
    x = generate_instance(EnvConfig(), 4)
    ep = Episode.from_instance(x, anchors)
    ep2 = Episode.from_instance(generate_instance(EnvConfig(), 4), anchors)
    np.testing.assert_array_equal(ep.features, ep2.features)
    for i in (0, 1, 50, len(anchors)):
        np.testing.assert_allclose(ep.features[i], action_features(x, ep.actions[i]), atol=1e-12)


def test_zero_params_uniform(episodes):
    d = distribution(PolicyParams.zeros(), episodes[0])
    np.testing.assert_allclose(d.probs, 1 / len(d))
    assert greedy_index(d) == 0  # ties go to FULL


def test_shift_invariance():
    logits = np.array([0.3, -1.0, 2.0])
    a = ActionDistribution.from_logits("abc", logits)
    b = ActionDistribution.from_logits("abc", logits + 123.0)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)


def test_question_weight_picks_target_anchor(clean_cfg, anchors):
    for seed in range(5):
        x = generate_instance(clean_cfg, seed)
        ep = Episode.from_instance(x, anchors)
        params = PolicyParams([50.0, 0.0, 0.0, 0.0])
        d = distribution(params, ep)
        best = max(range(len(ep)), key=lambda i: (d.logits[i], -i))
        assert greedy_index(d) == best
        # the winning crop lies inside the target, where the question cosine is ~1
        win = ep.actions[best]
        assert not win.is_full
        assert ep.features[best, 0] == pytest.approx(1.0, abs=1e-9)


def test_sample_degenerate_and_reproducible():
    d = ActionDistribution.from_logits([Action.full(), Action.region((0, 0, 1, 1))], [0.0, -1e4])
    a, lp = sample_action(d, np.random.default_rng(0))
    assert a.is_full and lp == 0.0
    d = ActionDistribution.from_logits(list("abcd"), [0.1, 0.2, -0.3, 1.0])
    r1 = [sample_action(d, np.random.default_rng(9))[0] for _ in range(3)]
    r2 = [sample_action(d, np.random.default_rng(9))[0] for _ in range(3)]
    assert r1 == r2


def test_sample_frequencies():
    d = ActionDistribution.from_logits(list("abcd"), [0.1, 0.2, -0.3, 1.0])
    rng = np.random.default_rng(5)
    n = 100_000
    draws = rng.choice(4, size=n, p=d.probs)
    counts = np.bincount(draws, minlength=4)
    sigma = np.sqrt(n * d.probs * (1 - d.probs))
    assert np.all(np.abs(counts - n * d.probs) <= 3 * sigma)


def _ln_prob(theta, ep, i):
    return distribution(PolicyParams(theta), ep).log_probs[i]


def test_grad_matches_finite_differences(episodes):
    rng = np.random.default_rng(0)
    for ep in episodes[:4]:
        theta = rng.normal(0, 2, FEATURE_DIM)
        i = int(rng.integers(len(ep)))
        g = log_prob_grad(PolicyParams(theta), ep, i)
        h = 1e-6
        fd = np.array([(_ln_prob(theta + h * e, ep, i) - _ln_prob(theta - h * e, ep, i)) / (2 * h)
                       for e in np.eye(FEATURE_DIM)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_grad_accepts_action(episodes):
    ep = episodes[0]
    p = PolicyParams([1.0, -2.0, 0.5, 0.0])
    np.testing.assert_array_equal(log_prob_grad(p, ep, ep.actions[7]), log_prob_grad(p, ep, 7))


def test_grad_symmetric_features_cancel():
    class Two:
        actions = (Action.full(), Action.region((0, 0, 1, 1)))
        features = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = log_prob_grad(PolicyParams.zeros(2), Two, 0)
    np.testing.assert_allclose(g, [0.5, -0.5])
    assert g.sum() == 0.0


def test_grad_vanishes_when_action_certain(episodes):
    ep = episodes[1]
    theta = np.array([0.0, 0.0, 60.0, 0.0])  # all mass on FULL
    assert distribution(PolicyParams(theta), ep).probs[0] == pytest.approx(1.0)
    assert np.abs(log_prob_grad(PolicyParams(theta), ep, 0)).max() < 1e-20


def test_params_round_trip(tmp_path):
    p = PolicyParams([math.pi, -1e-300, 0.0, 12345.678])
    p.save(tmp_path / "p.txt")
    q = PolicyParams.load(tmp_path / "p.txt")
    np.testing.assert_array_equal(p.theta, q.theta)
    (tmp_path / "bad.txt").write_text("region-r1-policy v1 dim=3\n1.0\n")
    with pytest.raises(ValueError):
        PolicyParams.load(tmp_path / "bad.txt")
    with pytest.raises(ValueError):
        PolicyParams([np.inf])
