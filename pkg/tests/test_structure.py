import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_cloud
from wildsplat.core import GaussianCloud, GradientBundle, logit, validate_cloud
from wildsplat.structure import (
    SPLIT_SCALE_DIVISOR,
    EmptyCloudError,
    accumulate_densify_stats,
    densify,
    instantaneous_conflict,
    prune,
    update_conflict_ema_and_decay,
)


def fake_render(visible, radius):
    return SimpleNamespace(visible=np.asarray(visible, bool), projected_radius=np.asarray(radius, float))


def bundle_with(n, vsp=None, position=None, opacity=None):
    b = GradientBundle.zeros(n)
    if vsp is not None:
        b.view_space_pos[:] = vsp
    if position is not None:
        b.per_attribute["position"][:] = position
    if opacity is not None:
        b.per_attribute["opacity"][:] = opacity
    return b


class TestAccumulate:
    def test_invisible_untouched(self, rng):
        c = random_cloud(rng, 3)
        c.densify_r_max[:] = [1.0, 2.0, 3.0]
        c.densify_grad_accum[:] = [0.1, 0.2, 0.3]
        g = rng.standard_normal((3, 2))
        r = fake_render([True, False, True], [5.0, 9.0, 1.0])
        accumulate_densify_stats(c, [r, r], [bundle_with(3, g), bundle_with(3, g)], [1.0, 1.0])
        assert c.densify_r_max[1] == 2.0 and c.densify_grad_accum[1] == 0.2 and c.densify_count[1] == 0
        assert c.densify_r_max[0] == 5.0 and c.densify_r_max[2] == 3.0
        np.testing.assert_array_equal(c.densify_count, [2, 0, 2])

    def test_identical_views_add_twice_norm(self, rng):
        c = random_cloud(rng, 4)
        g = rng.standard_normal((4, 2))
        r = fake_render([True] * 4, [1.0] * 4)
        accumulate_densify_stats(c, [r, r], [bundle_with(4, g), bundle_with(4, g)], [1.0, 1.0])
        np.testing.assert_allclose(c.densify_grad_accum, 2 * np.linalg.norm(g, axis=1), rtol=1e-15)

    def test_tau_scales_view_one(self, rng):
        g = rng.standard_normal((4, 2))
        r = fake_render([True] * 4, [1.0] * 4)
        plain, scaled = random_cloud(rng, 4), random_cloud(rng, 4)
        accumulate_densify_stats(plain, [r], [bundle_with(4, g)], [1.0])
        accumulate_densify_stats(scaled, [r], [bundle_with(4, g)], [2.07193])
        np.testing.assert_allclose(scaled.densify_grad_accum, 2.07193 * plain.densify_grad_accum, rtol=1e-14)

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            accumulate_densify_stats(random_cloud(rng, 3), [fake_render([1, 1], [1, 1])], [bundle_with(2)], [1.0])


class TestDensify:
    def test_zero_accumulators_noop(self, rng):
        c = random_cloud(rng, 5)
        c.densify_r_max[:] = 3.0
        out, edit = densify(c, 1e-4, 2.0, np.random.default_rng(0))
        assert len(out) == 5 and edit.clones == edit.splits == 0
        np.testing.assert_array_equal(out.positions, c.positions)
        assert not out.densify_r_max.any() and not out.densify_count.any()

    def test_clone(self, rng):
        c = random_cloud(rng, 4)
        c.densify_grad_accum[2], c.densify_count[2], c.densify_r_max[2] = 1.0, 2, 1.0
        c.conflict_ema[2] = 0.4
        direction = np.zeros((4, 2))
        direction[2] = (3.0, 4.0)
        out, edit = densify(c, 1e-3, 2.0, np.random.default_rng(0), direction=direction)
        assert len(out) == 5 and edit.clones == 1
        np.testing.assert_allclose(out.positions[4], c.positions[2] - 0.01 * np.array([0.6, 0.8]), atol=1e-15)
        assert out.conflict_ema[4] == 0.4
        assert abs(out.depths[4] - c.depths[2]) <= 1e-6
        assert validate_cloud(out) == []

    def test_split(self, rng):
        c = random_cloud(rng, 4)
        c.densify_grad_accum[1], c.densify_count[1], c.densify_r_max[1] = 1.0, 1, 10.0
        c.conflict_ema[1] = 0.25
        out, edit = densify(c, 1e-3, 2.0, np.random.default_rng(0))
        assert len(out) == 5 and edit.splits == 1
        kids = out.take([3, 4])
        np.testing.assert_allclose(kids.scales, np.tile(c.scales[1] / SPLIT_SCALE_DIVISOR, (2, 1)), rtol=1e-14)
        np.testing.assert_array_equal(kids.conflict_ema, [0.25, 0.25])
        assert not np.isin(c.positions[1], out.positions).all()
        assert not out.densify_grad_accum.any()

    def test_deterministic(self, rng):
        c = random_cloud(rng, 30)
        c.densify_grad_accum[:] = rng.uniform(0, 1e-3, 30)
        c.densify_count[:] = 1
        c.densify_r_max[:] = rng.uniform(0, 4, 30)
        a, _ = densify(c.copy(), 4e-4, 2.0, np.random.default_rng(5))
        b, _ = densify(c.copy(), 4e-4, 2.0, np.random.default_rng(5))
        assert a.equals(b)

    def test_cap(self, rng):
        c = random_cloud(rng, 10)
        c.densify_grad_accum[:] = np.arange(10) * 1e-3
        c.densify_count[:] = 1
        out, edit = densify(c, 1e-4, 100.0, np.random.default_rng(0), max_gaussians=12)
        assert len(out) == 12
        np.testing.assert_array_equal(edit.source[10:], [8, 9])


class TestConflict:
    def test_identical(self, rng):
        b = bundle_with(5, position=rng.standard_normal((5, 2)), opacity=rng.standard_normal(5))
        assert not instantaneous_conflict(b, b).any()

    def test_opposite_position(self, rng):
        p = rng.standard_normal((3, 2))
        np.testing.assert_allclose(instantaneous_conflict(bundle_with(3, position=p), bundle_with(3, position=-p)), 1.0)

    def test_max_over_attributes(self):
        a = np.array([[1.0, 0.0]])

        def pos(cos):
            return np.array([[cos, math.sqrt(1 - cos * cos)]])

        # opacity gradients agree (cos = +1): C is the position term alone
        C = instantaneous_conflict(bundle_with(1, position=a, opacity=[1.0]), bundle_with(1, position=pos(-0.7), opacity=[2.0]))
        assert C[0] == pytest.approx(0.7, abs=1e-15)
        # opacity gradient missing (norm 0 -> contributes 0)
        C = instantaneous_conflict(bundle_with(1, position=a, opacity=[0.0]), bundle_with(1, position=pos(-0.3), opacity=[0.0]))
        assert C[0] == pytest.approx(0.3, abs=1e-15)
        # opposite opacity signs dominate a mild position conflict
        C = instantaneous_conflict(bundle_with(1, position=a, opacity=[1.0]), bundle_with(1, position=pos(-0.3), opacity=[-2.0]))
        assert C[0] == 1.0


class TestEmaAndDecay:
    def test_ema_step(self, rng):
        c = random_cloud(rng, 1)
        update_conflict_ema_and_decay(c, np.array([1.0]), 0.99, 0.3, iteration=1)
        assert c.conflict_ema[0] == pytest.approx(0.01, abs=1e-17)

    def test_decay_value(self, rng):
        c = random_cloud(rng, 1)
        c.opacity_logits[:] = 0.0
        c.conflict_ema[:] = 1.0
        # C = 1 keeps H = 1 exactly
        ran = update_conflict_ema_and_decay(c, np.array([1.0]), 0.99, 0.3, iteration=100, decay_interval=100)
        assert ran
        assert c.opacities[0] == pytest.approx(0.5 * math.exp(-0.3), rel=1e-14)
        assert 0.5 * math.exp(-0.3) == pytest.approx(0.37041, abs=5e-6)

    def test_off_schedule_no_decay(self, rng):
        c = random_cloud(rng, 2)
        c.conflict_ema[:] = 1.0
        before = c.opacity_logits.copy()
        assert not update_conflict_ema_and_decay(c, np.ones(2), iteration=150)
        np.testing.assert_array_equal(c.opacity_logits, before)

    def test_zero_conflict_fixed_point(self, rng):
        c = random_cloud(rng, 3)
        c.conflict_ema[:] = 0.8
        for it in range(1, 2001):
            update_conflict_ema_and_decay(c, np.zeros(3), iteration=it)
        assert c.conflict_ema.max() < 0.8 * 0.99**2000 * 1.0001
        assert math.exp(-0.3 * c.conflict_ema.max()) > 1 - 1e-9

    def test_bad_gamma(self, rng):
        with pytest.raises(ValueError):
            update_conflict_ema_and_decay(random_cloud(rng, 1), np.zeros(1), gamma=1.0)


def test_adversarial_gaussian_is_pruned_within_20_decays():
    """C = 1 every step, decay every 100 iterations: opacity 0.9 < 0.005 within 20 decay events."""
    bound = math.log(0.9 / 0.005) / 0.3
    assert bound == pytest.approx(17.3, abs=0.05)
    c = GaussianCloud(
        positions=np.array([[0.5, 0.5]]), log_scales=np.zeros((1, 2)), rotations=np.zeros(1),
        opacity_logits=logit(np.array([0.9])), colors=np.zeros((1, 3)), depths=np.zeros(1),
    )
    decays = 0
    it = 0
    while c.opacities[0] >= 0.005:
        it += 1
        decays += update_conflict_ema_and_decay(c, np.ones(1), 0.99, 0.3, iteration=it, decay_interval=100)
        assert decays <= 20, "not pruned within 20 decay events"
    # H ramps up as 1 - 0.99^t, so the count sits just above the H≡1 bound
    assert bound <= decays <= 20
    out, edit = prune(c.concat([c, random_cloud(np.random.default_rng(0), 1)]), 0.005)
    assert edit.prunes == 1 and len(out) == 1


class TestPrune:
    def test_none_removed(self, rng):
        c = random_cloud(rng, 4)
        c.opacity_logits[:] = 0.0
        out, edit = prune(c)
        assert edit.prunes == 0 and out.equals(c)

    def test_exact_index_removed(self, rng):
        c = random_cloud(rng, 5)
        c.opacity_logits[:] = 0.0
        c.opacity_logits[3] = logit(np.array([0.001]))[0]
        out, edit = prune(c)
        np.testing.assert_array_equal(edit.source, [0, 1, 2, 4])
        assert out.equals(c.take([0, 1, 2, 4]))
        assert validate_cloud(out) == []

    def test_everything(self, rng):
        c = random_cloud(rng, 2)
        c.opacity_logits[:] = -20
        with pytest.raises(EmptyCloudError, match="empty cloud"):
            prune(c)


@given(cs=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=300), gamma=st.floats(0.01, 0.999))
def test_ema_stays_in_unit_interval(cs, gamma):
    c = random_cloud(np.random.default_rng(0), 1)
    for it, v in enumerate(cs, 1):
        update_conflict_ema_and_decay(c, np.array([v]), gamma, 0.3, iteration=it)
        assert 0.0 <= c.conflict_ema[0] <= 1.0


@given(level=st.floats(0.0, 1.0), gamma=st.floats(0.5, 0.99))
def test_ema_converges_geometrically(level, gamma):
    c = random_cloud(np.random.default_rng(0), 1)
    c.conflict_ema[:] = 1.0 - level
    gap0 = abs(c.conflict_ema[0] - level)
    for t in range(1, 51):
        update_conflict_ema_and_decay(c, np.array([level]), gamma, 0.3, iteration=t, decay_interval=10**9)
        assert abs(c.conflict_ema[0] - level) <= gap0 * gamma**t + 1e-12


@given(seed=st.integers(0, 10_000), threshold=st.floats(1e-5, 1e-3))
def test_alignment_after_densify_and_prune(seed, threshold):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, 20)
    c.densify_grad_accum[:] = rng.uniform(0, 1e-3, 20)
    c.densify_count[:] = rng.integers(0, 3, 20)
    c.densify_r_max[:] = rng.uniform(0, 4, 20)
    c.conflict_ema[:] = rng.uniform(0, 1, 20)
    out, edit = densify(c, threshold, 2.0, rng, direction=rng.standard_normal((20, 2)))
    assert validate_cloud(out) == []
    assert len(edit.source) == len(out)
    np.testing.assert_array_equal(out.conflict_ema, c.conflict_ema[edit.source])
    assert not out.densify_count.any()
    out.opacity_logits[::3] = -10.0
    pruned, _ = prune(out)
    assert validate_cloud(pruned) == []
