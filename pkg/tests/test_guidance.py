import math
import warnings

import numpy as np
import pytest

from galtraj.diffusion import DiffusionSchedule
from galtraj.exceptions import ConfigurationError, GenerationError
from galtraj.geometry import nearest_boundary_points
from galtraj.guidance import (HEAD, RELEVANT, TAIL, GuidanceConfig, GuidanceWarning, SceneCost,
                              apply_gradient_guidance, categorize_agents, cost_no_offroad, cost_repeller,
                              offroad_rate, real_guided_sample, real_guided_sample_batch, relevance_attention)
from galtraj.predictor import scene_features
from galtraj.world import TOPOLOGIES, AgentTrack, Scenario, build_map

from oracles import (central_difference, max_relative_error, offroad_configuration, repeller_configuration)


class TestGuidanceConfig:
    def test_defaults(self):
        g = GuidanceConfig()
        assert (g.lambda_tail, g.lambda_rel, g.lambda_head) == (0.25, 0.6, 1.0)
        assert g.lam(TAIL) == 0.25 and g.lam(RELEVANT) == 0.6 and g.lam(HEAD) == 1.0

    @pytest.mark.parametrize("kwargs", [{"lambda_tail": 0.7}, {"lambda_head": 1.2}, {"w_offroad": -1.0},
                                        {"radius": 0.0}, {"step_clip": 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            GuidanceConfig(**kwargs)


class TestCategorize:
    def test_tail_and_relevant(self):
        attn = np.full((4, 4), 0.1)
        attn[0] = [0.1, 0.6, 0.2, 0.1]
        cats = categorize_agents([3.0, 0.5, 0.2, 0.1], 2.0, attn)
        assert cats == [TAIL, RELEVANT, HEAD, HEAD]

    def test_no_tail_no_relevant(self):
        attn = np.eye(3) * 0.0 + 0.9
        assert categorize_agents([0.1, 0.2, 0.3], 2.0, attn) == [HEAD] * 3

    def test_strict_threshold(self):
        attn = np.full((3, 3), 1 / 3)
        assert categorize_agents([3.0, 0.5, 0.4], 2.0, attn) == [TAIL, HEAD, HEAD]

    def test_nan_is_never_tail(self):
        attn = np.full((2, 2), 0.5)
        assert categorize_agents([math.nan, 3.0], 2.0, attn) == [HEAD, TAIL]

    def test_neighbor_sets(self):
        attn = np.array([[0.2, 0.45, 0.35], [0, 1, 0], [0, 0, 1]])
        # with N_0 = {0, 1} the threshold is 0.5, so agent 1 stays head and agent 2 is not a neighbor
        assert categorize_agents([3.0, 0.1, 0.1], 2.0, attn, [[0, 1], [1], [2]]) == [TAIL, HEAD, HEAD]
        assert categorize_agents([3.0, 0.1, 0.1], 2.0, attn) == [TAIL, RELEVANT, RELEVANT]

    def test_shape_check(self):
        with pytest.raises(ConfigurationError):
            categorize_agents([1.0, 2.0], 1.0, np.ones((3, 3)))


SQUARE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])


class TestNoOffroad:
    def test_inside_is_zero(self):
        cost, grad = cost_no_offroad([[5.0, 5.0], [1.0, 9.0]], SQUARE)
        assert cost == 0.0 and (grad == 0).all()

    def test_two_metres_out(self):
        cost, grad = cost_no_offroad([[12.0, 5.0]], SQUARE, w=1.0)
        assert cost == -4.0
        np.testing.assert_allclose(grad, [[-4.0, 0.0]])

    def test_degenerate_polygon(self):
        with pytest.raises(ConfigurationError):
            cost_no_offroad([[0.0, 0.0]], [[0, 0], [1, 1], [2, 2]])

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_finite_differences(self, topology, rng):
        poly = build_map(3, topology).drivable_area
        for _ in range(5):
            pts = offroad_configuration(rng, poly)
            _, grad = cost_no_offroad(pts, poly, w=2.5)
            fd = central_difference(lambda p: cost_no_offroad(p, poly, w=2.5)[0], pts)
            _, dist = nearest_boundary_points(pts, poly)
            keep = np.repeat((dist > 1e-3)[:, None], 2, axis=1)
            assert max_relative_error(grad, fd, keep) < 1e-4

    def test_cost_non_positive(self, rng):
        poly = build_map(0, "four-way").drivable_area
        for _ in range(20):
            assert cost_no_offroad(offroad_configuration(rng, poly), poly)[0] <= 0


class TestRepeller:
    def test_far_apart_is_zero(self):
        trajs = np.array([[[0.0, 0.0]], [[5.0, 0.0]]])
        cost, grad = cost_repeller(trajs, w=1.0, radius=2.0)
        assert cost == 0.0 and (grad == 0).all()

    def test_coincident(self):
        trajs = np.array([[[1.0, 1.0], [0.0, 0.0]], [[1.0, 1.0], [9.0, 9.0]]])
        assert cost_repeller(trajs, w=1.0, radius=2.0)[0] == -4.0

    def test_single_agent(self):
        cost, grad = cost_repeller(np.zeros((1, 3, 2)))
        assert cost == 0.0 and grad.shape == (1, 3, 2)

    def test_mask(self):
        trajs = np.array([[[0.0, 0.0]], [[0.5, 0.0]]])
        assert cost_repeller(trajs, mask=np.array([[True], [False]]))[0] == 0.0

    def test_finite_differences(self, rng):
        for _ in range(20):
            trajs = repeller_configuration(rng)
            _, grad = cost_repeller(trajs, w=1.5, radius=2.0)
            fd = central_difference(lambda t: cost_repeller(t, w=1.5, radius=2.0)[0], trajs)
            dist = np.linalg.norm(trajs[:, None] - trajs[None], axis=-1)
            near_hinge = (np.abs(dist - 2.0) < 1e-3) | (dist < 1e-3)
            idx = np.arange(len(trajs))
            near_hinge[idx, idx] = False
            keep = np.repeat(~near_hinge.any(1)[..., None], 2, axis=-1)
            assert max_relative_error(grad, fd, keep) < 1e-4


class TestApplyGradient:
    def test_zero_cost_is_identity(self, rng):
        mu = rng.normal(size=(3, 12))
        out = apply_gradient_guidance(mu, 0.3, lambda m: (0.0, np.zeros_like(m)), [True, True, False])
        assert out.tobytes() == mu.tobytes()

    def test_quadratic_moves_toward_goal(self, rng):
        mu = rng.normal(size=(2, 4))
        goal = rng.normal(size=(2, 4))

        def cost(m):
            return -0.5 * float(((m - goal) ** 2).sum()), goal - m

        out = apply_gradient_guidance(mu, 0.2, cost, [True, True])
        np.testing.assert_allclose(out, mu + 0.2 * (goal - mu))

    def test_non_head_untouched(self, rng):
        mu = rng.normal(size=(3, 5))
        out = apply_gradient_guidance(mu, 1.0, lambda m: (0.0, np.ones_like(m)), [False, True, False])
        np.testing.assert_array_equal(out[[0, 2]], mu[[0, 2]])
        np.testing.assert_array_equal(out[1], mu[1] + 1.0)

    def test_step_clip(self, rng):
        mu = np.zeros((2, 4))
        out = apply_gradient_guidance(mu, 1.0, lambda m: (0.0, np.full_like(m, 10.0)), [True, True], max_step=0.5)
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 0.5)

    def test_non_finite_falls_back(self, rng):
        mu = rng.normal(size=(2, 3))
        with pytest.warns(GuidanceWarning):
            out = apply_gradient_guidance(mu, 1.0, lambda m: (0.0, np.full_like(m, np.nan)), [True, False])
        np.testing.assert_array_equal(out, mu)


class TestSceneCost:
    def test_gradient_in_coefficient_space(self, trained_denoiser, small_scenarios, rng):
        scn = small_scenarios[4]
        f = scene_features(scn)
        n = scn.n_agents
        cost = SceneCost(trained_denoiser, scn, f.origin[:n], f.heading[:n], GuidanceConfig())
        y = trained_denoiser.normalize(f.future) + rng.normal(size=(n, trained_denoiser.n_components)) * 0.5
        _, grad = cost(y)
        fd = central_difference(lambda z: cost(z)[0], y, h=1e-6)
        scale = np.abs(fd).max()
        assert np.abs(grad - fd).max() <= 1e-4 * max(scale, 1.0)


class TestRealGuidance:
    def test_lambda_zero_reproduces_ground_truth(self, trained_denoiser, small_scenarios):
        g = GuidanceConfig(lambda_tail=0.0, lambda_rel=0.0, lambda_head=0.0)
        for scn in small_scenarios[:5]:
            out = real_guided_sample(trained_denoiser, scn, [TAIL] + [HEAD] * (scn.n_agents - 1), g, seed=0)
            assert out.tobytes() == scn.future().tobytes()

    def test_tail_start_step(self):
        assert DiffusionSchedule(32).k_star(GuidanceConfig().lambda_tail) == 8

    def test_shapes_and_determinism(self, trained_denoiser, small_scenarios):
        scns = small_scenarios[:4]
        cats = [[TAIL] + [HEAD] * (s.n_agents - 1) for s in scns]
        a = real_guided_sample_batch(trained_denoiser, scns, cats, GuidanceConfig(), seed=3)
        b = real_guided_sample_batch(trained_denoiser, scns, cats, GuidanceConfig(), seed=3)
        for s, x, y in zip(scns, a, b):
            assert x.shape == s.future().shape and np.isfinite(x).all()
            np.testing.assert_array_equal(x, y)

    def test_missing_future(self, trained_denoiser, small_scenarios):
        scn = small_scenarios[0]
        agents = [AgentTrack(a.agent_id, a.positions, a.valid_mask.copy(), a.maneuver_label) for a in scn.agents]
        agents[0].valid_mask[-1] = False
        broken = Scenario(scn.scenario_id, scn.map, agents, scn.horizons)
        with pytest.raises(GenerationError):
            real_guided_sample(trained_denoiser, broken, [HEAD] * scn.n_agents, GuidanceConfig(), seed=0)

    def test_category_count(self, trained_denoiser, small_scenarios):
        with pytest.raises(ConfigurationError):
            real_guided_sample(trained_denoiser, small_scenarios[0], [HEAD], GuidanceConfig(), seed=0)

    def test_relevance_rows(self, trained_denoiser, small_scenarios):
        scn = small_scenarios[2]
        attn = relevance_attention(trained_denoiser, scn, 8, seed=0)
        assert attn.shape == (scn.n_agents, scn.n_agents)
        np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)

    def test_displacement_ordering(self, trained_denoiser, small_scenarios):
        scns = small_scenarios[:40]
        cats = [[TAIL if i == 0 else HEAD for i in range(s.n_agents)] for s in scns]
        outs = real_guided_sample_batch(trained_denoiser, scns, cats, GuidanceConfig(), seed=1)
        tail, head = [], []
        for s, out, c in zip(scns, outs, cats):
            d = np.linalg.norm(out - s.future(), axis=-1).mean(-1)
            for di, ci in zip(d, c):
                (tail if ci == TAIL else head).append(di)
        assert np.mean(tail) < np.mean(head)

    def test_offroad_rate(self):
        scn_map = build_map(0, "straight")
        agents = [AgentTrack(0, np.zeros((41, 2)), np.ones(41, bool), "keep-lane")]
        scn = Scenario(0, scn_map, agents)
        lo, hi = scn_map.bounding_box()
        centre = (lo + hi) / 2
        assert offroad_rate(np.broadcast_to(centre, (1, 3, 2)), scn) == 0.0
        assert offroad_rate(np.broadcast_to(hi + 20, (1, 3, 2)), scn) == 1.0

    def test_no_warning_in_normal_use(self, trained_denoiser, small_scenarios):
        with warnings.catch_warnings():
            warnings.simplefilter("error", GuidanceWarning)
            real_guided_sample(trained_denoiser, small_scenarios[3], [HEAD] * small_scenarios[3].n_agents,
                               GuidanceConfig(), seed=0)
