import numpy as np
import pytest
import torch
from scipy import stats

from galtraj import predictor as predmod
from galtraj.dataset import GENERATED, Entry, WeightedDataset
from galtraj.exceptions import ConfigurationError, ShapeError, TrainingError
from galtraj.predictor import TrajectoryPredictor, draw_epoch_indices, wta_loss
from galtraj.world import MANEUVERS, AgentTrack, DatasetConfig, Horizons, Scenario, synthesize_dataset


@pytest.fixture(scope="module")
def fitted(small_scenarios):
    return TrajectoryPredictor(hidden_dim=32, n_epochs=1, random_state=0).fit(small_scenarios)


class TestPredict:
    def test_shapes_and_probs(self, fitted, small_scenarios):
        for scn in small_scenarios[:10]:
            pred = fitted.predict(scn).check(scn.horizons.t_f)
            assert pred.modes.shape == (scn.n_agents, 6, scn.horizons.t_f, 2)
            np.testing.assert_allclose(pred.mode_probs.sum(-1), 1.0, atol=1e-6)

    def test_untrained_stationary_agent_is_finite(self, small_scenarios):
        scn = small_scenarios[0]
        agents = [AgentTrack(a.agent_id, np.repeat(a.positions[:1], len(a.positions), 0), a.valid_mask,
                             a.maneuver_label) for a in scn.agents]
        still = Scenario(0, scn.map, agents, scn.horizons)
        model = TrajectoryPredictor(hidden_dim=16)._initialize(scn.horizons)
        assert np.isfinite(model.predict(still).modes).all()

    def test_deterministic(self, fitted, small_scenarios):
        a = fitted.predict(small_scenarios[1]).modes
        b = fitted.predict(small_scenarios[1]).modes
        np.testing.assert_array_equal(a, b)

    def test_horizon_mismatch(self, fitted):
        other = synthesize_dataset(DatasetConfig(count=1, horizons=Horizons(t_h=5, t_f=20)), seed=0)[0]
        with pytest.raises(ShapeError):
            fitted.predict(other)

    def test_checkpoint_round_trip(self, fitted, small_scenarios, tmp_path):
        path = fitted.save(tmp_path / "p.pt")
        back = TrajectoryPredictor.load(path)
        assert back.epoch_ == fitted.epoch_ and back.get_params() == fitted.get_params()
        np.testing.assert_array_equal(back.predict(small_scenarios[2]).modes, fitted.predict(small_scenarios[2]).modes)

    def test_learns_keep_lane(self):
        mix = {m: (1.0 if m == "keep-lane" else 0.0) for m in MANEUVERS}
        data = synthesize_dataset(DatasetConfig(count=500, maneuver_mix=mix), seed=21)
        test = synthesize_dataset(DatasetConfig(count=60, maneuver_mix=mix), seed=22)
        model = TrajectoryPredictor(hidden_dim=64, n_epochs=4, epoch_size=1000, random_state=0).fit(data)
        err = model.error_table(test)["minade6"].mean()
        # constant-position baseline: stay at the last observed point
        baseline = np.concatenate([np.linalg.norm(s.future() - s.past()[:, -1:], axis=-1).mean(-1)
                                   for s in test]).mean()
        assert err < baseline


class TestSampling:
    def test_uniform_visit_counts(self):
        rng = np.random.default_rng(0)
        idx = draw_epoch_indices(np.ones(20), 10_000, rng)
        counts = np.bincount(idx, minlength=20)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_double_weight(self):
        w = np.ones(10)
        w[0] = 2.0
        counts = np.bincount(draw_epoch_indices(w, 50_000, np.random.default_rng(1)), minlength=10)
        assert counts[0] / counts[1:].mean() == pytest.approx(2.0, rel=0.05)
        expected = 50_000 * w / w.sum()
        assert stats.chisquare(counts, expected).pvalue > 0.001

    def test_rejects_bad_weights(self):
        with pytest.raises(ConfigurationError):
            draw_epoch_indices([1.0, 0.0], 5, np.random.default_rng(0))


class TestTrainEpoch:
    def test_zero_epoch_size(self, small_scenarios):
        model = TrajectoryPredictor(hidden_dim=16)._initialize(small_scenarios[0].horizons)
        before = {k: v.clone() for k, v in model.net_.state_dict().items()}
        errs = model.train_epoch(small_scenarios, 0)
        assert len(errs) == 0 and model.last_draws_ == 0
        for k, v in model.net_.state_dict().items():
            assert torch.equal(v, before[k])

    def test_draw_count_and_flags(self, small_scenarios):
        data = WeightedDataset.from_scenarios(small_scenarios[:10])
        data.append(Entry(small_scenarios[10], 1.0, GENERATED, 0))
        model = TrajectoryPredictor(hidden_dim=16, batch_size=7)
        errs = model.train_epoch(data, 37)
        assert model.last_draws_ == 37
        gen = errs[errs["generated"]]
        assert set(gen["scenario_id"]) <= {small_scenarios[10].scenario_id}
        assert (errs["error"] >= 0).all()

    def test_cap(self, small_scenarios):
        model = TrajectoryPredictor(hidden_dim=16, max_epoch_size=5)
        with pytest.raises(ConfigurationError):
            model.train_epoch(small_scenarios, 6)

    def test_non_finite_loss(self, small_scenarios, monkeypatch):
        def bad(traj, *args, **kwargs):
            return traj.sum() * float("nan"), torch.zeros(traj.shape[:2]), None

        monkeypatch.setattr(predmod, "wta_loss", bad)
        with pytest.raises(TrainingError, match="batch 0"):
            TrajectoryPredictor(hidden_dim=16).train_epoch(small_scenarios, 4)

    def test_params_finite_after_step(self, small_scenarios):
        model = TrajectoryPredictor(hidden_dim=16)
        model.train_epoch(small_scenarios, 32)
        assert all(torch.isfinite(p).all() for p in model.net_.parameters())

    def test_reproducible(self, small_scenarios):
        a = TrajectoryPredictor(hidden_dim=16).train_epoch(small_scenarios, 20)
        b = TrajectoryPredictor(hidden_dim=16).train_epoch(small_scenarios, 20)
        assert a.equals(b)


class TestWTALoss:
    def _toy(self, rng):
        future = torch.tensor(rng.normal(size=(1, 1, 5, 2)))
        traj = future[:, :, None] + torch.tensor(rng.normal(size=(1, 1, 6, 5, 2)))
        traj.requires_grad_(True)
        return traj, future

    def test_only_winner_gets_regression_gradient(self, rng):
        traj, future = self._toy(rng)
        logits = torch.zeros(1, 1, 6, dtype=torch.float64)
        loss, _, best = wta_loss(traj, logits, future, torch.ones(1, 1, 5, dtype=torch.bool),
                                 torch.ones(1, 1, dtype=torch.bool), cls_weight=0.0)
        loss.backward()
        g = traj.grad[0, 0].abs().sum((-1, -2))
        winner = int(best[0, 0])
        assert g[winner] > 0
        assert all(g[m] == 0 for m in range(6) if m != winner)

    def test_gradient_matches_finite_differences(self, rng):
        traj, future = self._toy(rng)
        logits = torch.tensor(rng.normal(size=(1, 1, 6)), requires_grad=True)
        fm = torch.ones(1, 1, 5, dtype=torch.bool)
        am = torch.ones(1, 1, dtype=torch.bool)
        assert torch.autograd.gradcheck(lambda t, lg: wta_loss(t, lg, future, fm, am)[0], (traj, logits),
                                        eps=1e-4, atol=0.0, rtol=1e-4)

    def test_masked_steps_do_not_contribute(self, rng):
        traj, future = self._toy(rng)
        mask = torch.tensor([[[True, True, True, False, False]]])
        loss, _, _ = wta_loss(traj, torch.zeros(1, 1, 6, dtype=torch.float64), future, mask,
                              torch.ones(1, 1, dtype=torch.bool))
        loss.backward()
        assert (traj.grad[..., 3:, :] == 0).all()


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_text("garbage")
    with pytest.raises(ConfigurationError):
        TrajectoryPredictor.load(path)
