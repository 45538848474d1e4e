"""Closed-loop scoring: schedules, metrics, and the drive loop itself."""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import micro_run_config
from latentdrive import evaluate, sim
from latentdrive.losses import LatentStateLite
from latentdrive.model import WorldModel


def make_log(**overrides):
    kwargs = dict(
        seed=0,
        imagine_ratio=0.0,
        route_length=50.0,
        rewards=np.array([1.0, 0.5, -1.0]),
        progress=np.array([10.0, 30.0, 45.0]),
        actions=np.zeros((3, 2)),
        imagined=np.zeros(3, dtype=bool),
        infractions=[],
        done_reason="timeout",
    )
    kwargs.update(overrides)
    return evaluate.EpisodeLog(**kwargs)


class TestImaginationSchedule:
    def test_window_arithmetic(self):
        sched = evaluate.ImaginationSchedule(window_s=2.0, dt=0.1, imagine_ratio=0.5)
        assert sched.steps_per_window == 20
        assert sched.imagine_steps == 10
        flags = [sched.imagined(i) for i in range(40)]
        assert flags == ([True] * 10 + [False] * 10) * 2

    def test_zero_ratio_never_imagines(self):
        sched = evaluate.ImaginationSchedule(imagine_ratio=0.0)
        assert not any(sched.imagined(i) for i in range(100))

    def test_ratio_point_three(self):
        sched = evaluate.ImaginationSchedule(window_s=2.0, dt=0.1, imagine_ratio=0.3)
        assert sched.imagine_steps == 6

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError, match="imagine_ratio"):
            evaluate.ImaginationSchedule(imagine_ratio=0.7, max_ratio=0.6)
        with pytest.raises(ValueError, match="imagine_ratio"):
            evaluate.ImaginationSchedule(imagine_ratio=-0.1)
        with pytest.raises(ValueError, match="positive"):
            evaluate.ImaginationSchedule(window_s=0.0)


class TestMetrics:
    def test_driving_score_oracle(self):
        log = make_log(infractions=[(3, "red_light"), (9, "collision_pedestrian")])
        score = evaluate.driving_score(log)
        assert score["R_completion"] == pytest.approx(45.0 / 50.0)
        assert score["I_penalty"] == pytest.approx(0.7 * 0.5)
        assert score["D"] == pytest.approx(0.9 * 0.35)

    def test_unknown_infraction_kind_costs_nothing(self):
        log = make_log(infractions=[(0, "mystery")])
        assert evaluate.driving_score(log)["I_penalty"] == 1.0

    def test_completion_clipped(self):
        log = make_log(progress=np.array([60.0]), rewards=np.array([1.0]))
        assert evaluate.driving_score(log)["R_completion"] == 1.0

    def test_empty_log(self):
        log = make_log(rewards=np.zeros(0), progress=np.zeros(0))
        assert evaluate.driving_score(log)["D"] == 0.0
        assert evaluate.rewards(log) == {"R": 0.0, "R_bar": 0.0}

    def test_rewards(self):
        out = evaluate.rewards(make_log())
        assert out["R"] == pytest.approx(0.5)
        assert out["R_bar"] == pytest.approx(0.5 / 3)


class TestBevIou:
    def test_hand_case(self):
        pred = np.array([[0, 0, 1, 2]])
        gt = np.array([[0, 1, 1, 1]])
        log = make_log(pred_labels=pred, gt_labels=gt)
        out = evaluate.bev_iou(log, n_classes=4)
        np.testing.assert_allclose(out["per_class"][:3], [1 / 2, 1 / 3, 0.0])
        assert np.isnan(out["per_class"][3])
        assert out["mIoU"] == pytest.approx((1 / 2 + 1 / 3 + 0.0) / 3)

    def test_pooled_counts_not_mean_of_ious(self):
        # class 0 per log: A gives iou 1 (tp=1), B gives iou 0 (fp=1, fn=1);
        # pooling the counts gives 1/3, not the 0.5 a mean of ious would
        a = make_log(pred_labels=np.array([[0]]), gt_labels=np.array([[0]]))
        b = make_log(pred_labels=np.array([[0, 1]]), gt_labels=np.array([[1, 0]]))
        out = evaluate.bev_iou([a, b], n_classes=2)
        np.testing.assert_allclose(out["per_class"], [1 / 3, 0.0])

    def test_perfect_prediction(self):
        labels = np.arange(6).reshape(1, 6)
        out = evaluate.bev_iou(make_log(pred_labels=labels, gt_labels=labels))
        assert out["mIoU"] == 1.0

    def test_logs_without_labels_skipped(self):
        assert math.isnan(evaluate.bev_iou(make_log())["mIoU"])


@pytest.fixture(scope="module")
def micro_model_cfg():
    cfg = micro_run_config()
    cfg.sim = dataclasses.replace(cfg.sim, max_steps=40)
    torch.manual_seed(0)
    model = WorldModel(cfg)
    model.eval()
    return model, cfg


class TestDrive:
    def test_rejects_unknown_variant(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        world = sim.build_world(cfg, 0)
        with pytest.raises(ValueError, match="variant"):
            evaluate.drive(model, world, evaluate.ImaginationSchedule(), variant="oracle")

    def test_log_shape_and_mask(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        world = sim.build_world(cfg, 0)
        sched = evaluate.ImaginationSchedule(window_s=2.0, dt=cfg.sim.dt, imagine_ratio=0.5)
        log = evaluate.drive(model, world, sched)
        n = log.n_steps
        assert 0 < n <= cfg.sim.max_steps
        assert log.progress.shape == (n,) and log.actions.shape == (n, 2)
        want = np.array([sched.imagined(i) for i in range(n)])
        np.testing.assert_array_equal(log.imagined, want)
        assert log.pred_labels.shape == (n, *cfg.bev.label_shape)
        assert log.gt_labels.shape == (n, *cfg.bev.label_shape)

    def test_log_labels_off(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        log = evaluate.drive(
            model, sim.build_world(cfg, 0), evaluate.ImaginationSchedule(), log_labels=False
        )
        assert log.pred_labels is None and log.gt_labels is None

    def test_matches_manual_recurrent_loop(self, micro_model_cfg):
        """Re-derive the deployment loop step by step and compare actions."""
        model, cfg = micro_model_cfg
        sched = evaluate.ImaginationSchedule(window_s=2.0, dt=cfg.sim.dt, imagine_ratio=0.5)
        log = evaluate.drive(
            model,
            sim.build_world(cfg, 3),
            sched,
            generator=torch.Generator().manual_seed(99),
            log_labels=False,
        )
        world = sim.build_world(cfg, 3)
        generator = torch.Generator().manual_seed(99)
        dyn = model.dynamics
        actions = []
        with torch.no_grad():
            h = torch.zeros(dyn.h_dim)
            a_prev = torch.zeros(dyn.action_dim)
            s_prev = None
            idx = 0
            while not world.done:
                if s_prev is not None:
                    h = dyn.deterministic_step(LatentStateLite(h=h, s=s_prev))
                if sched.imagined(idx):
                    s = dyn.prior(h, a_prev).sample(generator)
                else:
                    x = model.encoder.encode_observation(sim.observe(world))
                    s = dyn.posterior(h, a_prev, x).mean
                action_t = model.predict_action(h, s)
                actions.append(action_t.numpy().astype(np.float64))
                sim.step(world, actions[-1])
                s_prev, a_prev = s, action_t
                idx += 1
        np.testing.assert_array_equal(log.actions, np.stack(actions))

    def test_one_frame_is_memoryless(self, micro_model_cfg):
        """With ratio 0 every one_frame action depends on the frame alone."""
        model, cfg = micro_model_cfg
        sched = evaluate.ImaginationSchedule(window_s=2.0, dt=cfg.sim.dt, imagine_ratio=0.0)
        log = evaluate.drive(
            model, sim.build_world(cfg, 5), sched, variant="one_frame", log_labels=False
        )
        world = sim.build_world(cfg, 5)
        dyn = model.dynamics
        actions = []
        with torch.no_grad():
            zero_h = torch.zeros(dyn.h_dim)
            zero_a = torch.zeros(dyn.action_dim)
            while not world.done:
                x = model.encoder.encode_observation(sim.observe(world))
                s = dyn.posterior(zero_h, zero_a, x).mean
                action = model.predict_action(zero_h, s).numpy().astype(np.float64)
                actions.append(action)
                sim.step(world, action)
        np.testing.assert_array_equal(log.actions, np.stack(actions))

    def test_drive_random_reproducible(self, micro_model_cfg):
        _, cfg = micro_model_cfg
        a = evaluate.drive_random(sim.build_world(cfg, 4), seed=11)
        b = evaluate.drive_random(sim.build_world(cfg, 4), seed=11)
        assert a.variant == "random"
        assert np.abs(a.actions).max() <= 1.0
        np.testing.assert_array_equal(a.rewards, b.rewards)


class TestImaginedRollout:
    def test_shapes_and_mask(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        out = evaluate.imagined_rollout(model, cfg, seed=1, context=3, horizon=4)
        assert out["pred"].shape == (7, *cfg.bev.label_shape)
        assert out["gt"].shape == (7, *cfg.bev.label_shape)
        np.testing.assert_array_equal(out["imagined"], [False] * 3 + [True] * 4)

    def test_rejects_degenerate_lengths(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        with pytest.raises(ValueError):
            evaluate.imagined_rollout(model, cfg, seed=0, context=0)


class TestResultsTable:
    def rows(self):
        return [
            {"ratio": 0.0, "seed": 0, "variant": "full", "D": 0.8, "R_completion": 0.8,
             "I_penalty": 1.0, "R": 10.0, "R_bar": 0.5, "mIoU": 0.6, "steps": 20,
             "done_reason": "route_complete"},
            {"ratio": 0.0, "seed": 1, "variant": "full", "D": 0.4, "R_completion": 0.4,
             "I_penalty": 1.0, "R": 4.0, "R_bar": 0.3, "mIoU": float("nan"), "steps": 10,
             "done_reason": "timeout"},
            {"ratio": 0.2, "seed": 0, "variant": "full", "D": 0.5, "R_completion": 0.5,
             "I_penalty": 1.0, "R": 5.0, "R_bar": 0.4, "mIoU": 0.5, "steps": 12,
             "done_reason": "timeout"},
            {"ratio": 0.0, "seed": 0, "variant": "one_frame", "D": 0.1, "R_completion": 0.1,
             "I_penalty": 1.0, "R": 1.0, "R_bar": 0.1, "mIoU": 0.2, "steps": 8,
             "done_reason": "off_route"},
        ]

    def test_aggregate_means_per_ratio_and_variant(self):
        agg = evaluate.aggregate(self.rows(), variant="full")
        assert set(agg) == {0.0, 0.2}
        assert agg[0.0]["D"] == pytest.approx(0.6)
        assert agg[0.0]["n"] == 2
        assert agg[0.0]["mIoU"] == pytest.approx(0.6)  # nan row excluded
        assert agg[0.2]["R_bar"] == pytest.approx(0.4)
        one = evaluate.aggregate(self.rows(), variant="one_frame")
        assert set(one) == {0.0} and one[0.0]["D"] == pytest.approx(0.1)

    def test_write_results(self, tmp_path):
        evaluate.write_results(tmp_path / "r.csv", self.rows())
        with (tmp_path / "r.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert float(rows[0]["D"]) == 0.8
        assert rows[3]["variant"] == "one_frame"

    def test_plot_sweep_writes_png(self, tmp_path):
        evaluate.plot_sweep(self.rows(), tmp_path / "sweep.png")
        head = (tmp_path / "sweep.png").read_bytes()[:8]
        assert head == b"\x89PNG\r\n\x1a\n"


class TestEvaluateSeed:
    def test_row_contract(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        row = evaluate.evaluate_seed(model, cfg, seed=2, ratio=0.2)
        for key in evaluate.RESULT_FIELDS:
            assert key in row
        assert 0.0 <= row["D"] <= 1.0
        assert row["variant"] == "full"
        assert row["steps"] > 0

    def test_ratio_above_cap_rejected(self, micro_model_cfg):
        model, cfg = micro_model_cfg
        with pytest.raises(ValueError, match="imagine_ratio"):
            evaluate.evaluate_seed(model, cfg, seed=0, ratio=0.9)

    def test_sweep_writes_outputs(self, micro_model_cfg, tmp_path):
        model, cfg = micro_model_cfg
        rows = evaluate.imagination_sweep(
            model, cfg, seeds=[0], ratios=(0.0,), out_dir=tmp_path, variants=("full",)
        )
        assert len(rows) == 1
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "sweep.png").exists()
