import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixtask.envs import (A_SCALE, DT, SUITES, V_MAX, BaseTask, BaseTaskRange, BatchPointEnv, Regime, TaskDistributionSpec,
                          TaskSpec, maybe_switch_task, oracle_action, read_trace, reset, reward_bound, run_controller,
                          sample_tasks, step, write_trace)


def vel_task(v, **kw):
    return TaskSpec(BaseTask.VELOCITY, (v,), **kw)


class TestSampleTasks:
    def test_ood_train_range(self):
        tasks = sample_tasks("point-vel-ood", 500, "train", np.random.default_rng(0))
        assert all(2.0 <= t.goal[0] <= 4.0 for t in tasks)

    def test_ood_test_range(self):
        tasks = sample_tasks("point-vel-ood", 500, "test", np.random.default_rng(0))
        assert all(1.0 <= t.goal[0] <= 2.0 or 4.0 <= t.goal[0] <= 5.0 for t in tasks)
        # both pieces of the union are used
        assert any(t.goal[0] < 2 for t in tasks) and any(t.goal[0] > 4 for t in tasks)

    def test_ood_disjoint_exhaustive(self):
        tasks = sample_tasks("point-vel-ood", 10_000, "test", np.random.default_rng(1))
        goals = np.array([t.goal[0] for t in tasks])
        assert not np.any((goals > 2.0) & (goals < 4.0))

    def test_parametric_range(self):
        tasks = sample_tasks("point-vel", 300, "train", np.random.default_rng(0))
        assert all(0.0 <= t.goal[0] <= 3.0 and t.base_task == BaseTask.VELOCITY for t in tasks)

    def test_base_task_frequencies(self):
        tasks = sample_tasks("point-multi", 400, "train", np.random.default_rng(0))
        counts = np.bincount([int(t.base_task) for t in tasks], minlength=4)
        # binomial(400, 1/4): 99% interval is roughly 100 +- 22, spec tolerance 30
        assert np.all(np.abs(counts - 100) <= 30)

    def test_goals_inside_declared_ranges(self):
        dist = SUITES["point-multi"]
        for t in sample_tasks(dist, 400, "test", np.random.default_rng(2)):
            assert dist.range_for(t.base_task).contains(t.param, "test")

    def test_missing_test_split(self):
        dist = TaskDistributionSpec("x", Regime.PARAMETRIC, (BaseTaskRange(BaseTask.VELOCITY, ((0.0, 1.0),)),))
        with pytest.raises(ValueError):
            sample_tasks(dist, 1, "test", np.random.default_rng(0))

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            TaskDistributionSpec("bad", Regime.OOD, (BaseTaskRange(BaseTask.VELOCITY, ((2.0, 4.0),), ((3.0, 5.0),)),))
        with pytest.raises(ValueError):
            TaskDistributionSpec("bad", Regime.NONPARAMETRIC, (BaseTaskRange(BaseTask.VELOCITY, ((1.0, 2.0),)),))

    def test_nonstat_schedule_fields(self):
        t = sample_tasks("point-vel-nonstat", 1, "train", np.random.default_rng(0))[0]
        assert t.nonstationary and t.change_period == 100 and t.change_prob == 0.5


class TestStep:
    def test_reset(self):
        s = reset(vel_task(1.0))
        assert np.array_equal(s.position, [0, 0]) and np.array_equal(s.velocity, [0, 0]) and s.t == 0

    def test_reset_keeps_nonstationary_task(self):
        task = vel_task(1.0, nonstationary=True)
        assert reset(task, np.random.default_rng(0)).active_task == task

    def test_velocity_reward_example(self):
        s = reset(vel_task(1.5))
        # one step at +1 raises v_x from 0 to dt * a_scale = 0.5
        s, r, _ = step(s, [1.0, 0.0])
        s, r, _ = step(s, [1.0, 0.0])
        assert s.velocity[0] == pytest.approx(1.0)
        assert r == pytest.approx(-0.5)

    def test_goal_reward_zero_at_goal(self):
        task = TaskSpec(BaseTask.GOAL, (0.0, 0.0))
        _, r, _ = step(reset(task), [0.0, 0.0])
        assert r == 0.0

    def test_angle_reward_wraps(self):
        task = TaskSpec(BaseTask.ANGLE, (math.pi - 0.05,))
        s = reset(task)
        s, r, _ = step(s, [-1.0, -0.02])  # heading just below -pi
        assert -0.2 < r <= 0

    def test_burst_reward(self):
        task = TaskSpec(BaseTask.BURST, (1.0,))
        s, r, _ = step(reset(task), [0.0, -1.0])
        assert r == pytest.approx(-abs(1.0 - 0.5))

    def test_action_clipping_flag(self):
        s, _, _ = step(reset(vel_task(1.0)), [3.0, 0.0])
        assert s.action_clipped and s.velocity[0] == pytest.approx(DT * A_SCALE)
        s, _, _ = step(reset(vel_task(1.0)), [0.3, 0.0])
        assert not s.action_clipped

    def test_euler_oracle(self):
        rng = np.random.default_rng(0)
        actions = rng.uniform(-1, 1, size=(100, 2))
        s = reset(vel_task(1.0), max_path_length=100)
        p, v = [0.0, 0.0], [0.0, 0.0]
        for a in actions:
            s, _, _ = step(s, a)
            for i in range(2):
                p[i] = p[i] + 0.1 * v[i]
                v[i] = min(max(v[i] + 0.1 * 5.0 * a[i], -10.0), 10.0)
        assert np.allclose(s.position, p, atol=1e-12) and np.allclose(s.velocity, v, atol=1e-12)

    def test_velocity_clipped(self):
        s = reset(vel_task(1.0))
        for _ in range(50):
            s, _, _ = step(s, [1.0, -1.0])
        assert s.velocity[0] == V_MAX and s.velocity[1] == -V_MAX

    def test_done_on_horizon_only(self):
        s = reset(vel_task(1.0), max_path_length=7)
        dones = []
        for _ in range(7):
            s, _, d = step(s, [0.0, 0.0])
            dones.append(d)
        assert dones == [False] * 6 + [True]


@given(st.sampled_from(sorted(SUITES)), st.integers(0, 10_000))
def test_reward_bound(suite, seed):
    rng = np.random.default_rng(seed)
    H = 200
    task = sample_tasks(suite, 1, "train", rng)[0]
    bound = reward_bound(suite, H)
    s = reset(task, max_path_length=H)
    for _ in range(H):
        s, r, _ = step(s, rng.uniform(-1, 1, 2) * 2)
        assert abs(r) <= bound


def test_velocity_bound_formula():
    assert reward_bound("point-vel", 200) == 3.0 + V_MAX


@given(st.integers(0, 2**32 - 1))
def test_trajectory_determinism(seed):
    actions = np.random.default_rng(seed).uniform(-1, 1, (20, 2))
    task = sample_tasks("point-multi", 1, "train", np.random.default_rng(seed))[0]

    def run():
        s, out = reset(task), []
        for a in actions:
            s, r, _ = step(s, a)
            out.append((tuple(s.position), r))
        return out
    assert run() == run()


class TestSwitching:
    def task(self, p=1.0):
        return vel_task(1.0, nonstationary=True, change_period=100, change_prob=p)

    def at(self, t, task):
        return reset(task, max_path_length=500).__class__(np.zeros(2), np.zeros(2), t, task, 500)

    def test_forced_change(self):
        s = maybe_switch_task(self.at(100, self.task()), np.random.default_rng(0), SUITES["point-vel-nonstat"])
        assert s.task_changed and s.active_task.goal != (1.0,)
        assert 0.0 <= s.active_task.goal[0] <= 3.0
        assert s.active_task.base_task == BaseTask.VELOCITY

    def test_off_boundary(self):
        s = self.at(150, self.task())
        assert maybe_switch_task(s, np.random.default_rng(0)) is s

    def test_no_change_at_zero_or_horizon(self):
        for t in (0, 500):
            s = self.at(t, self.task())
            assert maybe_switch_task(s, np.random.default_rng(0)) is s

    def test_stationary_noop(self):
        s = self.at(100, vel_task(1.0))
        assert maybe_switch_task(s, np.random.default_rng(0)) is s

    def test_expected_changes(self):
        n = 10_000
        tasks = [self.task(0.5)] * n
        rngs = [np.random.default_rng(i) for i in range(n)]
        env = BatchPointEnv(tasks, rngs, 500, SUITES["point-vel-nonstat"])
        counts = np.zeros(n)
        for t in range(1, 501):
            _, _, _, changed = env.step(np.zeros((n, 2)))
            if changed.any():
                assert t % 100 == 0 and t < 500
            counts += changed
        # four Bernoulli(0.5) chances per episode
        assert abs(counts.mean() - 2.0) <= 0.1

    def test_batch_matches_single_step(self):
        task = sample_tasks("point-vel-nonstat", 1, "train", np.random.default_rng(3))[0]
        dist = SUITES["point-vel-nonstat"]
        actions = np.random.default_rng(4).uniform(-1, 1, (500, 2))
        env = BatchPointEnv([task], [np.random.default_rng(9)], 500, dist)
        s, rng = reset(task, max_path_length=500), np.random.default_rng(9)
        for a in actions:
            obs, r, _, changed = env.step(a[None])
            s, r1, _ = step(s, a)
            s = maybe_switch_task(s, rng, dist)
            assert r[0] == r1 and changed[0] == s.task_changed
            assert np.array_equal(obs[0], s.obs)


class TestControllers:
    @pytest.mark.parametrize("suite", ["point-vel", "point-vel-ood", "point-multi"])
    def test_oracle_beats_idle(self, suite):
        tasks = sample_tasks(suite, 20, "test", np.random.default_rng(0))
        oracle = run_controller(tasks, "oracle", 200)
        zero = run_controller(tasks, "zero", 200)
        assert np.all(oracle >= zero)

    def test_velocity_oracle_is_minimum_time(self):
        speeds = (0.5, 1.5, 3.0, 1.25)
        # full thrust gains 0.5 per step; the residual error is paid once per step until arrival
        expected = []
        for v in speeds:
            errors, vel = [], 0.0
            while vel < v:
                vel = min(vel + DT * A_SCALE, v)
                errors.append(v - vel)
            expected.append(-sum(errors))
        assert np.allclose(run_controller([vel_task(v) for v in speeds], "oracle", 200), expected)

    def test_single_state_oracle(self):
        task = TaskSpec(BaseTask.GOAL, (2.0, -1.0))
        s = reset(task)
        for _ in range(200):
            s, r, _ = step(s, oracle_action(s))
        assert r > -0.05


def test_trace_round_trip():
    recs = [{"t": 0, "s": [0, 0, 0, 0], "a": [0.1, 0.2], "r": -1.0, "s'": [0, 0, 0.05, 0.1], "done": False,
             "task_goal": [1.0, 0.0], "task_changed": False}]
    fh = io.StringIO()
    write_trace(fh, recs)
    fh.seek(0)
    assert read_trace(fh) == recs
