import itertools

import numpy as np
import pytest
import torch

from oodsim.data import build_windows
from oodsim.errors import (
    BudgetZero,
    EmptyPool,
    InvalidEdit,
    SpaceTooLarge,
    UnknownPolicy,
    UnknownState,
    WindowOutOfRange,
)
from oodsim.model import ModelConfig
from oodsim.simulate import (
    PolicyEdit,
    Scenario,
    ScheduleEvaluator,
    Simulator,
    build_actions,
    exhaustive_optimize,
    mcts_optimize,
)
from oodsim.training import SplitConfig, TrainConfig, train

CFG = TrainConfig(
    model=ModelConfig(
        hidden_dim=8, policy_dim=6, pe_dim=4, n_heads=2, ffw_mult=2,
        dropout=0.1, codebook_size=4, relation_cap=8, t_hist=3, t_fut=2,
    ),
    split=SplitConfig(("2019-01", "2020-06"), ("2020-07", "2020-12"), ("2021-01", "2021-06")),
    max_epochs=2,
    batch_size=16,
    seed=9,
)


@pytest.fixture(scope="module")
def sim(small_bundle):
    ckpt = train(small_bundle, CFG)
    return Simulator(ckpt, small_bundle)


@pytest.fixture(scope="module")
def a_policy(small_bundle):
    return small_bundle.corpus[0]


class TestForecast:
    def test_matches_trainer_side_prediction_bit_exact(self, sim, small_bundle):
        wins = build_windows(
            sim.panel_norm, 3, 2, ("2020-01", "2020-06"),
            graph=small_bundle.graph, corpus=small_bundle.corpus, k_hops=1,
            mode="contained",
        )
        w = wins[0]
        with torch.no_grad():
            trainer_preds = sim.model([w]).preds.numpy()[0]
        traj = sim.forecast(Scenario(state=w.state, window_start=w.months[0]))
        assert traj.normalized == [float(v) for v in trainer_preds]

    def test_deterministic(self, sim):
        sc = Scenario(state="S02", window_start="2020-03")
        t1 = sim.forecast(sc)
        t2 = sim.forecast(sc)
        assert t1.normalized == t2.normalized and t1.counts == t2.counts

    def test_month_labels_follow_window(self, sim):
        traj = sim.forecast(Scenario(state="S01", window_start="2020-03"))
        assert traj.months == ["2020-06", "2020-07"]

    def test_denormalization_round_trip(self, sim):
        traj = sim.forecast(Scenario(state="S03", window_start="2020-02"))
        si = sim.panel_norm.state_index("S03")
        ch = sim.panel_norm.outcome_channel
        mean, std = sim.stats.mean[si, ch], sim.stats.std[si, ch]
        for n, c in zip(traj.normalized, traj.counts):
            assert c == pytest.approx(n * std + mean, rel=1e-12)

    def test_unknown_state(self, sim):
        with pytest.raises(UnknownState):
            sim.forecast(Scenario(state="ZZ", window_start="2020-01"))

    def test_window_out_of_range(self, sim):
        with pytest.raises(WindowOutOfRange):
            sim.forecast(Scenario(state="S01", window_start="2018-01"))
        with pytest.raises(WindowOutOfRange):
            sim.forecast(Scenario(state="S01", window_start="2021-05"))

    def test_override_patches_history(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        base = sim.forecast(sc)
        patched = Scenario(
            state="S01", window_start="2020-01",
            overrides=({"month": "2020-02", "channel": "unemployment_rate", "value": 25.0},),
        )
        assert sim.forecast(patched).normalized != base.normalized

    def test_override_outside_window_rejected(self, sim):
        sc = Scenario(
            state="S01", window_start="2020-01",
            overrides=({"month": "2020-09", "channel": "ui_claims", "value": 1.0},),
        )
        with pytest.raises(WindowOutOfRange):
            sim.forecast(sc)


class TestCounterfactual:
    def window_with_policy(self, sim):
        """A (state, window) whose months include an enacted policy."""
        for rec in sim.bundle.corpus:
            months = [m for m in sim.panel_norm.months]
            mi = sim.panel_norm.month_index(rec.enacted_month)
            if 1 <= mi <= len(months) - sim.t_hist - sim.t_fut:
                return rec, months[mi - 1]
        raise RuntimeError("no usable policy in fixture corpus")

    def test_replace_by_self_delta_exactly_zero(self, sim):
        rec, start = self.window_with_policy(sim)
        sc = Scenario(state=rec.state, window_start=start)
        edit = PolicyEdit(
            kind="REPLACE", policy_id=rec.policy_id,
            month=rec.enacted_month, replacement_id=rec.policy_id,
        )
        _, _, delta = sim.counterfactual(sc, edit)
        assert delta == 0.0

    def test_remove_only_policy_finite(self, sim):
        rec, start = self.window_with_policy(sim)
        sc = Scenario(state=rec.state, window_start=start)
        edit = PolicyEdit(kind="REMOVE", policy_id=rec.policy_id, month=rec.enacted_month)
        fact, cf, delta = sim.counterfactual(sc, edit)
        assert np.isfinite(delta)
        assert len(cf.counts) == sim.t_fut

    def test_edit_locality_replace(self, sim, small_bundle):
        # Active sets before t* are untouched; from t* on the target policy
        # is swapped out.
        rec, start = self.window_with_policy(sim)
        other = next(
            r for r in small_bundle.corpus if r.policy_id != rec.policy_id
        )
        t_star = rec.enacted_month
        sc_fact = Scenario(state=rec.state, window_start=start)
        sc_edit = Scenario(
            state=rec.state, window_start=start,
            edits=(
                PolicyEdit(
                    kind="REPLACE", policy_id=rec.policy_id,
                    month=t_star, replacement_id=other.policy_id,
                ),
            ),
        )
        from oodsim.simulate import ActiveTimeline

        months = sim._window_months(sc_fact)
        fact = ActiveTimeline(sim, sc_fact, months)
        edit = ActiveTimeline(sim, sc_edit, months)
        for m in months:
            if m < t_star:
                assert fact.active_ids(m) == edit.active_ids(m)
            else:
                assert rec.policy_id not in edit.active_ids(m)
                assert other.policy_id in edit.active_ids(m)

    def test_advance_shifts_enactment(self, sim):
        rec, start = self.window_with_policy(sim)
        sc = Scenario(
            state=rec.state, window_start=start,
            edits=(PolicyEdit(kind="ADVANCE", policy_id=rec.policy_id, advance_months=2),),
        )
        from oodsim.simulate import ActiveTimeline

        months = sim._window_months(sc)
        tl = ActiveTimeline(sim, sc, months)
        from oodsim.months import add_months

        assert rec.policy_id in tl.active_ids(add_months(rec.enacted_month, -2))

    def test_invalid_edits_rejected(self, sim, a_policy):
        sc = Scenario(state="S01", window_start="2020-01")
        with pytest.raises(InvalidEdit):
            sim.counterfactual(
                sc, PolicyEdit(kind="ADVANCE", policy_id=a_policy.policy_id, advance_months=0)
            )
        with pytest.raises(InvalidEdit):
            sim.counterfactual(
                sc,
                PolicyEdit(
                    kind="REMOVE", policy_id=a_policy.policy_id, month="2023-01"
                ),
            )
        with pytest.raises(UnknownPolicy):
            sim.counterfactual(
                sc, PolicyEdit(kind="REMOVE", policy_id="nope", month="2020-02")
            )


def pool_of(sim, n):
    return tuple(sorted(r.policy_id for r in sim.bundle.corpus))[:n]


class TestExhaustive:
    def test_empty_pool_noop_schedule(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        best = exhaustive_optimize(sim, sc, (), depth=2)
        assert best == ((), ())

    def test_depth_one_matches_linear_scan(self, sim):
        sc = Scenario(state="S02", window_start="2020-02")
        pool = pool_of(sim, 3)
        ev = ScheduleEvaluator(sim, sc)
        best = exhaustive_optimize(sim, sc, pool, depth=1, evaluator=ev)
        costs = {a: ev.cost((a,)) for a in build_actions(pool)}
        assert best == (min(costs, key=lambda a: (costs[a], a)),)

    def test_argmin_beats_every_schedule(self, sim):
        sc = Scenario(state="S03", window_start="2020-01")
        pool = pool_of(sim, 2)
        ev = ScheduleEvaluator(sim, sc)
        best = exhaustive_optimize(sim, sc, pool, depth=2, evaluator=ev)
        best_cost = ev.cost(best)
        for schedule in itertools.product(build_actions(pool), repeat=2):
            assert best_cost <= ev.cost(schedule)

    def test_space_guard(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        with pytest.raises(SpaceTooLarge):
            exhaustive_optimize(sim, sc, tuple(f"p{i}" for i in range(30)), depth=4)

    def test_pairs_action_space(self):
        actions = build_actions(("b", "a", "c"), subset_max=2)
        assert actions[0] == ()
        assert ("a",) in actions and ("a", "b") in actions
        assert len(actions) == 1 + 3 + 3


class TestMcts:
    def test_depth_one_exhaustive_when_budget_covers_pool(self, sim):
        sc = Scenario(state="S02", window_start="2020-02")
        pool = pool_of(sim, 2)
        res = mcts_optimize(sim, sc, pool, depth=1, budget=len(pool) + 1, seed=3)
        want = exhaustive_optimize(sim, sc, pool, depth=1)
        assert tuple(tuple(a) for a in res.schedule) == want

    def test_budget_one_returns_sampled_path(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        res = mcts_optimize(sim, sc, pool_of(sim, 2), depth=2, budget=1, seed=0)
        assert len(res.schedule) == 2
        assert res.diagnostics["simulations"] == 1

    def test_visit_conservation(self, sim):
        sc = Scenario(state="S01", window_start="2020-02")
        res = mcts_optimize(sim, sc, pool_of(sim, 2), depth=2, budget=60, seed=1)

        def check(node):
            if node["children"]:
                assert node["n"] == 1 + sum(c["n"] for c in node["children"])
                for c in node["children"]:
                    check(c)

        assert res.tree["n"] == 61  # root initialized at 1 + one per simulation
        check(res.tree)

    def test_seeded_reproducibility(self, sim):
        sc = Scenario(state="S03", window_start="2020-01")
        r1 = mcts_optimize(sim, sc, pool_of(sim, 3), depth=2, budget=40, seed=7)
        r2 = mcts_optimize(sim, sc, pool_of(sim, 3), depth=2, budget=40, seed=7)
        assert r1.schedule == r2.schedule
        assert r1.tree == r2.tree

    def test_reward_bounds_observed(self, sim):
        sc = Scenario(state="S04", window_start="2020-01")
        res = mcts_optimize(sim, sc, pool_of(sim, 2), depth=2, budget=50, seed=2)
        lo, hi = res.diagnostics["cost_min"], res.diagnostics["cost_max"]
        assert lo <= res.cost <= hi or lo == hi

        def costs(node):
            yield node["mean_value"]
            for c in node["children"]:
                yield from costs(c)

        for value in costs(res.tree):
            assert lo - 1e-9 <= value <= hi + 1e-9

    def test_trajectory_spans_all_periods(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        res = mcts_optimize(sim, sc, pool_of(sim, 1), depth=3, budget=10, seed=0)
        assert len(res.trajectory.months) == 3 * sim.t_fut

    def test_guards(self, sim):
        sc = Scenario(state="S01", window_start="2020-01")
        with pytest.raises(EmptyPool):
            mcts_optimize(sim, sc, (), depth=1, budget=5)
        with pytest.raises(BudgetZero):
            mcts_optimize(sim, sc, pool_of(sim, 1), depth=1, budget=0)
        with pytest.raises(UnknownPolicy):
            mcts_optimize(sim, sc, ("missing",), depth=1, budget=5)

    def test_injection_carries_forward(self, sim):
        # A policy injected in period 1 stays active in later periods'
        # windows via the timeline.
        sc = Scenario(state="S01", window_start="2020-01")
        pid = pool_of(sim, 1)[0]
        ev = ScheduleEvaluator(sim, sc)
        with_early = ev.cost(((pid,), ()))
        with_late = ev.cost(((), (pid,)))
        without = ev.cost(((), ()))
        assert with_early != without or with_late != without
