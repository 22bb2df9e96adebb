"""Trained-model simulator: forecasting, counterfactual policy edits, and
schedule search over candidate policies.

A scenario pins a state and a history window; its policy timeline starts from
the corpus and is transformed by edits. Multi-period schedule search rolls
the window forward between decision periods, feeding predicted outcomes back
into the outcome channel while freezing all other covariates at their last
observed values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import DataBundle, PolicyKG, PolicyRecord, WindowSample, normalize
from .errors import (
    BudgetZero,
    EmptyPool,
    InvalidEdit,
    SpaceTooLarge,
    UnknownPolicy,
    UnknownState,
    WindowOutOfRange,
)
from .months import add_months, months_between
from .spatial import khop_subgraph
from .training import model_from_checkpoint

EDIT_KINDS = ("REPLACE", "REMOVE", "ADVANCE")


@dataclass(frozen=True)
class PolicyEdit:
    kind: str
    policy_id: str
    month: str | None = None  # target month t* (REPLACE / REMOVE)
    replacement_id: str | None = None  # REPLACE only
    advance_months: int | None = None  # ADVANCE only

    def validate(self):
        if self.kind not in EDIT_KINDS:
            raise InvalidEdit(f"unknown edit kind {self.kind!r}")
        if self.kind == "REPLACE" and not self.replacement_id:
            raise InvalidEdit("REPLACE needs a replacement policy id")
        if self.kind == "ADVANCE":
            if self.advance_months is None or self.advance_months <= 0:
                raise InvalidEdit("ADVANCE offset must be > 0")
        elif self.month is None:
            raise InvalidEdit(f"{self.kind} needs a target month")

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyEdit":
        try:
            return cls(
                kind=d["kind"],
                policy_id=d["policy_id"],
                month=d.get("month"),
                replacement_id=d.get("replacement_id"),
                advance_months=d.get("advance_months"),
            )
        except KeyError as exc:
            raise InvalidEdit(f"edit missing field {exc}") from None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "policy_id": self.policy_id}
        if self.month is not None:
            out["month"] = self.month
        if self.replacement_id is not None:
            out["replacement_id"] = self.replacement_id
        if self.advance_months is not None:
            out["advance_months"] = self.advance_months
        return out


@dataclass(frozen=True)
class Scenario:
    state: str
    window_start: str
    overrides: tuple[dict, ...] = ()  # {month, channel, value} raw-scale patches
    edits: tuple[PolicyEdit, ...] = ()
    pool: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            return cls(
                state=d["state"],
                window_start=d["window_start"],
                overrides=tuple(d.get("overrides") or ()),
                edits=tuple(PolicyEdit.from_dict(e) for e in (d.get("edits") or ())),
                pool=tuple(d.get("pool") or ()),
            )
        except KeyError as exc:
            raise InvalidEdit(f"scenario missing field {exc}") from None


@dataclass
class Trajectory:
    state: str
    months: list[str]
    normalized: list[float]
    counts: list[float]

    def to_dict(self) -> dict:
        return {
            "state": self.state,
            "trajectory": [
                {"month": m, "normalized": n, "count": c}
                for m, n, c in zip(self.months, self.normalized, self.counts)
            ],
        }


class ActiveTimeline:
    """Month -> active policy ids for one scenario (edits applied), plus any
    schedule injections accumulated during rollout."""

    def __init__(self, simulator: "Simulator", scenario: Scenario, window_months: list[str]):
        self.state = scenario.state
        self.records = []
        shift: dict[str, int] = {}
        for edit in scenario.edits:
            edit.validate()
            if edit.kind == "ADVANCE":
                simulator._lookup_record(edit.policy_id)
                shift[edit.policy_id] = shift.get(edit.policy_id, 0) + edit.advance_months
        for rec in simulator.bundle.corpus:
            if rec.state != scenario.state:
                continue
            if rec.policy_id in shift:
                k = shift[rec.policy_id]
                rec = replace(
                    rec,
                    enacted_month=add_months(rec.enacted_month, -k),
                    repealed_month=(
                        add_months(rec.repealed_month, -k) if rec.repealed_month else None
                    ),
                )
            self.records.append(rec)
        self.swaps: list[tuple[str, str, str | None]] = []  # (t*, removed, added)
        for edit in scenario.edits:
            if edit.kind == "ADVANCE":
                continue
            if edit.month not in window_months:
                raise InvalidEdit(f"edit month {edit.month} outside the history window")
            simulator._lookup_record(edit.policy_id)
            added = None
            if edit.kind == "REPLACE":
                simulator._lookup_record(edit.replacement_id)
                added = edit.replacement_id
            self.swaps.append((edit.month, edit.policy_id, added))
        self.injections: list[tuple[str, str]] = []  # (policy_id, enact month)

    def inject(self, policy_id: str, month: str) -> None:
        self.injections.append((policy_id, month))

    def active_ids(self, month: str) -> tuple[str, ...]:
        out = {rec.policy_id for rec in self.records if rec.active_at(month)}
        for t_star, removed, added in self.swaps:
            if months_between(t_star, month) >= 0:
                out.discard(removed)
                if added is not None:
                    out.add(added)
        for pid, enact in self.injections:
            if months_between(enact, month) >= 0:
                out.add(pid)
        return tuple(sorted(out))


class SearchNode:
    """One node of the schedule-search tree (a partial action sequence)."""

    __slots__ = ("action", "depth", "n", "evals", "cost_sum", "children", "untried")

    def __init__(self, action: tuple[str, ...] | None, depth: int, actions: list):
        self.action = action
        self.depth = depth
        self.n = 0  # visit count; the root's initialization counts as one
        self.evals = 0  # simulations backpropagated through this node
        self.cost_sum = 0.0
        self.children: dict[tuple[str, ...], SearchNode] = {}
        self.untried: list[tuple[str, ...]] = list(actions)

    @property
    def mean_cost(self) -> float:
        return self.cost_sum / self.evals if self.evals else 0.0

    def to_dict(self) -> dict:
        return {
            "action": list(self.action) if self.action is not None else None,
            "n": self.n,
            "mean_value": self.mean_cost,
            "children": [self.children[a].to_dict() for a in sorted(self.children)],
        }


@dataclass
class OptimizeResult:
    schedule: list[list[str]]
    cost: float
    trajectory: Trajectory
    tree: dict
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule,
            "cost": self.cost,
            **self.trajectory.to_dict(),
            "tree": self.tree,
            "diagnostics": self.diagnostics,
        }


def build_actions(pool: tuple[str, ...], subset_max: int = 1) -> list[tuple[str, ...]]:
    """No-op first, then singletons, then unordered pairs, in sorted order."""
    actions: list[tuple[str, ...]] = [()]
    ids = sorted(pool)
    actions.extend((p,) for p in ids)
    if subset_max >= 2:
        actions.extend((a, b) for i, a in enumerate(ids) for b in ids[i + 1 :])
    return actions


class Simulator:
    """Wraps a trained checkpoint as a deterministic simulation function."""

    def __init__(self, ckpt: Checkpoint, bundle: DataBundle):
        torch.set_num_threads(1)
        self.ckpt = ckpt
        self.bundle = bundle
        self.model, self.train_config = model_from_checkpoint(ckpt, bundle)
        self.panel_norm, _ = normalize(bundle.panel, stats=ckpt.norm_stats)
        self.stats = ckpt.norm_stats
        self.records: dict[str, PolicyRecord] = {
            rec.policy_id: rec for rec in bundle.corpus
        }
        self.t_hist = self.train_config.model.t_hist
        self.t_fut = self.train_config.model.t_fut

    # -- scenario resolution ------------------------------------------------

    def _lookup_record(self, policy_id: str) -> PolicyRecord:
        rec = self.records.get(policy_id)
        if rec is None:
            raise UnknownPolicy(f"unknown policy {policy_id!r}")
        return rec

    def _window_months(self, scenario: Scenario) -> list[str]:
        panel = self.panel_norm
        if scenario.state not in panel.states:
            raise UnknownState(f"unknown state {scenario.state!r}")
        start = months_between(panel.months[0], scenario.window_start)
        if start < 0 or start + self.t_hist > panel.num_months:
            raise WindowOutOfRange(
                f"history window starting {scenario.window_start} not covered by panel"
            )
        return [add_months(scenario.window_start, j) for j in range(self.t_hist)]

    def _kg_for(self, state: str, month: str, ids: tuple[str, ...]) -> PolicyKG:
        triplets: list[tuple[str, str, str]] = []
        for pid in ids:
            triplets.extend(self._lookup_record(pid).triplets)
        return PolicyKG(state=state, month=month, triplets=tuple(triplets))

    def _base_features(self, scenario: Scenario):
        panel = self.panel_norm
        sub = khop_subgraph(self.bundle.graph, scenario.state, self.train_config.model.k_hops)
        idx = [panel.state_index(n) for n in sub.nodes]
        start = panel.month_index(scenario.window_start)
        feats = panel.features[idx, start : start + self.t_hist, :].copy()
        si = panel.state_index(scenario.state)
        window_months = [add_months(scenario.window_start, j) for j in range(self.t_hist)]
        for patch in scenario.overrides:
            month, channel, value = patch["month"], patch["channel"], patch["value"]
            if month not in window_months:
                raise WindowOutOfRange(f"override month {month} outside the window")
            ci = panel.channel_index(channel)
            feats[sub.center_index, window_months.index(month), ci] = (
                float(value) - self.stats.mean[si, ci]
            ) / self.stats.std[si, ci]
        return feats, sub

    def _make_sample(
        self, state: str, feats: np.ndarray, sub, t0: int,
        window_months: list[str], active: list[tuple[str, ...]],
    ) -> WindowSample:
        kgs = tuple(
            self._kg_for(state, m, ids) for m, ids in zip(window_months, active)
        )
        return WindowSample(
            state=state,
            t0=t0,
            neighborhood=sub.nodes,
            center_index=sub.center_index,
            sub_edges=sub.edges,
            history=feats,
            target=np.zeros(self.t_fut),
            policy_kgs=kgs,
            months=tuple(window_months),
            target_months=tuple(
                add_months(window_months[-1], 1 + j) for j in range(self.t_fut)
            ),
            active_ids=tuple(active),
        )

    def _denorm(self, state: str, values: np.ndarray) -> np.ndarray:
        si = self.panel_norm.state_index(state)
        ch = self.panel_norm.outcome_channel
        return values * self.stats.std[si, ch] + self.stats.mean[si, ch]

    # -- applications ---------------------------------------------------------

    def forecast(self, scenario: Scenario) -> Trajectory:
        """Single forward pass under the scenario's (possibly edited) timeline."""
        window_months = self._window_months(scenario)
        timeline = ActiveTimeline(self, scenario, window_months)
        active = [timeline.active_ids(m) for m in window_months]
        feats, sub = self._base_features(scenario)
        t0 = self.panel_norm.month_index(scenario.window_start)
        sample = self._make_sample(scenario.state, feats, sub, t0, window_months, active)
        with torch.no_grad():
            preds = self.model([sample]).preds.numpy()[0]
        months = [add_months(window_months[-1], 1 + j) for j in range(self.t_fut)]
        counts = self._denorm(scenario.state, preds)
        return Trajectory(
            state=scenario.state,
            months=months,
            normalized=[float(v) for v in preds],
            counts=[float(v) for v in counts],
        )

    def counterfactual(
        self, scenario: Scenario, edit: PolicyEdit
    ) -> tuple[Trajectory, Trajectory, float]:
        """Factual vs edited forecast; delta is the cumulative count difference."""
        edit.validate()
        factual = self.forecast(scenario)
        edited = replace(scenario, edits=scenario.edits + (edit,))
        cf = self.forecast(edited)
        delta = float(sum(cf.counts) - sum(factual.counts))
        return factual, cf, delta

    # -- schedule evaluation ----------------------------------------------------

    def rollout(
        self, scenario: Scenario, schedule: tuple[tuple[str, ...], ...]
    ) -> tuple[float, Trajectory]:
        """Deterministic multi-period rollout.

        Each period injects the chosen policies at the final history token
        (they stay enacted from that month onward), forecasts T_f months,
        then advances the window with predicted outcomes and frozen
        covariates.
        """
        window_months = self._window_months(scenario)
        timeline = ActiveTimeline(self, scenario, window_months)
        feats, sub = self._base_features(scenario)
        t0 = self.panel_norm.month_index(scenario.window_start)
        ch = self.panel_norm.outcome_channel
        center = sub.center_index
        months = list(window_months)

        all_months: list[str] = []
        all_norm: list[float] = []
        cost = 0.0
        for action in schedule:
            for pid in action:
                self._lookup_record(pid)
                timeline.inject(pid, months[-1])
            active = [timeline.active_ids(m) for m in months]
            sample = self._make_sample(scenario.state, feats, sub, t0, months, active)
            with torch.no_grad():
                preds = self.model([sample]).preds.numpy()[0]
            pred_months = [add_months(months[-1], 1 + j) for j in range(self.t_fut)]
            counts = self._denorm(scenario.state, preds)
            cost += float(counts.sum())
            all_months.extend(pred_months)
            all_norm.extend(float(v) for v in preds)

            keep = max(self.t_hist - self.t_fut, 0)
            fresh = min(self.t_fut, self.t_hist)
            new_block = np.repeat(feats[:, -1:, :], fresh, axis=1)
            new_block[center, :, ch] = preds[-fresh:]
            feats = (
                np.concatenate([feats[:, -keep:, :], new_block], axis=1)
                if keep > 0
                else new_block
            )
            months = (months + pred_months)[-self.t_hist :]
            t0 += self.t_fut

        counts_all = self._denorm(scenario.state, np.asarray(all_norm))
        traj = Trajectory(
            state=scenario.state,
            months=all_months,
            normalized=[float(v) for v in all_norm],
            counts=[float(v) for v in counts_all],
        )
        return cost, traj


class ScheduleEvaluator:
    """Deterministic, memoized schedule costs for one scenario."""

    def __init__(self, simulator: Simulator, scenario: Scenario):
        self.simulator = simulator
        self.scenario = scenario
        self.cache: dict[tuple[tuple[str, ...], ...], tuple[float, Trajectory]] = {}

    def cost(self, schedule: tuple[tuple[str, ...], ...]) -> float:
        return self.full(schedule)[0]

    def full(self, schedule: tuple[tuple[str, ...], ...]) -> tuple[float, Trajectory]:
        if schedule not in self.cache:
            self.cache[schedule] = self.simulator.rollout(self.scenario, schedule)
        return self.cache[schedule]


def exhaustive_optimize(
    simulator: Simulator,
    scenario: Scenario,
    pool: tuple[str, ...],
    depth: int,
    subset_max: int = 1,
    evaluator: ScheduleEvaluator | None = None,
) -> tuple[tuple[str, ...], ...]:
    """True argmin over every schedule; ties go to the lexicographically
    smallest (enumeration order)."""
    actions = build_actions(pool, subset_max)
    if len(actions) ** depth > 100_000:
        raise SpaceTooLarge(f"{len(actions)}^{depth} schedules exceed the enumeration guard")
    ev = evaluator or ScheduleEvaluator(simulator, scenario)
    best: tuple[tuple[str, ...], ...] | None = None
    best_cost = math.inf
    for schedule in itertools.product(actions, repeat=depth):
        c = ev.cost(schedule)
        if c < best_cost:
            best, best_cost = schedule, c
    return best


def mcts_optimize(
    simulator: Simulator,
    scenario: Scenario,
    pool: tuple[str, ...],
    depth: int,
    budget: int,
    c_uct: float = math.sqrt(2.0),
    seed: int = 0,
    subset_max: int = 1,
) -> OptimizeResult:
    """UCT search over policy schedules against the deterministic simulator.

    Selection maximizes a min-max-normalized mean reward (negated cost) plus
    the exploration bonus; rewards are renormalized from the running cost
    bounds at selection time so they always lie in [0, 1]. Untried actions
    expand uniformly at random; rollouts complete the schedule uniformly at
    random; the returned schedule follows the most-visited child at each
    level (ties by better mean cost, then lexicographic action).
    """
    if not pool:
        raise EmptyPool("schedule search needs a non-empty candidate pool")
    if budget < 1:
        raise BudgetZero("simulation budget must be >= 1")
    if depth < 1:
        raise InvalidEdit("depth must be >= 1")
    for pid in pool:
        simulator._lookup_record(pid)

    actions = build_actions(pool, subset_max)
    rng = np.random.default_rng(seed)
    ev = ScheduleEvaluator(simulator, scenario)

    root = SearchNode(None, 0, actions)
    root.n = 1
    cost_min = math.inf
    cost_max = -math.inf
    simulations = 0

    def reward(cost: float) -> float:
        if cost_max <= cost_min:
            return 0.5
        return (cost_max - cost) / (cost_max - cost_min)

    for _ in range(budget):
        node = root
        path = [root]
        prefix: list[tuple[str, ...]] = []
        while node.depth < depth and not node.untried and node.children:
            best_score = -math.inf
            best_child = None
            for key in sorted(node.children):
                child = node.children[key]
                score = reward(child.mean_cost) + c_uct * math.sqrt(
                    math.log(node.n) / child.n
                )
                if score > best_score:
                    best_score, best_child = score, child
            node = best_child
            path.append(node)
            prefix.append(node.action)
        if node.depth < depth and node.untried:
            pick = int(rng.integers(len(node.untried)))
            action = node.untried.pop(pick)
            child = SearchNode(action, node.depth + 1, actions)
            node.children[action] = child
            node = child
            path.append(node)
            prefix.append(action)
        tail = [
            actions[int(rng.integers(len(actions)))] for _ in range(depth - len(prefix))
        ]
        schedule = tuple(prefix + tail)
        cost = ev.cost(schedule)
        cost_min = min(cost_min, cost)
        cost_max = max(cost_max, cost)
        for n in path:
            n.n += 1
            n.cost_sum += cost
        simulations += 1

    schedule = _extract_schedule(root, depth, ev)
    cost, traj = ev.full(schedule)
    return OptimizeResult(
        schedule=[list(a) for a in schedule],
        cost=cost,
        trajectory=traj,
        tree=root.to_dict(),
        diagnostics={
            "simulations": simulations,
            "unique_schedules": len(ev.cache),
            "cost_min": cost_min,
            "cost_max": cost_max,
            "seed": seed,
        },
    )


def _extract_schedule(
    root: SearchNode, depth: int, ev: ScheduleEvaluator
) -> tuple[tuple[str, ...], ...]:
    schedule: list[tuple[str, ...]] = []
    node = root
    while node.depth < depth and node.children:
        best_key = None
        best = None
        for key in sorted(node.children):
            child = node.children[key]
            rank = (-child.n, child.mean_cost, key)
            if best is None or rank < best:
                best, best_key = rank, key
        schedule.append(best_key)
        node = node.children[best_key]
    if len(schedule) < depth:
        # Budget too small to materialize a full path: finish with the best
        # already-evaluated schedule consistent with the prefix.
        prefix = tuple(schedule)
        candidates = [s for s in ev.cache if s[: len(prefix)] == prefix]
        best_s = min(candidates, key=lambda s: (ev.cache[s][0], s))
        schedule = list(best_s)
    return tuple(schedule)
