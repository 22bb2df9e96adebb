"""State-month panel, adjacency graph, policy corpus: loading, validation,
normalization, and sliding-window construction.

All loaded objects are immutable after construction and safe to share across
concurrent readers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import (
    MissingEmbedding,
    MissingMonth,
    SchemaError,
    SelfLoop,
    SplitTooShort,
    UnknownState,
)
from .months import add_months, month_ordinal, month_range, months_between, parse_month

logger = logging.getLogger(__name__)

# Reference channel schema; synthetic panels may use a subset or superset.
CHANNELS: tuple[str, ...] = (
    "overdose_deaths",
    "unemployment_rate",
    "labor_force_participation",
    "ui_claims",
    "age_0_18",
    "age_18_55",
    "age_55_plus",
    "race_white",
    "race_black",
    "race_asian",
    "race_ai",
    "drug_crime",
)
RATE_CHANNELS = frozenset({"unemployment_rate", "labor_force_participation"})
OUTCOME_CHANNEL = "overdose_deaths"

# Channel groups used by the feature-drop ablation.
FEATURE_GROUPS: dict[str, tuple[str, ...]] = {
    "economic": ("unemployment_rate", "labor_force_participation", "ui_claims"),
    "demographic": (
        "age_0_18",
        "age_18_55",
        "age_55_plus",
        "race_white",
        "race_black",
        "race_asian",
        "race_ai",
    ),
    "crime": ("drug_crime",),
}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class StatePanel:
    """Per-state monthly feature matrix of shape (num_states, num_months, C)."""

    states: tuple[str, ...]
    months: tuple[str, ...]
    features: np.ndarray
    channels: tuple[str, ...] = CHANNELS
    outcome_channel: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", _freeze(self.features))
        s, t, c = self.features.shape
        if s != len(self.states) or t != len(self.months) or c != len(self.channels):
            raise SchemaError(
                f"feature shape {self.features.shape} inconsistent with "
                f"{len(self.states)} states x {len(self.months)} months x "
                f"{len(self.channels)} channels"
            )
        ords = [month_ordinal(m) for m in self.months]
        if any(b - a != 1 for a, b in zip(ords, ords[1:])):
            raise MissingMonth("panel months are not a gap-free monthly grid")
        if not np.isfinite(self.features).all():
            raise ValueError("panel contains non-finite values")

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def num_months(self) -> int:
        return len(self.months)

    def state_index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise UnknownState(f"unknown state {state!r}") from None

    def month_index(self, month: str) -> int:
        idx = months_between(self.months[0], month)
        if not 0 <= idx < self.num_months:
            raise MissingMonth(f"month {month} outside panel range")
        return idx

    def channel_index(self, channel: str) -> int:
        try:
            return self.channels.index(channel)
        except ValueError:
            raise SchemaError(f"unknown channel {channel!r}") from None


@dataclass(frozen=True)
class StateGraph:
    """Undirected adjacency over the panel's states; no self-loops."""

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        node_set = set(self.nodes)
        canon = set()
        for a, b in self.edges:
            if a == b:
                raise SelfLoop(f"self-loop on {a!r}")
            if a not in node_set or b not in node_set:
                raise UnknownState(f"edge ({a},{b}) references unknown state")
            canon.add((a, b) if a < b else (b, a))
        object.__setattr__(self, "edges", frozenset(canon))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, node: str) -> tuple[str, ...]:
        """Neighbors in canonical (lexicographic) order."""
        if node not in self.nodes:
            raise UnknownState(f"unknown state {node!r}")
        out = [b if a == node else a for a, b in self.edges if node in (a, b)]
        return tuple(sorted(out))

    def has_edge(self, a: str, b: str) -> bool:
        return ((a, b) if a < b else (b, a)) in self.edges


@dataclass(frozen=True)
class PolicyRecord:
    policy_id: str
    state: str
    enacted_month: str
    triplets: tuple[tuple[str, str, str], ...]
    repealed_month: str | None = None
    policy_codes: dict | None = None

    def __post_init__(self):
        parse_month(self.enacted_month)
        if self.repealed_month is not None:
            parse_month(self.repealed_month)
        for s, r, o in self.triplets:
            if not (s and r and o):
                raise SchemaError(
                    f"policy {self.policy_id}: empty triplet component in ({s!r},{r!r},{o!r})"
                )

    def active_at(self, month: str) -> bool:
        """Active from enactment onward unless a repeal month is given."""
        if months_between(self.enacted_month, month) < 0:
            return False
        if self.repealed_month is not None:
            return months_between(self.repealed_month, month) < 0
        return True


@dataclass(frozen=True)
class PolicyKG:
    """Merged triplet set of all policies in force for one (state, month)."""

    state: str
    month: str
    triplets: tuple[tuple[str, str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(sorted(set(self.triplets))))

    @property
    def entities(self) -> tuple[str, ...]:
        ents = {s for s, _, _ in self.triplets} | {o for _, _, o in self.triplets}
        return tuple(sorted(ents))

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(sorted({r for _, r, _ in self.triplets}))

    @property
    def is_empty(self) -> bool:
        return not self.triplets


class EntityEmbeddingTable:
    """Entity string -> fixed-width embedding vector."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise SchemaError("empty entity embedding table")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise SchemaError(f"inconsistent embedding widths: {sorted(dims)}")
        self.dim = dims.pop()
        self._vectors = {}
        for name, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite embedding for entity {name!r}")
            arr.flags.writeable = False
            self._vectors[name] = arr

    def __contains__(self, entity: str) -> bool:
        return entity in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def lookup(self, entity: str) -> np.ndarray:
        try:
            return self._vectors[entity]
        except KeyError:
            raise MissingEmbedding(f"no embedding for entity {entity!r}") from None

    def entities(self) -> tuple[str, ...]:
        return tuple(sorted(self._vectors))


@dataclass(frozen=True)
class NormStats:
    """Per-(state, channel) z-score statistics fitted on training months only."""

    states: tuple[str, ...]
    channels: tuple[str, ...]
    mean: np.ndarray  # (S, C)
    std: np.ndarray  # (S, C), degenerate channels forced to 1
    degenerate: np.ndarray  # (S, C) bool
    train_months: tuple[str, str]
    dropped_channels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", _freeze(self.mean))
        object.__setattr__(self, "std", _freeze(self.std))
        deg = np.asarray(self.degenerate, dtype=bool)
        deg.flags.writeable = False
        object.__setattr__(self, "degenerate", deg)
        if (self.std <= 0).any():
            raise ValueError("NormStats std must be positive")

    def apply(self, features: np.ndarray) -> np.ndarray:
        out = (features - self.mean[:, None, :]) / self.std[:, None, :]
        if self.dropped_channels:
            idx = [self.channels.index(c) for c in self.dropped_channels]
            out[:, :, idx] = 0.0
        return out

    def invert(self, features: np.ndarray) -> np.ndarray:
        return features * self.std[:, None, :] + self.mean[:, None, :]

    def invert_channel(self, values: np.ndarray, state_idx: int, channel_idx: int) -> np.ndarray:
        return values * self.std[state_idx, channel_idx] + self.mean[state_idx, channel_idx]


def load_state_panel(path) -> StatePanel:
    """Load the state-month CSV into a validated panel.

    Expects the canonical header (state, month, then the 12 feature channels),
    one row per (state, month), with a complete monthly grid per state.
    """
    df = pd.read_csv(path, dtype={"state": str, "month": str})
    expected = ["state", "month", *CHANNELS]
    if list(df.columns) != expected:
        raise SchemaError(
            f"bad header: expected {expected}, got {list(df.columns)}"
        )
    if df.isna().any().any():
        raise ValueError("panel CSV contains missing values")

    states = tuple(sorted(df["state"].unique()))
    months_seen = sorted(df["month"].unique(), key=month_ordinal)
    months = tuple(month_range(months_seen[0], months_seen[-1]))

    features = np.zeros((len(states), len(months), len(CHANNELS)), dtype=np.float64)
    df = df.sort_values(["state", "month"]).reset_index(drop=True)
    for si, state in enumerate(states):
        sub = df[df["state"] == state]
        got = list(sub["month"])
        if got != list(months):
            missing = sorted(set(months) - set(got), key=month_ordinal)
            if missing:
                raise MissingMonth(f"state {state}: missing months {missing[:4]}")
            raise SchemaError(f"state {state}: duplicate month rows")
        features[si] = sub[list(CHANNELS)].to_numpy(dtype=np.float64)

    if not np.isfinite(features).all():
        raise ValueError("panel contains non-finite values")
    count_idx = [i for i, c in enumerate(CHANNELS) if c not in RATE_CHANNELS]
    if (features[:, :, count_idx] < 0).any():
        raise ValueError("negative value in a count channel")
    return StatePanel(states=states, months=months, features=features)


def load_adjacency(path, known_states: tuple[str, ...] | None = None) -> StateGraph:
    """Load the undirected edge-list CSV, deduplicating reversed pairs."""
    df = pd.read_csv(path, dtype={"src": str, "dst": str})
    if list(df.columns) != ["src", "dst"]:
        raise SchemaError(f"bad header: expected ['src', 'dst'], got {list(df.columns)}")
    edges = set()
    nodes = set()
    for src, dst in df.itertuples(index=False):
        if src == dst:
            raise SelfLoop(f"self-loop on {src!r}")
        edges.add((src, dst) if src < dst else (dst, src))
        nodes.update((src, dst))
    if known_states is not None:
        unknown = nodes - set(known_states)
        if unknown:
            raise UnknownState(f"adjacency references unknown states {sorted(unknown)}")
        nodes = set(known_states)
    return StateGraph(nodes=tuple(sorted(nodes)), edges=frozenset(edges))


def load_policies(path) -> tuple[PolicyRecord, ...]:
    """Load the JSONL policy corpus."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: bad JSON: {exc}") from None
            try:
                triplets = tuple(
                    (t["subject"], t["relation"], t["object"]) for t in obj["triplets"]
                )
                records.append(
                    PolicyRecord(
                        policy_id=obj["policy_id"],
                        state=obj["state"],
                        enacted_month=obj["enacted_month"],
                        repealed_month=obj.get("repealed_month"),
                        triplets=triplets,
                        policy_codes=obj.get("policy_codes"),
                    )
                )
            except KeyError as exc:
                raise SchemaError(f"{path}:{lineno}: missing field {exc}") from None
    seen = set()
    for rec in records:
        if rec.policy_id in seen:
            raise SchemaError(f"duplicate policy_id {rec.policy_id!r}")
        seen.add(rec.policy_id)
    return tuple(records)


def load_entities(path) -> EntityEmbeddingTable:
    """Load the JSONL entity embedding table."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vectors[obj["entity"]] = np.asarray(obj["embedding"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad entity row: {exc}") from None
    return EntityEmbeddingTable(vectors)


def normalize(
    panel: StatePanel,
    stats: NormStats | None = None,
    train_months: tuple[str, str] | None = None,
) -> tuple[StatePanel, NormStats]:
    """Z-score each (state, channel) using training-period statistics.

    When `stats` is None, fits them on `train_months` (inclusive range).
    Channels with zero training variance get std forced to 1 and are flagged.
    """
    if stats is None:
        if train_months is None:
            raise SchemaError("normalize needs either fitted stats or a training month range")
        lo = panel.month_index(train_months[0])
        hi = panel.month_index(train_months[1])
        if hi < lo:
            raise SchemaError("training month range is reversed")
        win = panel.features[:, lo : hi + 1, :]
        mean = win.mean(axis=1)
        std = win.std(axis=1)
        degenerate = std == 0.0
        if degenerate.any():
            n = int(degenerate.sum())
            logger.warning("normalize: %d degenerate (state, channel) pairs; std forced to 1", n)
        std = np.where(degenerate, 1.0, std)
        stats = NormStats(
            states=panel.states,
            channels=panel.channels,
            mean=mean,
            std=std,
            degenerate=degenerate,
            train_months=(panel.months[lo], panel.months[hi]),
        )
    if stats.states != panel.states or stats.channels != panel.channels:
        raise SchemaError("stats were fitted on a different panel layout")
    out = stats.apply(panel.features.copy())
    return replace(panel, features=out), stats


def denormalize(panel: StatePanel, stats: NormStats) -> StatePanel:
    return replace(panel, features=stats.invert(panel.features.copy()))


def active_policies(
    corpus: tuple[PolicyRecord, ...] | list[PolicyRecord], state: str, month: str
) -> PolicyKG:
    """Union of triplets of all corpus policies in force for (state, month)."""
    triplets: list[tuple[str, str, str]] = []
    for rec in corpus:
        if rec.state == state and rec.active_at(month):
            triplets.extend(rec.triplets)
    return PolicyKG(state=state, month=month, triplets=tuple(triplets))


def active_policy_ids(
    corpus: tuple[PolicyRecord, ...] | list[PolicyRecord], state: str, month: str
) -> tuple[str, ...]:
    """Sorted ids of the corpus policies in force for (state, month)."""
    return tuple(
        sorted(rec.policy_id for rec in corpus if rec.state == state and rec.active_at(month))
    )


@dataclass(frozen=True)
class WindowSample:
    """One training/evaluation window for a single target state.

    `history` holds the target state's K-hop neighborhood features over the
    T_h history months; `target` holds the outcome channel over the T_f
    target months. Node order is canonical (sorted state ids).
    """

    state: str
    t0: int  # panel month index of the first history month
    neighborhood: tuple[str, ...]
    center_index: int
    sub_edges: tuple[tuple[int, int], ...]
    history: np.ndarray  # (len(neighborhood), T_h, C)
    target: np.ndarray  # (T_f,)
    policy_kgs: tuple[PolicyKG, ...]  # length T_h, center state only
    months: tuple[str, ...]  # T_h history months
    target_months: tuple[str, ...]
    active_ids: tuple[tuple[str, ...], ...] = ()  # policy ids per history month

    def __post_init__(self):
        object.__setattr__(self, "history", _freeze(self.history))
        object.__setattr__(self, "target", _freeze(self.target))
        if self.history.shape[1] != len(self.months):
            raise SchemaError("history length disagrees with month labels")
        if len(self.policy_kgs) != len(self.months):
            raise SchemaError("policy snapshots must cover every history month")


def window_starts(T: int, t_hist: int, t_fut: int) -> range:
    """Start offsets of stride-1 windows fully inside a span of T months."""
    if T < t_hist + t_fut:
        raise SplitTooShort(f"span {T} cannot fit T_h={t_hist} + T_f={t_fut}")
    return range(T - t_hist - t_fut + 1)


def _khop_nodes(graph: StateGraph, state: str, k: int) -> tuple[str, ...]:
    frontier = {state}
    seen = {state}
    for _ in range(k):
        nxt = set()
        for node in frontier:
            nxt.update(graph.neighbors(node))
        frontier = nxt - seen
        seen |= frontier
    return tuple(sorted(seen))


def build_windows(
    panel: StatePanel,
    t_hist: int,
    t_fut: int,
    split: tuple[str, str],
    graph: StateGraph | None = None,
    corpus: tuple[PolicyRecord, ...] | None = None,
    k_hops: int = 1,
    states: tuple[str, ...] | None = None,
    mode: str = "contained",
) -> list[WindowSample]:
    """Stride-1 sliding windows over the inclusive `split` month range.

    mode="contained": history and target both inside the split; yields exactly
    T - T_h - T_f + 1 windows per state.
    mode="target_in_split": only the T_f target months must fall inside the
    split; history may reach back into earlier panel months.
    """
    lo = panel.month_index(split[0])
    hi = panel.month_index(split[1])
    span = hi - lo + 1
    if mode == "contained":
        starts = [lo + s for s in window_starts(span, t_hist, t_fut)]
    elif mode == "target_in_split":
        if span < t_fut:
            raise SplitTooShort(f"split span {span} shorter than T_f={t_fut}")
        starts = [
            s
            for s in range(lo - t_hist, hi - t_fut - t_hist + 2)
            if s >= 0 and s + t_hist >= lo
        ]
        if not starts:
            raise SplitTooShort("no window has enough history before the split")
    else:
        raise SchemaError(f"unknown windowing mode {mode!r}")

    state_list = states if states is not None else panel.states
    out: list[WindowSample] = []
    out_ch = panel.outcome_channel
    kg_cache: dict[tuple[str, str], PolicyKG] = {}
    for state in state_list:
        si = panel.state_index(state)
        if graph is not None:
            neigh = _khop_nodes(graph, state, k_hops)
        else:
            neigh = (state,)
        idx = [panel.state_index(n) for n in neigh]
        center = neigh.index(state)
        sub_edges = tuple(
            sorted(
                (neigh.index(a), neigh.index(b))
                for a, b in (graph.edges if graph is not None else ())
                if a in neigh and b in neigh
            )
        )
        for t0 in starts:
            hist_months = tuple(panel.months[t0 + j] for j in range(t_hist))
            tgt_months = tuple(
                add_months(panel.months[t0], t_hist + j) for j in range(t_fut)
            )
            if t0 + t_hist + t_fut <= panel.num_months:
                target = panel.features[si, t0 + t_hist : t0 + t_hist + t_fut, out_ch]
            else:
                raise SplitTooShort("target months exceed the panel range")
            kgs = []
            ids = []
            for m in hist_months:
                key = (state, m)
                if key not in kg_cache:
                    kg_cache[key] = (
                        active_policies(corpus, state, m)
                        if corpus is not None
                        else PolicyKG(state=state, month=m, triplets=())
                    )
                kgs.append(kg_cache[key])
                ids.append(
                    active_policy_ids(corpus, state, m) if corpus is not None else ()
                )
            out.append(
                WindowSample(
                    state=state,
                    t0=t0,
                    neighborhood=neigh,
                    center_index=center,
                    sub_edges=sub_edges,
                    history=panel.features[idx, t0 : t0 + t_hist, :].copy(),
                    target=target.copy(),
                    policy_kgs=tuple(kgs),
                    months=hist_months,
                    target_months=tgt_months,
                    active_ids=tuple(ids),
                )
            )
    return out


@dataclass(frozen=True)
class DataBundle:
    """Everything the trainer and simulator consume, loaded and normalized."""

    panel: StatePanel  # raw scale
    panel_norm: StatePanel
    stats: NormStats
    graph: StateGraph
    corpus: tuple[PolicyRecord, ...]
    entities: EntityEmbeddingTable

    def record(self, policy_id: str):
        for rec in self.corpus:
            if rec.policy_id == policy_id:
                return rec
        return None


def load_bundle(data_dir, train_months: tuple[str, str]) -> DataBundle:
    """Load states.csv, adjacency.csv, policies.jsonl, entities.jsonl."""
    import os

    panel = load_state_panel(os.path.join(data_dir, "states.csv"))
    graph = load_adjacency(os.path.join(data_dir, "adjacency.csv"), known_states=panel.states)
    corpus = load_policies(os.path.join(data_dir, "policies.jsonl"))
    entities = load_entities(os.path.join(data_dir, "entities.jsonl"))
    for rec in corpus:
        for s, _, o in rec.triplets:
            entities.lookup(s)
            entities.lookup(o)
    panel_norm, stats = normalize(panel, train_months=train_months)
    return DataBundle(
        panel=panel,
        panel_norm=panel_norm,
        stats=stats,
        graph=graph,
        corpus=corpus,
        entities=entities,
    )
