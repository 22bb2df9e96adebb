"""Synthetic state-month world with a known linear policy-response kernel.

The generator produces a schema-compatible panel, grid adjacency, policy
corpus, and entity embedding table, together with the ground-truth response
parameters so tests can compute reference predictors.

Outcome construction: a seasonal baseline with AR(1) deviations, plus an
additive level shift per active policy. Shifts start `lag` months after
enactment, end `lag` months after repeal, and spill a fixed fraction onto
grid neighbors. Noise draws are independent of the policy placement, so two
runs differing only in the corpus share identical noise paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (
    CHANNELS,
    EntityEmbeddingTable,
    PolicyRecord,
    StateGraph,
    StatePanel,
)
from .errors import ConfigError
from .months import add_months, month_range, months_between


@dataclass(frozen=True)
class PolicyArchetype:
    """One reusable policy template with a fixed outcome response."""

    name: str
    effect: float  # additive shift on the enacting state's outcome
    lag: int  # months between enactment and effect onset
    spillover: float  # fraction of effect applied to graph neighbors
    triplets: tuple[tuple[str, str, str], ...]
    policy_codes: dict | None = None


DEFAULT_ARCHETYPES: tuple[PolicyArchetype, ...] = (
    PolicyArchetype(
        name="recovery_expansion",
        effect=-6.0,
        lag=2,
        spillover=0.3,
        triplets=(
            ("recovery_program", "expands", "treatment_capacity"),
            ("state_funding", "supports", "recovery_program"),
            ("treatment_capacity", "reduces", "overdose_risk"),
            ("peer_support", "strengthens", "recovery_program"),
        ),
        policy_codes={
            "establish_program": 1,
            "expand_program": 1,
            "general_funding": 1,
            "target_population": ["recovery_residents"],
        },
    ),
    PolicyArchetype(
        name="prescription_restriction",
        effect=3.5,
        lag=2,
        spillover=0.3,
        triplets=(
            ("monitoring_program", "restricts", "opioid_prescriptions"),
            ("prescriber", "consults", "monitoring_program"),
            ("opioid_prescriptions", "limited_by", "day_supply_cap"),
            ("day_supply_cap", "applies_to", "acute_pain_patients"),
        ),
        policy_codes={
            "prescriber_mandatory_PDMP_use": 1,
            "dispenser_mandatory_PDMP_use": 1,
            "substance_monitored": "schedules_II_V",
            "max_initial_days_adult": 7,
            "max_initial_days_minor": 5,
            "mme_daily_limit": 90,
        },
    ),
    PolicyArchetype(
        name="harm_reduction",
        effect=-3.0,
        lag=2,
        spillover=0.3,
        triplets=(
            ("naloxone_access", "prevents", "fatal_overdose"),
            ("community_clinic", "distributes", "naloxone_access"),
            ("outreach_service", "connects", "community_clinic"),
        ),
        policy_codes={
            "establish_program": 1,
            "dedicated_funding": 1,
            "reporting_requirement": 1,
            "target_population": ["homeless", "youth"],
        },
    ),
)


@dataclass(frozen=True)
class SynthConfig:
    num_states: int = 12
    num_months: int = 72
    start_month: str = "2019-01"
    grid_cols: int = 4
    ar_coef: float = 0.85
    base_level: tuple[float, float] = (70.0, 110.0)
    seasonal_amplitude: float = 2.0
    noise_sigma: float = 0.1
    policy_rate: float = 0.06  # per state-month enactment probability
    enact_margin: tuple[int, int] = (3, 8)  # months kept policy-free at each end
    repeal_after: tuple[int, int] | None = (12, 24)  # active duration range
    embed_dim: int = 16
    archetypes: tuple[PolicyArchetype, ...] = DEFAULT_ARCHETYPES
    # Explicit (state, enacted_month, archetype_name, repealed_month|None)
    # placements; when set, policy_rate sampling is skipped entirely.
    explicit_policies: tuple[tuple[str, str, str, str | None], ...] | None = None

    def validate(self):
        if self.num_states < 1 or self.num_months < 1:
            raise ConfigError("num_states and num_months must be positive")
        if self.grid_cols < 1:
            raise ConfigError("grid_cols must be positive")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if not self.archetypes:
            raise ConfigError("at least one policy archetype is required")
        names = [a.name for a in self.archetypes]
        if len(names) != len(set(names)):
            raise ConfigError("archetype names must be unique")


@dataclass(frozen=True)
class SynthTruth:
    """Ground-truth response parameters for every generated policy."""

    ar_coef: float
    noise_sigma: float
    seasonal_amplitude: float
    base_levels: dict[str, float]
    phases: dict[str, float]
    # policy_id -> (state, enacted_month, repealed_month|None, effect, lag, spillover)
    responses: dict[str, tuple[str, str, str | None, float, int, float]]


@dataclass(frozen=True)
class SynthWorld:
    panel: StatePanel
    graph: StateGraph
    corpus: tuple[PolicyRecord, ...]
    entities: EntityEmbeddingTable
    truth: SynthTruth
    config: SynthConfig


def _grid_graph(states: tuple[str, ...], cols: int) -> StateGraph:
    edges = set()
    for i in range(len(states)):
        if (i + 1) % cols != 0 and i + 1 < len(states):
            edges.add((states[i], states[i + 1]))
        if i + cols < len(states):
            edges.add((states[i], states[i + cols]))
    return StateGraph(nodes=states, edges=frozenset(edges))


def _ar1_paths(rng: np.random.Generator, n: int, t: int, phi: float, sigma: float) -> np.ndarray:
    """Zero-start AR(1) deviations, one row per state."""
    eps = rng.normal(0.0, sigma, size=(n, t)) if sigma > 0 else np.zeros((n, t))
    dev = np.zeros((n, t))
    for j in range(1, t):
        dev[:, j] = phi * dev[:, j - 1] + eps[:, j]
    return dev


def autonomous_outcome(config: SynthConfig, base: np.ndarray, phase: np.ndarray,
                       dev: np.ndarray) -> np.ndarray:
    """Policy-free outcome: seasonal baseline plus AR(1) deviations."""
    t = np.arange(config.num_months)
    seasonal = config.seasonal_amplitude * np.sin(
        2.0 * math.pi * (t[None, :] + phase[:, None]) / 12.0
    )
    return base[:, None] + seasonal + dev


def _covariates(rng: np.random.Generator, s: int, t: int) -> dict[str, np.ndarray]:
    """Distractor channels, loosely realistic and strictly schema-valid."""
    month = np.arange(t)
    out: dict[str, np.ndarray] = {}
    season = np.sin(2.0 * math.pi * month / 12.0)

    def walk(scale):
        return np.cumsum(rng.normal(0.0, scale, size=(s, t)), axis=1)

    out["unemployment_rate"] = np.clip(
        rng.uniform(3.0, 6.0, size=(s, 1)) + 0.4 * season[None, :] + walk(0.05), 0.2, 30.0
    )
    out["labor_force_participation"] = np.clip(
        rng.uniform(58.0, 66.0, size=(s, 1)) + walk(0.03), 40.0, 80.0
    )
    out["ui_claims"] = np.clip(
        rng.uniform(8e3, 3e4, size=(s, 1)) * (1.0 + 0.05 * season[None, :]) + walk(150.0),
        0.0,
        None,
    )
    for name, lo, hi in (
        ("age_0_18", 5e5, 2e6),
        ("age_18_55", 1e6, 4e6),
        ("age_55_plus", 4e5, 1.5e6),
        ("race_white", 1e6, 4e6),
        ("race_black", 1e5, 1e6),
        ("race_asian", 3e4, 5e5),
        ("race_ai", 5e3, 1e5),
    ):
        base = rng.uniform(lo, hi, size=(s, 1))
        drift = 1.0 + 0.0005 * month[None, :]
        out[name] = np.clip(base * drift + walk(lo * 1e-4), 0.0, None)
    out["drug_crime"] = np.clip(
        rng.uniform(300.0, 1200.0, size=(s, 1)) + 40.0 * season[None, :] + walk(3.0), 0.0, None
    )
    return out


def _place_policies(
    rng: np.random.Generator, config: SynthConfig, states: tuple[str, ...],
    months: tuple[str, ...],
) -> list[tuple[str, str, str, str | None]]:
    if config.explicit_policies is not None:
        return list(config.explicit_policies)
    lo, hi = config.enact_margin
    placements: list[tuple[str, str, str, str | None]] = []
    arch_names = [a.name for a in config.archetypes]
    for state in states:
        active_until: dict[str, int] = {}  # archetype -> first month index no longer active
        for mi in range(lo, config.num_months - hi):
            if rng.random() >= config.policy_rate:
                continue
            free = [a for a in arch_names if active_until.get(a, 0) <= mi]
            if not free:
                continue
            arch = free[int(rng.integers(len(free)))]
            if config.repeal_after is not None:
                dur = int(rng.integers(config.repeal_after[0], config.repeal_after[1] + 1))
                repeal_idx = mi + dur
                repeal = months[repeal_idx] if repeal_idx < config.num_months else None
            else:
                repeal_idx, repeal = config.num_months, None
            active_until[arch] = repeal_idx if repeal is not None else config.num_months
            placements.append((state, months[mi], arch, repeal))
    return placements


def synth_generate(seed: int, config: SynthConfig | None = None) -> SynthWorld:
    """Deterministic synthetic world; identical seed+config gives identical output."""
    config = config or SynthConfig()
    config.validate()
    ss = np.random.SeedSequence(seed)
    rng_cov, rng_noise, rng_place, rng_embed, rng_levels = (
        np.random.default_rng(s) for s in ss.spawn(5)
    )

    s, t = config.num_states, config.num_months
    states = tuple(f"S{i + 1:02d}" for i in range(s))
    months = tuple(
        month_range(config.start_month, add_months(config.start_month, t - 1))
    )
    graph = _grid_graph(states, config.grid_cols)

    base = rng_levels.uniform(*config.base_level, size=s)
    phase = rng_levels.uniform(0.0, 12.0, size=s)
    dev = _ar1_paths(rng_noise, s, t, config.ar_coef, config.noise_sigma)
    outcome = autonomous_outcome(config, base, phase, dev)

    arch_by_name = {a.name: a for a in config.archetypes}
    placements = _place_policies(rng_place, config, states, months)
    corpus: list[PolicyRecord] = []
    responses: dict[str, tuple[str, str, str | None, float, int, float]] = {}
    neighbor_idx = {st: [states.index(n) for n in graph.neighbors(st)] for st in states}
    for state, enacted, arch_name, repealed in placements:
        if arch_name not in arch_by_name:
            raise ConfigError(f"unknown archetype {arch_name!r}")
        arch = arch_by_name[arch_name]
        pid = f"{arch.name}-{state}-{enacted}"
        corpus.append(
            PolicyRecord(
                policy_id=pid,
                state=state,
                enacted_month=enacted,
                repealed_month=repealed,
                triplets=arch.triplets,
                policy_codes=arch.policy_codes,
            )
        )
        responses[pid] = (state, enacted, repealed, arch.effect, arch.lag, arch.spillover)
        on = months_between(config.start_month, enacted) + arch.lag
        off = (
            months_between(config.start_month, repealed) + arch.lag
            if repealed is not None
            else t
        )
        on, off = max(on, 0), min(off, t)
        if on < off:
            si = states.index(state)
            outcome[si, on:off] += arch.effect
            for ni in neighbor_idx[state]:
                outcome[ni, on:off] += arch.spillover * arch.effect

    if (outcome < 0).any():
        raise ConfigError(
            "outcome went negative; raise base_level or weaken policy effects"
        )

    cov = _covariates(rng_cov, s, t)
    features = np.zeros((s, t, len(CHANNELS)))
    for ci, name in enumerate(CHANNELS):
        features[:, :, ci] = outcome if name == "overdose_deaths" else cov[name]

    panel = StatePanel(states=states, months=months, features=features)

    entity_names = sorted(
        {e for a in config.archetypes for (sub, _, obj) in a.triplets for e in (sub, obj)}
    )
    vectors = {}
    for name in entity_names:
        v = rng_embed.normal(size=config.embed_dim)
        vectors[name] = v / np.linalg.norm(v)
    table = EntityEmbeddingTable(vectors)

    truth = SynthTruth(
        ar_coef=config.ar_coef,
        noise_sigma=config.noise_sigma,
        seasonal_amplitude=config.seasonal_amplitude,
        base_levels={st: float(base[i]) for i, st in enumerate(states)},
        phases={st: float(phase[i]) for i, st in enumerate(states)},
        responses=responses,
    )
    return SynthWorld(
        panel=panel, graph=graph, corpus=tuple(corpus), entities=table,
        truth=truth, config=config,
    )


def write_world(world: SynthWorld, out_dir) -> None:
    """Write the generated world in the documented on-disk formats."""
    import json
    import os

    import pandas as pd

    os.makedirs(out_dir, exist_ok=True)
    panel = world.panel
    rows = []
    for si, state in enumerate(panel.states):
        for mi, month in enumerate(panel.months):
            rows.append(
                [state, month, *[panel.features[si, mi, ci] for ci in range(len(CHANNELS))]]
            )
    pd.DataFrame(rows, columns=["state", "month", *CHANNELS]).to_csv(
        os.path.join(out_dir, "states.csv"), index=False
    )
    pd.DataFrame(sorted(world.graph.edges), columns=["src", "dst"]).to_csv(
        os.path.join(out_dir, "adjacency.csv"), index=False
    )
    with open(os.path.join(out_dir, "policies.jsonl"), "w", encoding="utf-8") as fh:
        for rec in world.corpus:
            obj = {
                "policy_id": rec.policy_id,
                "state": rec.state,
                "enacted_month": rec.enacted_month,
                "triplets": [
                    {"subject": s, "relation": r, "object": o} for s, r, o in rec.triplets
                ],
            }
            if rec.repealed_month:
                obj["repealed_month"] = rec.repealed_month
            if rec.policy_codes is not None:
                obj["policy_codes"] = rec.policy_codes
            fh.write(json.dumps(obj) + "\n")
    with open(os.path.join(out_dir, "entities.jsonl"), "w", encoding="utf-8") as fh:
        for name in world.entities.entities():
            fh.write(
                json.dumps(
                    {"entity": name, "embedding": list(world.entities.lookup(name))}
                )
                + "\n"
            )
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "ar_coef": world.truth.ar_coef,
                "noise_sigma": world.truth.noise_sigma,
                "seasonal_amplitude": world.truth.seasonal_amplitude,
                "base_levels": world.truth.base_levels,
                "phases": world.truth.phases,
                "responses": {
                    k: {
                        "state": v[0],
                        "enacted_month": v[1],
                        "repealed_month": v[2],
                        "effect": v[3],
                        "lag": v[4],
                        "spillover": v[5],
                    }
                    for k, v in world.truth.responses.items()
                },
            },
            fh,
            indent=2,
        )
