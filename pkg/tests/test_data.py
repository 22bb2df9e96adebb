import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodsim.data import (
    CHANNELS,
    PolicyKG,
    PolicyRecord,
    StateGraph,
    active_policies,
    build_windows,
    denormalize,
    load_adjacency,
    load_state_panel,
    normalize,
    window_starts,
)
from oodsim.errors import (
    MissingMonth,
    SchemaError,
    SelfLoop,
    SplitTooShort,
    UnknownState,
)
from oodsim.months import add_months, month_range
from oodsim.synth import SynthConfig, synth_generate, write_world


def panel_csv(tmp_path, states, months, value=0.0):
    rows = []
    for s in states:
        for m in months:
            rows.append([s, m] + [value] * len(CHANNELS))
    df = pd.DataFrame(rows, columns=["state", "month", *CHANNELS])
    path = tmp_path / "states.csv"
    df.to_csv(path, index=False)
    return path


class TestLoadStatePanel:
    def test_reference_shape(self, tmp_path):
        world = synth_generate(3, SynthConfig(num_states=48, grid_cols=8))
        write_world(world, tmp_path)
        panel = load_state_panel(tmp_path / "states.csv")
        assert panel.features.shape == (48, 72, 12)
        assert panel.months[0] == "2019-01" and panel.months[-1] == "2024-12"

    def test_single_state_all_zeros(self, tmp_path):
        path = panel_csv(tmp_path, ["XX"], month_range("2020-01", "2020-12"))
        panel = load_state_panel(path)
        assert panel.features.shape == (1, 12, 12)
        assert (panel.features == 0).all()

    def test_missing_month_rejected(self, tmp_path):
        months = [m for m in month_range("2020-01", "2020-06") if m != "2020-02"]
        path = panel_csv(tmp_path, ["XX"], months)
        with pytest.raises(MissingMonth):
            load_state_panel(path)

    def test_wrong_header_rejected(self, tmp_path):
        df = pd.DataFrame({"state": ["A"], "month": ["2020-01"], "deaths": [1]})
        path = tmp_path / "bad.csv"
        df.to_csv(path, index=False)
        with pytest.raises(SchemaError):
            load_state_panel(path)

    def test_negative_count_rejected(self, tmp_path):
        path = panel_csv(tmp_path, ["XX"], ["2020-01"], value=-1.0)
        with pytest.raises(ValueError):
            load_state_panel(path)

    def test_rows_loaded_sorted_by_state_and_month(self, tmp_path):
        months = month_range("2020-01", "2020-03")
        rows = []
        for s in ["B", "A"]:
            for m in reversed(months):
                rows.append([s, m] + [1.0] * len(CHANNELS))
        df = pd.DataFrame(rows, columns=["state", "month", *CHANNELS])
        path = tmp_path / "states.csv"
        df.to_csv(path, index=False)
        panel = load_state_panel(path)
        assert panel.states == ("A", "B")
        assert panel.months == tuple(months)


class TestLoadAdjacency:
    def edge_csv(self, tmp_path, edges):
        path = tmp_path / "adjacency.csv"
        pd.DataFrame(edges, columns=["src", "dst"]).to_csv(path, index=False)
        return path

    def test_reference_scale_counts(self, tmp_path):
        rng = np.random.default_rng(5)
        nodes = [f"S{i:02d}" for i in range(48)]
        pairs = set()
        while len(pairs) < 194:
            a, b = rng.choice(48, size=2, replace=False)
            pairs.add((nodes[min(a, b)], nodes[max(a, b)]))
        path = self.edge_csv(tmp_path, sorted(pairs))
        graph = load_adjacency(path)
        assert len(graph.nodes) == 48
        assert graph.num_edges == 194

    def test_reversed_duplicate_collapses(self, tmp_path):
        path = self.edge_csv(tmp_path, [["A", "B"], ["B", "A"]])
        graph = load_adjacency(path)
        assert graph.num_edges == 1

    def test_self_loop_rejected(self, tmp_path):
        path = self.edge_csv(tmp_path, [["A", "A"]])
        with pytest.raises(SelfLoop):
            load_adjacency(path)

    def test_unknown_state_rejected(self, tmp_path):
        path = self.edge_csv(tmp_path, [["A", "B"]])
        with pytest.raises(UnknownState):
            load_adjacency(path, known_states=("A", "C"))

    def test_edge_membership_order_free(self, tmp_path):
        path = self.edge_csv(tmp_path, [["A", "B"], ["C", "B"]])
        graph = load_adjacency(path)
        assert graph.has_edge("A", "B") and graph.has_edge("B", "A")
        assert graph.neighbors("B") == ("A", "C")


class TestNormalize:
    def test_zscore_example(self, bundle):
        # Channel with training mean 10 and std 2 maps 14 to 2.0.
        assert (14.0 - 10.0) / 2.0 == 2.0  # definition guard
        panel = bundle.panel
        norm, stats = normalize(panel, train_months=("2019-01", "2022-12"))
        si, ci = 0, 0
        lo, hi = panel.month_index("2019-01"), panel.month_index("2022-12")
        window = panel.features[si, lo : hi + 1, ci]
        expected = (panel.features[si, 5, ci] - window.mean()) / window.std()
        assert norm.features[si, 5, ci] == pytest.approx(expected, rel=1e-12)

    def test_constant_channel_flagged_and_zeroed(self, tmp_path):
        world = synth_generate(1, SynthConfig(num_states=2, num_months=14, grid_cols=2))
        feats = world.panel.features.copy()
        feats[:, :, 3] = 7.0
        from dataclasses import replace

        panel = replace(world.panel, features=feats)
        norm, stats = normalize(panel, train_months=("2019-01", "2019-12"))
        assert stats.degenerate[:, 3].all()
        assert (stats.std[:, 3] == 1.0).all()
        assert (norm.features[:, :, 3] == 0.0).all()

    def test_round_trip_identity(self, bundle):
        norm, stats = normalize(bundle.panel, train_months=("2019-01", "2022-12"))
        back = denormalize(norm, stats)
        err = np.abs(back.features - bundle.panel.features)
        scale = np.maximum(np.abs(bundle.panel.features), 1.0)
        assert (err / scale).max() < 1e-9

    def test_reusable_stats(self, bundle):
        norm1, stats = normalize(bundle.panel, train_months=("2019-01", "2022-12"))
        norm2, _ = normalize(bundle.panel, stats=stats)
        assert np.array_equal(norm1.features, norm2.features)


class TestBuildWindows:
    def test_paper_training_span_count(self, bundle):
        # 48 training months with 6+6 windows: 37 per state.
        wins = build_windows(bundle.panel_norm, 6, 6, ("2019-01", "2022-12"))
        assert len(wins) == 37 * bundle.panel.num_states

    def test_boundary_single_window(self, bundle):
        wins = build_windows(bundle.panel_norm, 6, 6, ("2019-01", "2019-12"))
        assert len(wins) == bundle.panel.num_states

    def test_too_short_split(self, bundle):
        with pytest.raises(SplitTooShort):
            build_windows(bundle.panel_norm, 6, 6, ("2019-01", "2019-11"))

    @given(
        t=st.integers(1, 200), t_hist=st.integers(1, 24), t_fut=st.integers(1, 24)
    )
    @settings(max_examples=200, deadline=None)
    def test_window_count_law(self, t, t_hist, t_fut):
        if t < t_hist + t_fut:
            with pytest.raises(SplitTooShort):
                window_starts(t, t_hist, t_fut)
        else:
            assert len(window_starts(t, t_hist, t_fut)) == t - t_hist - t_fut + 1

    def test_target_in_split_mode_allows_earlier_history(self, bundle):
        wins = build_windows(
            bundle.panel_norm, 6, 6, ("2023-01", "2023-12"), mode="target_in_split"
        )
        per_state = len(wins) // bundle.panel.num_states
        # Targets must land inside 2023; histories may reach back into 2022.
        assert per_state == 7
        for w in wins[:7]:
            assert w.target_months[0] >= "2023-01"
            assert w.target_months[-1] <= "2023-12"

    def test_window_contents_match_panel(self, bundle, world):
        wins = build_windows(
            bundle.panel_norm, 6, 6, ("2019-01", "2022-12"),
            graph=world.graph, corpus=world.corpus, k_hops=1,
        )
        w = wins[40]
        panel = bundle.panel_norm
        si = panel.state_index(w.state)
        ci = w.neighborhood.index(w.state)
        assert ci == w.center_index
        np.testing.assert_array_equal(
            w.history[ci], panel.features[si, w.t0 : w.t0 + 6, :]
        )
        np.testing.assert_array_equal(
            w.target, panel.features[si, w.t0 + 6 : w.t0 + 12, panel.outcome_channel]
        )


def rec(pid, state, enacted, triplets, repealed=None):
    return PolicyRecord(
        policy_id=pid, state=state, enacted_month=enacted,
        triplets=tuple(triplets), repealed_month=repealed,
    )


class TestActivePolicies:
    corpus = (
        rec("p1", "TN", "2021-04", [("office", "oversees", "treatment")]),
        rec("p2", "TN", "2021-06", [("residence", "houses", "patients"),
                                    ("office", "certifies", "residence")]),
        rec("p3", "KY", "2020-01", [("fund", "supports", "recovery_residence")]),
        rec("p4", "KY", "2020-05", [("board", "inspects", "recovery_residence")]),
        rec("p5", "TN", "2020-01", [("old", "rule", "gone")], repealed="2020-06"),
    )

    def test_before_enactment_empty(self):
        kg = active_policies(self.corpus, "TN", "2021-03")
        assert kg.is_empty

    def test_carry_forward(self):
        kg = active_policies(self.corpus, "TN", "2022-01")
        assert ("office", "oversees", "treatment") in kg.triplets
        assert len(kg.triplets) == 3

    def test_merged_entities_link_both_policies(self):
        kg = active_policies(self.corpus, "KY", "2020-07")
        assert "recovery_residence" in kg.entities
        rels = {r for s, r, o in kg.triplets if "recovery_residence" in (s, o)}
        assert rels == {"supports", "inspects"}

    def test_repeal_ends_activity(self):
        assert not active_policies(self.corpus, "TN", "2020-07").triplets
        assert active_policies(self.corpus, "TN", "2020-05").triplets

    def test_monotone_without_repeals(self):
        corpus = [r for r in self.corpus if r.repealed_month is None]
        months = month_range("2019-06", "2022-06")
        for state in ("TN", "KY"):
            prev: set = set()
            for m in months:
                cur = set(active_policies(corpus, state, m).triplets)
                assert cur >= prev
                prev = cur

    def test_kg_dedups_triplets(self):
        kg = PolicyKG(state="TN", month="2021-01",
                      triplets=(("a", "r", "b"), ("a", "r", "b")))
        assert kg.triplets == (("a", "r", "b"),)


class TestGraphInvariants:
    def test_symmetry(self):
        g = StateGraph(nodes=("A", "B", "C"), edges=frozenset({("C", "A"), ("A", "B")}))
        for a, b in [("A", "C"), ("C", "A"), ("A", "B"), ("B", "A")]:
            assert g.has_edge(a, b)

    def test_self_loop_rejected(self):
        with pytest.raises(SelfLoop):
            StateGraph(nodes=("A",), edges=frozenset({("A", "A")}))

    def test_panel_immutable(self, bundle):
        with pytest.raises(ValueError):
            bundle.panel.features[0, 0, 0] = 99.0
