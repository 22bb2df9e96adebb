import numpy as np
import pytest
import torch

from oodsim.data import build_windows
from oodsim.model import AblationFlags, ModelConfig, WorldModel

SMALL = ModelConfig(
    hidden_dim=8, policy_dim=6, pe_dim=4, n_heads=2, ffw_mult=2,
    dropout=0.1, codebook_size=4, relation_cap=8, t_hist=3, t_fut=2,
)


def small_windows(small_bundle, n=6, **kw):
    wins = build_windows(
        small_bundle.panel_norm, SMALL.t_hist, SMALL.t_fut, ("2019-01", "2020-12"),
        graph=small_bundle.graph, corpus=small_bundle.corpus, k_hops=1, **kw
    )
    return wins[:n]


def build(small_bundle, ablation=AblationFlags(), seed=0):
    torch.manual_seed(seed)
    model = WorldModel.build(SMALL, ablation, small_bundle)
    model.eval()
    return model


class TestForward:
    def test_shapes(self, small_bundle):
        model = build(small_bundle)
        out = model(small_windows(small_bundle))
        assert out.preds.shape == (6, 2)
        assert out.vq_loss.shape == ()

    def test_eval_determinism_bit_exact(self, small_bundle):
        model = build(small_bundle)
        wins = small_windows(small_bundle)
        a = model(wins).preds
        b = model(wins).preds
        assert torch.equal(a, b)

    def test_window_causality(self, small_bundle):
        # Changing panel months outside a window leaves its forecast
        # bit-identical.
        from dataclasses import replace

        from oodsim.data import DataBundle, normalize

        model = build(small_bundle)
        wins = small_windows(small_bundle, n=3)
        base = model(wins).preds

        feats = small_bundle.panel.features.copy()
        last_needed = max(w.t0 for w in wins) + SMALL.t_hist
        feats[:, last_needed + 1 :, :] *= 1.7  # months after every window
        panel = replace(small_bundle.panel, features=feats)
        panel_norm, _ = normalize(panel, stats=small_bundle.stats)
        bundle2 = DataBundle(
            panel=panel, panel_norm=panel_norm, stats=small_bundle.stats,
            graph=small_bundle.graph, corpus=small_bundle.corpus,
            entities=small_bundle.entities,
        )
        wins2 = build_windows(
            bundle2.panel_norm, SMALL.t_hist, SMALL.t_fut, ("2019-01", "2020-12"),
            graph=bundle2.graph, corpus=bundle2.corpus, k_hops=1,
        )[:3]
        assert torch.equal(model(wins2).preds, base)

    def test_khop_locality_bit_exact(self, small_bundle):
        # small_world is a 2x2 grid: S01-S02, S01-S03, S02-S04, S03-S04.
        # S04 is two hops from S01, so with K=1 its features cannot matter.
        from dataclasses import replace

        from oodsim.data import DataBundle, normalize

        model = build(small_bundle)
        wins = [w for w in small_windows(small_bundle, n=20) if w.state == "S01"]
        assert wins and "S04" not in wins[0].neighborhood
        base = model(wins).preds

        rng = np.random.default_rng(0)
        feats = small_bundle.panel.features.copy()
        si = small_bundle.panel.states.index("S04")
        feats[si] += rng.normal(size=feats[si].shape)
        feats = np.abs(feats)
        panel = replace(small_bundle.panel, features=feats)
        panel_norm, _ = normalize(panel, stats=small_bundle.stats)
        bundle2 = DataBundle(
            panel=panel, panel_norm=panel_norm, stats=small_bundle.stats,
            graph=small_bundle.graph, corpus=small_bundle.corpus,
            entities=small_bundle.entities,
        )
        wins2 = [
            w
            for w in build_windows(
                bundle2.panel_norm, SMALL.t_hist, SMALL.t_fut, ("2019-01", "2020-12"),
                graph=bundle2.graph, corpus=bundle2.corpus, k_hops=1,
            )[:20]
            if w.state == "S01"
        ]
        assert torch.equal(model(wins2).preds, base)


class TestAblations:
    def test_no_policy_removes_modules(self, small_bundle):
        model = build(small_bundle, AblationFlags(no_policy=True))
        assert model.kg_encoder is None
        assert model.codebook is None
        assert model.conditioner is None
        assert model.code_encoder is None
        out = model(small_windows(small_bundle))
        assert out.assignments is None
        assert float(out.vq_loss) == 0.0

    def test_no_kg_uses_code_encoder(self, small_bundle):
        model = build(small_bundle, AblationFlags(no_kg=True))
        assert model.kg_encoder is None
        assert model.code_encoder is not None
        out = model(small_windows(small_bundle))
        assert out.assignments is None

    def test_no_vq_skips_quantization(self, small_bundle):
        model = build(small_bundle, AblationFlags(no_vq=True))
        assert model.codebook is None
        out = model(small_windows(small_bundle))
        assert out.assignments is None
        assert float(out.vq_loss) == 0.0

    def test_no_kg_encoder_keeps_vq(self, small_bundle):
        model = build(small_bundle, AblationFlags(no_kg_encoder=True))
        assert model.kg_encoder is not None
        wins = [
            w for w in small_windows(small_bundle, n=40)
            if any(not kg.is_empty for kg in w.policy_kgs)
        ]
        assert wins
        out = model(wins[:6])
        assert out.assignments is not None

    def test_full_model_produces_assignments(self, small_bundle):
        model = build(small_bundle)
        out = model(small_windows(small_bundle, n=12))
        assert out.assignments is not None
        idx, emb = out.assignments
        assert idx.shape[0] == emb.shape[0]
        assert float(out.vq_loss) > 0

    def test_policy_pathways_differ(self, small_bundle):
        wins = small_windows(small_bundle, n=4)
        full = build(small_bundle)(wins).preds
        nop = build(small_bundle, AblationFlags(no_policy=True))(wins).preds
        assert not torch.equal(full, nop)


class TestPersistenceArrays:
    def test_named_arrays_round_trip(self, small_bundle):
        model = build(small_bundle, seed=3)
        arrays = model.named_arrays()
        torch.manual_seed(99)  # different init
        other = WorldModel(SMALL, AblationFlags(), model.schema)
        other.attach(small_bundle)
        other.eval()
        other.load_arrays(arrays)
        wins = small_windows(small_bundle)
        assert torch.equal(model(wins).preds, other(wins).preds)

    def test_codebook_state_included(self, small_bundle):
        model = build(small_bundle)
        arrays = model.named_arrays()
        assert "codebook.codes" in arrays
        assert "codebook.ema_counts" in arrays
        assert arrays["codebook.dead_steps"].dtype == np.int64
