"""Full forecasting model: spatial encoding per history month, policy
conditioning, token fusion, temporal backbone, and per-horizon heads.

The forward pass is pure given the module parameters; all iteration orders
are canonicalized so repeated evaluation is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import DataBundle, EntityEmbeddingTable, PolicyRecord, WindowSample
from .errors import ConfigError
from .policy import (
    Codebook,
    KGEncoder,
    PolicyCodeEncoder,
    PolicyConditioner,
    RelationVocab,
    code_bounds,
    commitment_loss,
    quantize,
)
from .spatial import SpatialEncoder
from .temporal import TemporalBackbone


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    policy_dim: int = 6
    pe_dim: int = 16
    n_heads: int = 4
    ffw_mult: int = 4
    dropout: float = 0.1
    k_hops: int = 1
    kg_layers: int = 2
    codebook_size: int = 64
    ema_momentum: float = 0.99
    tau_temp: float = 1.0
    relation_cap: int = 32
    t_hist: int = 6
    t_fut: int = 6
    pe_absolute: bool = True
    activation: str = "relu"

    def validate(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.policy_dim % 2 != 0:
            raise ConfigError("policy_dim must be even")
        if self.pe_dim % 2 != 0:
            raise ConfigError("pe_dim must be even")
        if self.t_hist < 1 or self.t_fut < 1:
            raise ConfigError("t_hist and t_fut must be positive")


@dataclass(frozen=True)
class AblationFlags:
    no_vq: bool = False
    no_kg_encoder: bool = False
    no_kg: bool = False
    no_policy: bool = False
    no_pe: bool = False
    feature_drop: tuple[str, ...] = ()

    def validate(self):
        from .data import FEATURE_GROUPS

        bad = set(self.feature_drop) - set(FEATURE_GROUPS)
        if bad:
            raise ConfigError(f"unknown feature groups {sorted(bad)}")

    @property
    def policy_active(self) -> bool:
        return not self.no_policy

    @property
    def kg_active(self) -> bool:
        return self.policy_active and not self.no_kg

    @property
    def vq_active(self) -> bool:
        return self.kg_active and not self.no_vq


@dataclass(frozen=True)
class ArchSchema:
    """Data-derived quantities that fix the model's architecture."""

    channels: tuple[str, ...]
    entity_dim: int
    relations: tuple[str, ...]  # known relations in vocabulary order (OTHER excluded)
    code_bounds: tuple[tuple[float, ...], tuple[float, ...]]
    origin_month: str

    @classmethod
    def from_bundle(cls, bundle: DataBundle, config: ModelConfig) -> "ArchSchema":
        vocab = RelationVocab.from_corpus(bundle.corpus, cap=config.relation_cap)
        bounds = code_bounds(bundle.corpus)
        return cls(
            channels=bundle.panel.channels,
            entity_dim=bundle.entities.dim,
            relations=tuple(vocab.relations()[:-1]),
            code_bounds=(tuple(bounds[0]), tuple(bounds[1])),
            origin_month=bundle.panel.months[0],
        )


@dataclass
class ModelOutput:
    preds: torch.Tensor  # (B, T_f)
    vq_loss: torch.Tensor  # scalar
    assignments: tuple[torch.Tensor, torch.Tensor] | None  # (indices, embeddings)


class WorldModel(nn.Module):
    def __init__(self, config: ModelConfig, ablation: AblationFlags, schema: ArchSchema):
        super().__init__()
        config.validate()
        ablation.validate()
        self.config = config
        self.ablation = ablation
        self.schema = schema
        d = config.hidden_dim

        self.spatial = SpatialEncoder(
            len(schema.channels), d, config.k_hops, config.activation
        )
        self.codebook: Codebook | None = None
        self.kg_encoder: KGEncoder | None = None
        self.conditioner: PolicyConditioner | None = None
        self.code_encoder: PolicyCodeEncoder | None = None
        if ablation.policy_active:
            if ablation.kg_active:
                self.kg_encoder = KGEncoder(
                    RelationVocab(list(schema.relations), cap=config.relation_cap),
                    schema.entity_dim,
                    d,
                    config.kg_layers,
                    config.activation,
                )
                self.conditioner = PolicyConditioner(d, config.policy_dim, config.tau_temp)
                if ablation.vq_active:
                    self.codebook = Codebook(
                        config.codebook_size, d, momentum=config.ema_momentum
                    )
            else:
                self.code_encoder = PolicyCodeEncoder(
                    config.policy_dim, np.asarray(schema.code_bounds)
                )
        self.backbone = TemporalBackbone(
            hidden_dim=d,
            policy_dim=config.policy_dim,
            pe_dim=config.pe_dim,
            t_fut=config.t_fut,
            n_heads=config.n_heads,
            ffw_mult=config.ffw_mult,
            dropout=config.dropout,
            num_layers=1,
            out_channels=1,
            use_pe=not ablation.no_pe,
        )
        self.double()

        # Data closures (not parameters): set via attach().
        self.entity_table: EntityEmbeddingTable | None = None
        self.records: dict[str, PolicyRecord] = {}

    @classmethod
    def build(cls, config: ModelConfig, ablation: AblationFlags, bundle: DataBundle) -> "WorldModel":
        schema = ArchSchema.from_bundle(bundle, config)
        model = cls(config, ablation, schema)
        model.attach(bundle)
        return model

    def attach(self, bundle: DataBundle) -> None:
        self.entity_table = bundle.entities
        self.records = {rec.policy_id: rec for rec in bundle.corpus}

    # -- forward helpers -------------------------------------------------

    def _agg_matrix(self, sample: WindowSample) -> torch.Tensor:
        n = len(sample.neighborhood)
        mat = torch.zeros((n, n), dtype=torch.float64)
        deg = torch.zeros(n, dtype=torch.float64)
        for a, b in sample.sub_edges:
            mat[a, b] += 1.0
            mat[b, a] += 1.0
            deg[a] += 1.0
            deg[b] += 1.0
        nz = deg > 0
        mat[nz] = mat[nz] / deg[nz, None]
        return mat

    def _spatial_tokens(self, samples: list[WindowSample]) -> torch.Tensor:
        """Encode every (sample, month) center state: (B, T_h, d)."""
        b = len(samples)
        t_h = self.config.t_hist
        out = torch.zeros((b, t_h, self.config.hidden_dim), dtype=torch.float64)
        groups: dict[tuple, list[int]] = {}
        for i, s in enumerate(samples):
            key = (s.neighborhood, s.sub_edges, s.center_index)
            groups.setdefault(key, []).append(i)
        for key in sorted(groups, key=lambda k: (k[0], k[2])):
            idxs = groups[key]
            ref = samples[idxs[0]]
            feats = torch.as_tensor(
                np.stack([samples[i].history for i in idxs]), dtype=torch.float64
            )  # (g, N, T_h, C)
            feats = feats.transpose(1, 2)  # (g, T_h, N, C)
            agg = self._agg_matrix(ref)
            h = self.spatial(feats, agg)  # (g, T_h, N, d)
            center = h[:, :, ref.center_index, :]
            for j, i in enumerate(idxs):
                out[i] = center[j]
        return out

    def _policy_tokens(
        self, samples: list[WindowSample], h_tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, tuple[torch.Tensor, torch.Tensor] | None]:
        """Policy vector per token plus the quantization loss/assignments."""
        b = len(samples)
        t_h = self.config.t_hist
        d_p = self.config.policy_dim
        zero_vq = torch.zeros((), dtype=torch.float64)

        if not self.ablation.policy_active:
            return torch.zeros((b, t_h, d_p), dtype=torch.float64), zero_vq, None

        if not self.ablation.kg_active:
            vecs = []
            for s in samples:
                for ids in s.active_ids:
                    recs = [self.records[i] for i in ids if i in self.records]
                    vecs.append(self.code_encoder.encode_records(recs))
            flat = torch.stack(vecs) if vecs else torch.zeros((0, 1), dtype=torch.float64)
            p = self.code_encoder(flat).view(b, t_h, d_p)
            return p, zero_vq, None

        # Encode each distinct non-empty policy graph once.
        unique: dict[tuple, int] = {}
        occurrences: list[int] = []
        kg_list = []
        token_kg: list[int] = []  # -1 for empty
        for s in samples:
            for kg in s.policy_kgs:
                if kg.is_empty:
                    token_kg.append(-1)
                    continue
                key = kg.triplets
                if key not in unique:
                    unique[key] = len(kg_list)
                    kg_list.append(kg)
                    occurrences.append(0)
                occurrences[unique[key]] += 1
                token_kg.append(unique[key])

        kg_means: list[torch.Tensor] = []
        per_kg_commit: list[torch.Tensor] = []
        assign_idx: list[torch.Tensor] = []
        assign_emb: list[torch.Tensor] = []
        for u, kg in enumerate(kg_list):
            _, emb = self.kg_encoder(
                kg, self.entity_table, skip_relational=self.ablation.no_kg_encoder
            )
            kg_means.append(emb.mean(dim=0))
            if self.ablation.vq_active:
                per_kg_commit.append(commitment_loss(emb, self.codebook))
                idx, _ = quantize(emb.detach(), self.codebook)
                reps = occurrences[u]
                assign_idx.append(idx.repeat(reps))
                assign_emb.append(emb.detach().repeat(reps, 1))

        queries = []
        null_vec = self.conditioner.null_policy
        for t in token_kg:
            queries.append(null_vec if t < 0 else kg_means[t])
        kg_query = torch.stack(queries).view(b, t_h, -1)

        h_flat = h_tokens.reshape(b * t_h, -1)
        q_flat = kg_query.reshape(b * t_h, -1)
        if self.ablation.vq_active:
            p_flat = self.conditioner(h_flat, q_flat, self.codebook)
        else:
            p_flat = self.conditioner.forward_no_vq(h_flat, q_flat)
        p = p_flat.view(b, t_h, d_p)

        if self.ablation.vq_active and per_kg_commit:
            weights = torch.as_tensor(
                [float(o) for o in occurrences], dtype=torch.float64
            )
            vq = (torch.stack(per_kg_commit) * weights).sum() / weights.sum()
            assignments = (torch.cat(assign_idx), torch.cat(assign_emb))
        else:
            vq = zero_vq
            assignments = None
        return p, vq, assignments

    def forward(self, samples: list[WindowSample]) -> ModelOutput:
        if not samples:
            raise ConfigError("empty batch")
        h = self._spatial_tokens(samples)
        p, vq, assignments = self._policy_tokens(samples, h)
        month_index = torch.as_tensor(
            [
                [s.t0 + j for j in range(self.config.t_hist)]
                for s in samples
            ],
            dtype=torch.float64,
        )
        if not self.config.pe_absolute:
            month_index = month_index - month_index[:, :1]
        preds = self.backbone(h, p, month_index).squeeze(-1)
        return ModelOutput(preds=preds, vq_loss=vq, assignments=assignments)

    # -- persistence ------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All trainable parameters plus codebook state, as numpy arrays."""
        out = {
            name: p.detach().numpy().copy() for name, p in self.named_parameters()
        }
        for name, buf in self.named_buffers():
            out[name] = buf.detach().numpy().copy()
        if self.codebook is not None:
            for k, v in self.codebook.state_arrays().items():
                out[f"codebook.{k}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        cb = {
            k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("codebook.")
        }
        rest = {k: v for k, v in arrays.items() if not k.startswith("codebook.")}
        state = {k: torch.as_tensor(v) for k, v in rest.items()}
        self.load_state_dict(state)
        if self.codebook is not None:
            self.codebook.load_state_arrays(cb)
