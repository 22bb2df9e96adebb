"""Policy graph encoding, strategy codebook quantization, and the
dual-branch policy-conditioned representation.

The per-(state, month) policy graph is encoded by relational neighborhood
aggregation over sentence-embedding-initialized entity nodes. Entity
embeddings are quantized against a shared codebook maintained by
exponential-moving-average statistics; the forward path conditions the state
on soft cosine-similarity retrievals from that codebook.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import EntityEmbeddingTable, PolicyKG, PolicyRecord
from .errors import DimensionMismatch, EmptyKG, SchemaError

logger = logging.getLogger(__name__)

OTHER_RELATION = "__other__"

_EPS_NORM = 1e-30


class RelationVocab:
    """Relation string -> index, capped; unseen relations map to OTHER."""

    def __init__(self, relations: list[str] | tuple[str, ...], cap: int = 32):
        if cap < 1:
            raise SchemaError("relation cap must be >= 1")
        known = sorted(set(relations))[: cap - 1]
        self._index = {r: i for i, r in enumerate(known)}
        self.other_index = len(known)
        self.num_relations = len(known) + 1  # includes OTHER

    @classmethod
    def from_corpus(cls, corpus: tuple[PolicyRecord, ...], cap: int = 32) -> "RelationVocab":
        return cls([r for rec in corpus for (_, r, _) in rec.triplets], cap=cap)

    def index(self, relation: str) -> int:
        return self._index.get(relation, self.other_index)

    def relations(self) -> list[str]:
        out = [None] * self.num_relations
        for r, i in self._index.items():
            out[i] = r
        out[self.other_index] = OTHER_RELATION
        return out


class KGEncoder(nn.Module):
    """Relational aggregation over a policy graph.

    Layer update: h_i <- act(W_self h_i + sum_r mean_{j in N_r(i)} W_r h_j),
    where each triplet contributes a forward edge (subject -> object) and an
    inverse edge with its own relation index.
    """

    def __init__(self, vocab: RelationVocab, in_dim: int, hidden_dim: int,
                 num_layers: int = 2, activation: str = "relu"):
        super().__init__()
        self.vocab = vocab
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.activation = activation
        self.input_proj = nn.Linear(in_dim, hidden_dim)
        r2 = 2 * vocab.num_relations  # forward + inverse indices
        self.self_weights = nn.ParameterList(
            nn.Parameter(torch.empty(hidden_dim, hidden_dim)) for _ in range(num_layers)
        )
        self.rel_weights = nn.ParameterList(
            nn.Parameter(torch.empty(r2, hidden_dim, hidden_dim)) for _ in range(num_layers)
        )
        for p in self.self_weights:
            nn.init.xavier_uniform_(p)
        for p in self.rel_weights:
            nn.init.xavier_uniform_(p)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x) if self.activation == "relu" else x

    def forward(
        self, kg: PolicyKG, table: EntityEmbeddingTable, skip_relational: bool = False
    ) -> tuple[tuple[str, ...], torch.Tensor]:
        """Returns (entity names, (N, hidden_dim) embeddings).

        With skip_relational=True only the input projection is applied
        (the aggregation-removed ablation).
        """
        entities = kg.entities
        if not entities:
            raise EmptyKG(f"empty policy graph for ({kg.state}, {kg.month})")
        index = {e: i for i, e in enumerate(entities)}
        init = np.stack([table.lookup(e) for e in entities])
        if init.shape[1] != self.in_dim:
            raise DimensionMismatch(
                f"entity embeddings have width {init.shape[1]}, encoder expects {self.in_dim}"
            )
        h = self.input_proj(torch.as_tensor(init, dtype=torch.float64))
        if skip_relational:
            return entities, h

        # Deduplicated directed messages grouped by relation index.
        r = self.vocab.num_relations
        groups: dict[int, set[tuple[int, int]]] = {}
        for s, rel, o in kg.triplets:
            ri = self.vocab.index(rel)
            groups.setdefault(ri, set()).add((index[s], index[o]))
            groups.setdefault(ri + r, set()).add((index[o], index[s]))

        n = len(entities)
        mats = []
        for ri in sorted(groups):
            mat = torch.zeros((n, n), dtype=torch.float64)
            counts = torch.zeros(n, dtype=torch.float64)
            for src, dst in sorted(groups[ri]):
                mat[dst, src] += 1.0
                counts[dst] += 1.0
            nz = counts > 0
            mat[nz] = mat[nz] / counts[nz, None]
            mats.append((ri, mat))

        for layer in range(self.num_layers):
            out = h @ self.self_weights[layer].T
            for ri, mat in mats:
                out = out + (mat @ h) @ self.rel_weights[layer][ri].T
            h = self._act(out)
        return entities, h


class Codebook:
    """M strategy vectors maintained by EMA statistics (no gradient updates)."""

    def __init__(self, num_codes: int, dim: int, momentum: float = 0.99,
                 eps: float = 1e-5, dead_threshold: int = 500):
        if num_codes < 1:
            raise SchemaError("codebook needs at least one code")
        self.num_codes = num_codes
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.dead_threshold = dead_threshold
        self.codes = torch.randn(num_codes, dim, dtype=torch.float64)
        self.ema_counts = torch.ones(num_codes, dtype=torch.float64)
        self.ema_sums = self.codes.clone()
        self.dead_steps = torch.zeros(num_codes, dtype=torch.int64)
        self.reseed_events = 0

    def init_from_samples(self, samples: torch.Tensor, rng: np.random.Generator) -> None:
        """k-means++-style seeding from a batch of embeddings."""
        samples = samples.detach()
        if samples.shape[0] == 0:
            return
        chosen = [int(rng.integers(samples.shape[0]))]
        while len(chosen) < self.num_codes:
            d2 = torch.cdist(samples, samples[chosen]).min(dim=1).values ** 2
            total = float(d2.sum())
            if total <= 0:
                chosen.append(int(rng.integers(samples.shape[0])))
                continue
            probs = (d2 / total).numpy()
            chosen.append(int(rng.choice(samples.shape[0], p=probs)))
        self.codes = samples[chosen].clone()
        self.ema_counts = torch.ones(self.num_codes, dtype=torch.float64)
        self.ema_sums = self.codes.clone()
        self.dead_steps.zero_()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "codes": self.codes.numpy().copy(),
            "ema_counts": self.ema_counts.numpy().copy(),
            "ema_sums": self.ema_sums.numpy().copy(),
            "dead_steps": self.dead_steps.numpy().copy(),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.codes = torch.as_tensor(arrays["codes"], dtype=torch.float64).clone()
        self.ema_counts = torch.as_tensor(arrays["ema_counts"], dtype=torch.float64).clone()
        self.ema_sums = torch.as_tensor(arrays["ema_sums"], dtype=torch.float64).clone()
        self.dead_steps = torch.as_tensor(arrays["dead_steps"], dtype=torch.int64).clone()


def quantize(e: torch.Tensor, codebook: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-code assignment with straight-through gradients.

    Returns (indices, quantized). Ties resolve to the lowest code index; the
    quantized value equals the assigned code in the forward pass while its
    gradient passes through to `e` unchanged.
    """
    single = e.dim() == 1
    ee = e.unsqueeze(0) if single else e
    diff = ee.unsqueeze(1) - codebook.codes.unsqueeze(0)  # (N, M, d)
    dist = diff.pow(2).sum(-1)
    vmin = dist.min(dim=1, keepdim=True).values
    arange = torch.arange(codebook.num_codes)
    idx = (
        torch.where(dist == vmin, arange, codebook.num_codes)
        .min(dim=1)
        .values
        .clamp_max(codebook.num_codes - 1)  # non-finite inputs match nothing
    )
    q = ee + (codebook.codes[idx] - ee).detach()
    if single:
        return idx[0], q[0]
    return idx, q


def ema_update(
    codebook: Codebook,
    assignments: tuple[torch.Tensor, torch.Tensor],
    rng: np.random.Generator | None = None,
) -> None:
    """One EMA step from a batch of (code index, embedding) assignments.

    counts <- a*counts + (1-a)*batch_count ; sums likewise with the batch
    embedding sums; codes <- sums / max(counts, eps). Codes unassigned for
    `dead_threshold` consecutive steps are re-seeded to a random embedding
    from the current batch when an RNG is supplied.
    """
    idx, e = assignments
    e = e.detach()
    m = codebook.num_codes
    counts = torch.bincount(idx, minlength=m).to(torch.float64)
    sums = torch.zeros_like(codebook.ema_sums)
    sums.index_add_(0, idx, e)
    a = codebook.momentum
    codebook.ema_counts = a * codebook.ema_counts + (1 - a) * counts
    codebook.ema_sums = a * codebook.ema_sums + (1 - a) * sums
    codebook.codes = codebook.ema_sums / codebook.ema_counts.clamp_min(codebook.eps)[:, None]

    assigned = counts > 0
    codebook.dead_steps = torch.where(
        assigned, torch.zeros_like(codebook.dead_steps), codebook.dead_steps + 1
    )
    if rng is not None and e.shape[0] > 0:
        dead = (codebook.dead_steps >= codebook.dead_threshold).nonzero().flatten()
        for k in dead.tolist():
            pick = int(rng.integers(e.shape[0]))
            codebook.codes[k] = e[pick]
            codebook.ema_sums[k] = e[pick]
            codebook.ema_counts[k] = 1.0
            codebook.dead_steps[k] = 0
            codebook.reseed_events += 1
            logger.info("codebook: re-seeded dead code %d", k)


def commitment_loss(embeddings: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Mean squared distance from each embedding to its assigned code.

    Codes are treated as constants; the gradient flows to the embeddings only.
    """
    if embeddings.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    idx, _ = quantize(embeddings, codebook)
    diff = embeddings - codebook.codes[idx].detach()
    return diff.pow(2).sum(-1).mean()


def retrieve(u: torch.Tensor, codebook: Codebook, tau_temp: float = 1.0,
             codes: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax-weighted code mixture keyed by cosine similarity.

    A zero-norm query (or code) contributes similarity 0, so a zero query
    yields uniform weights. Invariant under positive rescaling of `u`.
    """
    if tau_temp <= 0:
        raise SchemaError("retrieval temperature must be positive")
    if codes is None:
        codes = codebook.codes
    single = u.dim() == 1
    uu = u.unsqueeze(0) if single else u
    un = uu.norm(dim=-1, keepdim=True)
    cn = codes.norm(dim=-1, keepdim=True)
    u_hat = uu / un.clamp_min(_EPS_NORM) * (un > 0)
    c_hat = codes / cn.clamp_min(_EPS_NORM) * (cn > 0)
    sim = u_hat @ c_hat.T
    weights = torch.softmax(sim / tau_temp, dim=-1)
    out = weights @ codes
    return out[0] if single else out


class PolicyConditioner(nn.Module):
    """Dual-branch retrieval: one keyed by the state embedding, one by the
    mean-pooled policy-graph embedding (or a learned null vector when no
    policy is in force). Each branch is projected to half the policy width.
    """

    def __init__(self, code_dim: int, policy_dim: int, tau_temp: float = 1.0):
        super().__init__()
        if policy_dim % 2 != 0:
            raise SchemaError("policy width must be even")
        self.code_dim = code_dim
        self.policy_dim = policy_dim
        self.tau_temp = tau_temp
        self.state_proj = nn.Linear(code_dim, policy_dim // 2, bias=False)
        self.kg_proj = nn.Linear(code_dim, policy_dim // 2, bias=False)
        # Kept away from the zero vector: cosine similarity is not
        # differentiable there.
        self.null_policy = nn.Parameter(0.1 * torch.randn(code_dim))

    def forward(
        self,
        h_state: torch.Tensor,
        kg_mean: torch.Tensor | None,
        codebook: Codebook,
    ) -> torch.Tensor:
        query = kg_mean if kg_mean is not None else self.null_policy
        branch_state = self.state_proj(retrieve(h_state, codebook, self.tau_temp))
        branch_kg = self.kg_proj(retrieve(query, codebook, self.tau_temp))
        return torch.cat([branch_state, branch_kg], dim=-1)

    def forward_no_vq(self, h_state: torch.Tensor, kg_mean: torch.Tensor | None) -> torch.Tensor:
        """Codebook ablation: project the raw queries directly."""
        query = kg_mean if kg_mean is not None else self.null_policy
        return torch.cat([self.state_proj(h_state), self.kg_proj(query)], dim=-1)


# Fixed attribute schema for the coded-policy fallback representation.
CODE_BINARY_FIELDS = (
    "prescriber_mandatory_PDMP_use",
    "dispenser_mandatory_PDMP_use",
    "establish_program",
    "expand_program",
    "general_funding",
    "dedicated_funding",
    "certification_requirement",
    "operating_standards",
    "reporting_requirement",
)
CODE_CATEGORICAL_FIELDS = {
    "substance_monitored": ("schedules_II_V", "schedules_II_IV", "drugs_of_concern"),
    "target_population": (
        "recovery_residents",
        "youth",
        "homeless",
        "incarcerated_or_detained",
        "mental_illness",
    ),
}
CODE_INTEGER_FIELDS = ("max_initial_days_adult", "max_initial_days_minor", "mme_daily_limit")
CODE_FIELDS = (
    CODE_BINARY_FIELDS
    + tuple(CODE_CATEGORICAL_FIELDS)
    + CODE_INTEGER_FIELDS
)


def code_vector_width() -> int:
    return (
        len(CODE_BINARY_FIELDS)
        + sum(len(v) for v in CODE_CATEGORICAL_FIELDS.values())
        + len(CODE_INTEGER_FIELDS)
    )


def validate_policy_codes(codes: dict) -> None:
    unknown = set(codes) - set(CODE_FIELDS)
    if unknown:
        raise SchemaError(f"unknown policy-code fields {sorted(unknown)}")
    for f in CODE_BINARY_FIELDS:
        if f in codes and codes[f] not in (0, 1):
            raise SchemaError(f"binary field {f} must be 0 or 1, got {codes[f]!r}")
    for f, values in CODE_CATEGORICAL_FIELDS.items():
        if f not in codes or codes[f] is None:
            continue
        got = codes[f] if isinstance(codes[f], (list, tuple)) else [codes[f]]
        bad = [v for v in got if v not in values]
        if bad:
            raise SchemaError(f"field {f}: unknown values {bad}")
    for f in CODE_INTEGER_FIELDS:
        if f in codes and codes[f] is not None:
            if not isinstance(codes[f], (int, float)) or codes[f] < 0:
                raise SchemaError(f"integer field {f} must be a nonnegative number")


def code_bounds(corpus: tuple[PolicyRecord, ...]) -> np.ndarray:
    """Corpus-wide (min, max) per integer field, for min-max scaling."""
    bounds = np.zeros((2, len(CODE_INTEGER_FIELDS)))
    for j, f in enumerate(CODE_INTEGER_FIELDS):
        vals = [
            float(rec.policy_codes[f])
            for rec in corpus
            if rec.policy_codes and rec.policy_codes.get(f) is not None
        ]
        bounds[0, j] = min(vals) if vals else 0.0
        bounds[1, j] = max(vals) if vals else 1.0
    return bounds


def encode_code_vector(codes: dict | None, bounds: np.ndarray) -> np.ndarray:
    """Fixed-width numeric encoding of one policy's attribute codes.

    Binaries stay 0/1; categoricals are (multi-)hot; integers are min-max
    scaled to [0,1] with the corpus-wide bounds. Absent fields encode as 0.
    """
    if codes is None:
        codes = {}
    validate_policy_codes(codes)
    parts: list[float] = [float(codes.get(f, 0)) for f in CODE_BINARY_FIELDS]
    for f, values in CODE_CATEGORICAL_FIELDS.items():
        got = codes.get(f)
        got = [] if got is None else (list(got) if isinstance(got, (list, tuple)) else [got])
        parts.extend(1.0 if v in got else 0.0 for v in values)
    for j, f in enumerate(CODE_INTEGER_FIELDS):
        val = codes.get(f)
        if val is None:
            parts.append(0.0)
        else:
            lo, hi = bounds[0, j], bounds[1, j]
            span = hi - lo
            parts.append(float((val - lo) / span) if span > 0 else 0.0)
    return np.asarray(parts)


class PolicyCodeEncoder(nn.Module):
    """Learned linear map from aggregated attribute codes to the policy width.

    Multiple concurrently active policies aggregate by elementwise max of
    their encoded vectors before the projection.
    """

    def __init__(self, policy_dim: int, bounds: np.ndarray):
        super().__init__()
        self.proj = nn.Linear(code_vector_width(), policy_dim)
        self.register_buffer("bounds", torch.as_tensor(bounds, dtype=torch.float64))

    def encode_records(self, records: list[PolicyRecord]) -> torch.Tensor:
        bounds = self.bounds.numpy()
        if not records:
            vec = np.zeros(code_vector_width())
        else:
            vecs = [encode_code_vector(r.policy_codes, bounds) for r in records]
            vec = np.max(np.stack(vecs), axis=0)
        return torch.as_tensor(vec, dtype=torch.float64)

    def forward(self, code_vec: torch.Tensor) -> torch.Tensor:
        return self.proj(code_vec)
