"""Training loop, evaluation protocols, metrics, and gradient verification."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .data import (
    FEATURE_GROUPS,
    DataBundle,
    StatePanel,
    WindowSample,
    build_windows,
    normalize,
)
from .errors import ConfigError, DivergenceError, ShapeError, SplitMismatch
from .model import AblationFlags, ArchSchema, ModelConfig, ModelOutput, WorldModel
from .policy import ema_update

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitConfig:
    train_months: tuple[str, str]
    val_months: tuple[str, str]
    test_months: tuple[str, str]
    protocol: str = "id"
    train_states: tuple[str, ...] | None = None
    test_states: tuple[str, ...] | None = None

    def validate(self):
        if self.protocol not in ("id", "ood"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "ood":
            if not self.train_states or not self.test_states:
                raise ConfigError("ood protocol needs train_states and test_states")
            overlap = set(self.train_states) & set(self.test_states)
            if overlap:
                raise ConfigError(f"train/test state overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    split: SplitConfig | None = None
    ablation: AblationFlags = AblationFlags()
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    vq_weight: float = 1.0
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.vq_weight < 0:
            raise ConfigError("vq_weight must be nonnegative")
        if self.split is None:
            raise ConfigError("a split configuration is required")
        self.model.validate()
        self.ablation.validate()
        self.split.validate()


def train_config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def train_config_from_dict(d: dict) -> TrainConfig:
    model = ModelConfig(**d["model"])
    split = SplitConfig(
        train_months=tuple(d["split"]["train_months"]),
        val_months=tuple(d["split"]["val_months"]),
        test_months=tuple(d["split"]["test_months"]),
        protocol=d["split"]["protocol"],
        train_states=tuple(d["split"]["train_states"]) if d["split"]["train_states"] else None,
        test_states=tuple(d["split"]["test_states"]) if d["split"]["test_states"] else None,
    )
    abl = dict(d["ablation"])
    abl["feature_drop"] = tuple(abl.get("feature_drop", ()))
    ablation = AblationFlags(**abl)
    rest = {
        k: v
        for k, v in d.items()
        if k not in ("model", "split", "ablation")
    }
    return TrainConfig(model=model, split=split, ablation=ablation, **rest)


def arch_schema_from_dict(d: dict) -> ArchSchema:
    return ArchSchema(
        channels=tuple(d["channels"]),
        entity_dim=d["entity_dim"],
        relations=tuple(d["relations"]),
        code_bounds=(tuple(d["code_bounds"][0]), tuple(d["code_bounds"][1])),
        origin_month=d["origin_month"],
    )


# -- losses ---------------------------------------------------------------


def prediction_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over samples and horizons of the squared L2 error."""
    if preds.shape != targets.shape:
        raise ShapeError(f"prediction shape {tuple(preds.shape)} != target {tuple(targets.shape)}")
    return (preds - targets).pow(2).mean()


def total_loss(pred_loss: torch.Tensor, vq_loss: torch.Tensor, vq_weight: float) -> torch.Tensor:
    return pred_loss + vq_weight * vq_loss


# -- metrics ---------------------------------------------------------------


@dataclass
class Metrics:
    mae: float
    rmse: float
    mae_h13: float
    rmse_h13: float
    mae_h46: float
    rmse_h46: float
    per_state: dict[str, dict[str, float]] = field(default_factory=dict)
    raw: dict[str, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "mae": self.mae,
            "rmse": self.rmse,
            "mae_h13": self.mae_h13,
            "rmse_h13": self.rmse_h13,
            "mae_h46": self.mae_h46,
            "rmse_h46": self.rmse_h46,
            "per_state": self.per_state,
        }
        if self.raw is not None:
            out["raw"] = self.raw
        return out


def _mae_rmse(err: np.ndarray) -> tuple[float, float]:
    return float(np.abs(err).mean()), float(np.sqrt((err**2).mean()))


def compute_metrics(
    preds: np.ndarray,
    targets: np.ndarray,
    states: list[str],
    raw_preds: np.ndarray | None = None,
    raw_targets: np.ndarray | None = None,
) -> Metrics:
    """Error metrics averaged over all (sample, horizon) pairs.

    Horizon slices cover the first and second halves of the forecast range
    (1-3 and 4-6 for the default six-month horizon).
    """
    if preds.shape != targets.shape:
        raise ShapeError("prediction/target shapes disagree")
    err = preds - targets
    t_f = err.shape[1]
    first = slice(0, max(1, math.ceil(t_f / 2)))
    second = slice(t_f // 2, t_f)
    mae, rmse = _mae_rmse(err)
    mae13, rmse13 = _mae_rmse(err[:, first])
    mae46, rmse46 = _mae_rmse(err[:, second])
    per_state: dict[str, dict[str, float]] = {}
    for state in sorted(set(states)):
        rows = [i for i, s in enumerate(states) if s == state]
        smae, srmse = _mae_rmse(err[rows])
        per_state[state] = {"mae": smae, "rmse": srmse}
    raw = None
    if raw_preds is not None and raw_targets is not None:
        rerr = raw_preds - raw_targets
        rmae, rrmse = _mae_rmse(rerr)
        rmae13, rrmse13 = _mae_rmse(rerr[:, first])
        rmae46, rrmse46 = _mae_rmse(rerr[:, second])
        raw = {
            "mae": rmae,
            "rmse": rrmse,
            "mae_h13": rmae13,
            "rmse_h13": rrmse13,
            "mae_h46": rmae46,
            "rmse_h46": rrmse46,
        }
    return Metrics(mae, rmse, mae13, rmse13, mae46, rmse46, per_state, raw)


# -- data preparation -------------------------------------------------------


def apply_feature_drop(bundle: DataBundle, groups: tuple[str, ...]) -> DataBundle:
    """Zero the named channel groups and drop them from the norm stats."""
    if not groups:
        return bundle
    dropped = tuple(
        c for g in groups for c in FEATURE_GROUPS[g] if c in bundle.panel.channels
    )
    stats = replace(bundle.stats, dropped_channels=dropped)
    panel_norm, _ = normalize(bundle.panel, stats=stats)
    return replace(bundle, panel_norm=panel_norm, stats=stats)


def mask_heldout_states(panel: StatePanel, heldout: tuple[str, ...]) -> StatePanel:
    """Replace held-out states' features with the visible states' mean."""
    feats = panel.features.copy()
    keep = [i for i, s in enumerate(panel.states) if s not in heldout]
    mask = [i for i, s in enumerate(panel.states) if s in heldout]
    if mask:
        mean = feats[keep].mean(axis=(0, 1))
        feats[mask] = mean[None, None, :]
    return replace(panel, features=feats)


def _collate_targets(samples: list[WindowSample]) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.target for s in samples]), dtype=torch.float64)


def _forward_eval(model: WorldModel, samples: list[WindowSample], batch_size: int = 256) -> np.ndarray:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            outs.append(model(samples[i : i + batch_size]).preds.numpy())
    return np.concatenate(outs, axis=0)


# -- training ----------------------------------------------------------------


class EarlyStopper:
    """Strict-improvement early stopping; ties keep the earliest best epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def _prepare(bundle: DataBundle, config: TrainConfig):
    split = config.split
    bundle = apply_feature_drop(bundle, config.ablation.feature_drop)
    if split.protocol == "ood":
        train_states = split.train_states
        panel_train = mask_heldout_states(bundle.panel_norm, split.test_states)
    else:
        train_states = split.train_states or bundle.panel_norm.states
        panel_train = bundle.panel_norm
    k = config.model.k_hops
    train_windows = build_windows(
        panel_train, config.model.t_hist, config.model.t_fut, split.train_months,
        graph=bundle.graph, corpus=bundle.corpus, k_hops=k,
        states=tuple(train_states), mode="contained",
    )
    val_windows = build_windows(
        panel_train, config.model.t_hist, config.model.t_fut, split.val_months,
        graph=bundle.graph, corpus=bundle.corpus, k_hops=k,
        states=tuple(train_states), mode="target_in_split",
    )
    return bundle, train_windows, val_windows


def _init_codebook(model: WorldModel, windows: list[WindowSample], rng: np.random.Generator):
    if model.codebook is None:
        return
    embs = []
    seen = set()
    with torch.no_grad():
        for s in windows:
            for kg in s.policy_kgs:
                if kg.is_empty or kg.triplets in seen:
                    continue
                seen.add(kg.triplets)
                _, e = model.kg_encoder(
                    kg, model.entity_table, skip_relational=model.ablation.no_kg_encoder
                )
                embs.append(e)
            if len(seen) >= 4 * model.codebook.num_codes:
                break
    if embs:
        model.codebook.init_from_samples(torch.cat(embs, dim=0), rng)


def train(bundle: DataBundle, config: TrainConfig, log_path=None) -> Checkpoint:
    """Optimize the joint objective with Adam; return the best-validation epoch.

    Fully deterministic for a fixed (seed, config, data) triple.
    """
    torch.set_num_threads(1)
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    bundle, train_windows, val_windows = _prepare(bundle, config)
    model = WorldModel.build(config.model, config.ablation, bundle)
    _init_codebook(model, train_windows, rng)
    val_targets = np.stack([s.target for s in val_windows])

    opt = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
    )

    history: list[dict] = []
    stopper = EarlyStopper(config.patience)
    best_arrays: dict[str, np.ndarray] | None = None
    order = np.arange(len(train_windows))
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            model.train()
            rng.shuffle(order)
            epoch_loss = 0.0
            epoch_vq = 0.0
            nb = 0
            for i in range(0, len(order), config.batch_size):
                batch = [train_windows[j] for j in order[i : i + config.batch_size]]
                out: ModelOutput = model(batch)
                pred_l = prediction_loss(out.preds, _collate_targets(batch))
                loss = total_loss(pred_l, out.vq_loss, config.vq_weight)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}"
                    )
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                if out.assignments is not None:
                    ema_update(model.codebook, out.assignments, rng)
                epoch_loss += float(loss.detach())
                epoch_vq += float(out.vq_loss.detach())
                nb += 1

            val_preds = _forward_eval(model, val_windows)
            val_err = val_preds - val_targets
            val_mae = float(np.abs(val_err).mean())
            val_rmse = float(np.sqrt((val_err**2).mean()))
            record = {
                "epoch": epoch,
                "train_loss": epoch_loss / max(nb, 1),
                "vq_loss": epoch_vq / max(nb, 1),
                "val_mae": val_mae,
                "val_rmse": val_rmse,
                "lr": config.learning_rate,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            stop = stopper.update(epoch, val_mae)
            if stopper.best_epoch == epoch:
                best_arrays = model.named_arrays()
            if stop:
                logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()

    if best_arrays is None:
        raise DivergenceError("training produced no finite validation epoch")
    schema_dict = {
        "channels": list(model.schema.channels),
        "entity_dim": model.schema.entity_dim,
        "relations": list(model.schema.relations),
        "code_bounds": [list(model.schema.code_bounds[0]), list(model.schema.code_bounds[1])],
        "origin_month": model.schema.origin_month,
    }
    return Checkpoint(
        config=train_config_to_dict(config),
        schema=schema_dict,
        params=best_arrays,
        norm_stats=bundle.stats,
        history=history,
    )


def model_from_checkpoint(ckpt: Checkpoint, bundle: DataBundle) -> tuple[WorldModel, TrainConfig]:
    """Rebuild the trained model and attach the bundle's data closures."""
    config = train_config_from_dict(ckpt.config)
    schema = arch_schema_from_dict(ckpt.schema)
    model = WorldModel(config.model, config.ablation, schema)
    model.load_arrays(ckpt.params)
    model.attach(bundle)
    model.eval()
    return model, config


def evaluation_windows(
    ckpt: Checkpoint, bundle: DataBundle, protocol: str
) -> tuple[list[WindowSample], StatePanel]:
    """Test windows for the requested protocol, normalized with the
    checkpoint's training statistics."""
    config = train_config_from_dict(ckpt.config)
    split = config.split
    panel_norm, _ = normalize(bundle.panel, stats=ckpt.norm_stats)
    if protocol == "id":
        states = tuple(split.train_states or panel_norm.states)
    elif protocol == "ood":
        if not split.test_states:
            raise SplitMismatch("checkpoint has no held-out state list")
        states = tuple(split.test_states)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    windows = build_windows(
        panel_norm, config.model.t_hist, config.model.t_fut, split.test_months,
        graph=bundle.graph, corpus=bundle.corpus, k_hops=config.model.k_hops,
        states=states, mode="target_in_split",
    )
    return windows, panel_norm


def _raw_scale(
    values: np.ndarray, samples: list[WindowSample], stats, panel: StatePanel
) -> np.ndarray:
    out = np.empty_like(values)
    ch = panel.outcome_channel
    for i, s in enumerate(samples):
        si = panel.states.index(s.state)
        out[i] = values[i] * stats.std[si, ch] + stats.mean[si, ch]
    return out


def evaluate(ckpt: Checkpoint, bundle: DataBundle, protocol: str = "id") -> Metrics:
    """Horizon-sliced MAE/RMSE on the test months of the requested protocol."""
    torch.set_num_threads(1)
    model, _ = model_from_checkpoint(ckpt, bundle)
    windows, panel_norm = evaluation_windows(ckpt, bundle, protocol)
    preds = _forward_eval(model, windows)
    targets = np.stack([s.target for s in windows])
    states = [s.state for s in windows]
    raw_preds = _raw_scale(preds, windows, ckpt.norm_stats, panel_norm)
    raw_targets = _raw_scale(targets, windows, ckpt.norm_stats, panel_norm)
    return compute_metrics(preds, targets, states, raw_preds, raw_targets)


def persistence_metrics(ckpt: Checkpoint, bundle: DataBundle, protocol: str = "id") -> Metrics:
    """Repeat-last-value baseline evaluated on the same windows."""
    windows, panel_norm = evaluation_windows(ckpt, bundle, protocol)
    ch = panel_norm.outcome_channel
    t_f = windows[0].target.shape[0]
    preds = np.stack(
        [np.full(t_f, w.history[w.center_index, -1, ch]) for w in windows]
    )
    targets = np.stack([w.target for w in windows])
    states = [w.state for w in windows]
    raw_preds = _raw_scale(preds, windows, ckpt.norm_stats, panel_norm)
    raw_targets = _raw_scale(targets, windows, ckpt.norm_stats, panel_norm)
    return compute_metrics(preds, targets, states, raw_preds, raw_targets)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict[str, float]


def grad_check(
    model: WorldModel,
    samples: list[WindowSample],
    vq_weight: float = 1.0,
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients of the joint loss against central finite
    differences, parameter group by parameter group.

    Relative error uses |a - f| / max(|a| + |f|, 1e-4) so that effectively
    zero entries cannot dominate the report.
    """
    model.eval()
    targets = _collate_targets(samples)

    def loss_tensor() -> torch.Tensor:
        out = model(samples)
        return total_loss(prediction_loss(out.preds, targets), out.vq_loss, vq_weight)

    def loss_value() -> float:
        with torch.no_grad():
            return float(loss_tensor())

    model.zero_grad()
    loss = loss_tensor()
    loss.backward()

    per_group: dict[str, float] = {}
    worst = 0.0
    for name, param in model.named_parameters():
        grad = (
            param.grad.detach().clone()
            if param.grad is not None
            else torch.zeros_like(param)
        )
        flat = param.data.view(-1)
        gflat = grad.view(-1)
        group_worst = 0.0
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            lp = loss_value()
            flat[i] = orig - h
            lm = loss_value()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = float(gflat[i])
            rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-4)
            group_worst = max(group_worst, rel)
        per_group[name] = group_worst
        worst = max(worst, group_worst)
    model.zero_grad()
    return GradCheckResult(max_rel_error=worst, per_group=per_group)
