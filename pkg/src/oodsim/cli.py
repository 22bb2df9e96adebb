"""Command-line entry points for the full lifecycle.

Configuration precedence: CLI flag > OODSIM_* environment variable > config
file > built-in default. With --json, results print as canonical JSON that
byte-matches the corresponding service endpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import checkpoint as ckpt_mod
from .checkpoint import canonical_json
from .data import load_bundle
from .errors import ConfigError, OodsimError
from .model import AblationFlags, ModelConfig
from .training import (
    SplitConfig,
    TrainConfig,
    evaluate,
    grad_check,
    persistence_metrics,
    train,
)

DEFAULT_SPLIT = {
    "train_months": ["2019-01", "2022-12"],
    "val_months": ["2023-01", "2023-12"],
    "test_months": ["2024-01", "2024-12"],
    "protocol": "id",
    "train_states": None,
    "test_states": None,
}


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _setting(flag_value, env_name: str, cfg: dict, key: str, default=None):
    if flag_value is not None:
        return flag_value
    if env_name and os.environ.get(env_name):
        return os.environ[env_name]
    if key in cfg:
        return cfg[key]
    return default


def build_train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    split_d = {**DEFAULT_SPLIT, **cfg.get("split", {})}
    split = SplitConfig(
        train_months=tuple(split_d["train_months"]),
        val_months=tuple(split_d["val_months"]),
        test_months=tuple(split_d["test_months"]),
        protocol=split_d.get("protocol", "id"),
        train_states=tuple(split_d["train_states"]) if split_d.get("train_states") else None,
        test_states=tuple(split_d["test_states"]) if split_d.get("test_states") else None,
    )
    model = ModelConfig(**cfg.get("model", {}))
    abl = dict(cfg.get("ablation", {}))
    if "feature_drop" in abl:
        abl["feature_drop"] = tuple(abl["feature_drop"])
    ablation = AblationFlags(**abl)
    scalar_keys = (
        "learning_rate", "beta1", "beta2", "adam_eps", "vq_weight",
        "batch_size", "max_epochs", "patience", "grad_clip", "seed",
    )
    scalars = {k: cfg[k] for k in scalar_keys if k in cfg}
    if seed is not None:
        scalars["seed"] = seed
    return TrainConfig(model=model, split=split, ablation=ablation, **scalars)


def _bundle_from(cfg: dict, data_dir: str | None):
    data_dir = _setting(data_dir, "OODSIM_DATA_DIR", cfg, "data_dir")
    if not data_dir:
        raise ConfigError("no data directory given (flag, OODSIM_DATA_DIR, or config)")
    split_d = {**DEFAULT_SPLIT, **cfg.get("split", {})}
    return load_bundle(data_dir, tuple(split_d["train_months"]))


def _checkpoint_path(args, cfg) -> str:
    path = _setting(getattr(args, "checkpoint", None), "OODSIM_CHECKPOINT", cfg, "checkpoint")
    if not path:
        raise ConfigError("no checkpoint given (flag, OODSIM_CHECKPOINT, or config)")
    return path


def _emit(args, payload: dict, human: str | None = None) -> None:
    if getattr(args, "json", False) or human is None:
        print(canonical_json(payload))
    else:
        print(human)


def cmd_ingest(args) -> int:
    cfg = _load_config_file(args.config)
    bundle = _bundle_from(cfg, args.data_dir)
    from .service import policies_payload, states_payload

    if args.state:
        payload = policies_payload(bundle, args.state)
        _emit(args, payload, f"{args.state}: {len(payload['policies'])} policies")
        return 0
    payload = states_payload(bundle)
    human = (
        f"{len(payload['states'])} states, months {payload['month_range'][0]}"
        f"..{payload['month_range'][1]}, {bundle.graph.num_edges} edges, "
        f"{len(bundle.corpus)} policies, {len(bundle.entities)} entities"
    )
    _emit(args, payload, human)
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_generate, write_world

    cfg = _load_config_file(args.config)
    synth_cfg = SynthConfig(**cfg.get("synth", {}))
    world = synth_generate(args.seed, synth_cfg)
    write_world(world, args.out)
    _emit(
        args,
        {
            "out": args.out,
            "states": world.panel.num_states,
            "months": world.panel.num_months,
            "policies": len(world.corpus),
        },
        f"wrote synthetic world to {args.out} "
        f"({world.panel.num_states} states x {world.panel.num_months} months, "
        f"{len(world.corpus)} policies)",
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    bundle = _bundle_from(cfg, args.data_dir)
    config = build_train_config(cfg, seed=args.seed)
    ckpt = train(bundle, config, log_path=args.log)
    ckpt_mod.save(ckpt, args.out)
    best = min(ckpt.history, key=lambda h: h["val_mae"])
    payload = {
        "checkpoint": args.out,
        "fingerprint": ckpt.fingerprint,
        "epochs": len(ckpt.history),
        "best_epoch": best["epoch"],
        "best_val_mae": best["val_mae"],
    }
    _emit(
        args, payload,
        f"saved {args.out} (best epoch {best['epoch']}, val MAE {best['val_mae']:.4f})",
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config_file(args.config)
    bundle = _bundle_from(cfg, args.data_dir)
    ckpt = ckpt_mod.load(_checkpoint_path(args, cfg))
    metrics = evaluate(ckpt, bundle, protocol=args.protocol)
    payload = metrics.to_dict()
    if args.baseline:
        payload["persistence_baseline"] = persistence_metrics(
            ckpt, bundle, protocol=args.protocol
        ).to_dict()
    _emit(
        args, payload,
        f"{args.protocol.upper()} MAE {metrics.mae:.4f} RMSE {metrics.rmse:.4f} "
        f"(h1-3 {metrics.mae_h13:.4f}/{metrics.rmse_h13:.4f}, "
        f"h4-6 {metrics.mae_h46:.4f}/{metrics.rmse_h46:.4f})",
    )
    return 0


def _simulator(args, cfg):
    from .simulate import Simulator

    bundle = _bundle_from(cfg, args.data_dir)
    ckpt = ckpt_mod.load(_checkpoint_path(args, cfg))
    return Simulator(ckpt, bundle), bundle


def _request_body(args) -> dict:
    with open(args.request, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_forecast(args) -> int:
    from .service import forecast_payload

    cfg = _load_config_file(args.config)
    sim, _ = _simulator(args, cfg)
    _emit(args, forecast_payload(sim, _request_body(args)))
    return 0


def cmd_counterfactual(args) -> int:
    from .service import counterfactual_payload

    cfg = _load_config_file(args.config)
    sim, _ = _simulator(args, cfg)
    _emit(args, counterfactual_payload(sim, _request_body(args)))
    return 0


def cmd_optimize(args) -> int:
    from .service import optimize_payload

    cfg = _load_config_file(args.config)
    sim, _ = _simulator(args, cfg)
    _emit(args, optimize_payload(sim, _request_body(args)))
    return 0


def cmd_codebook_export(args) -> int:
    from .service import codebook_payload

    cfg = _load_config_file(args.config)
    sim, _ = _simulator(args, cfg)
    _emit(args, codebook_payload(sim))
    return 0


def cmd_fingerprint(args) -> int:
    from .service import health_payload

    cfg = _load_config_file(args.config)
    sim, _ = _simulator(args, cfg)
    _emit(args, health_payload(sim))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    cfg = _load_config_file(args.config)
    bind = _setting(args.bind, "OODSIM_BIND", cfg, "bind", "127.0.0.1:8000")
    host, _, port = bind.rpartition(":")
    split_d = {**DEFAULT_SPLIT, **cfg.get("split", {})}
    data_dir = _setting(args.data_dir, "OODSIM_DATA_DIR", cfg, "data_dir")
    if not data_dir:
        raise ConfigError("no data directory given")
    serve(
        _checkpoint_path(args, cfg),
        data_dir,
        tuple(split_d["train_months"]),
        host=host or "127.0.0.1",
        port=int(port),
    )
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np
    import torch

    from .data import DataBundle, build_windows, normalize
    from .model import WorldModel
    from .synth import SynthConfig, synth_generate

    torch.set_num_threads(1)
    cfg = _load_config_file(args.config)
    world = synth_generate(
        args.seed,
        SynthConfig(num_states=4, num_months=24, grid_cols=2, policy_rate=0.15),
    )
    panel_norm, stats = normalize(world.panel, train_months=("2019-01", "2020-12"))
    bundle = DataBundle(
        panel=world.panel, panel_norm=panel_norm, stats=stats,
        graph=world.graph, corpus=world.corpus, entities=world.entities,
    )
    model_cfg = ModelConfig(
        hidden_dim=8, policy_dim=6, pe_dim=4, n_heads=2, ffw_mult=2,
        dropout=0.0, codebook_size=4, relation_cap=4, t_hist=3, t_fut=2,
        **cfg.get("model", {}),
    )
    torch.manual_seed(args.seed)
    model = WorldModel.build(model_cfg, AblationFlags(), bundle)
    windows = build_windows(
        panel_norm, model_cfg.t_hist, model_cfg.t_fut, ("2019-01", "2020-12"),
        graph=world.graph, corpus=world.corpus, k_hops=model_cfg.k_hops,
    )
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(windows), size=2, replace=False)
    result = grad_check(model, [windows[int(i)] for i in picks], h=args.step)
    payload = {
        "max_rel_error": result.max_rel_error,
        "per_group": result.per_group,
        "passed": result.max_rel_error < args.tolerance,
    }
    _emit(
        args, payload,
        f"max relative gradient error {result.max_rel_error:.3e} "
        f"({'OK' if payload['passed'] else 'FAIL'} at {args.tolerance:g})",
    )
    return 0 if payload["passed"] else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodsim",
        description="Policy-conditioned overdose forecasting, counterfactuals, and schedule search",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, request=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data-dir", help="directory with states.csv etc.")
        p.add_argument("--json", action="store_true", help="print canonical JSON")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file")
        if request:
            p.add_argument("--request", required=True, help="request body JSON file")

    p = sub.add_parser("ingest", help="load and validate a data directory")
    common(p)
    p.add_argument("--state", help="also list this state's policies")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic world")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="epoch log JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--protocol", choices=["id", "ood"], default="id")
    p.add_argument("--baseline", action="store_true", help="include the persistence baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast a scenario")
    common(p, checkpoint=True, request=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("counterfactual", help="evaluate a policy edit")
    common(p, checkpoint=True, request=True)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("optimize", help="search policy schedules")
    common(p, checkpoint=True, request=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("codebook", help="codebook utilities")
    csub = p.add_subparsers(dest="codebook_command", required=True)
    pe = csub.add_parser("export", help="dump codes and usage counts")
    common(pe, checkpoint=True)
    pe.set_defaults(func=cmd_codebook_export)

    p = sub.add_parser("fingerprint", help="print the model fingerprint")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("serve", help="run the HTTP service")
    common(p, checkpoint=True)
    p.add_argument("--bind", help="host:port (default 127.0.0.1:8000)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OodsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
