"""JSON-over-HTTP service exposing a trained simulator.

Every non-2xx body is a serialized error object {code, message, detail}. The
model snapshot is immutable for the process lifetime; request handling is
concurrent and stateless.
"""

from __future__ import annotations

import math

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import Response
from starlette.exceptions import HTTPException as StarletteHTTPException

from .checkpoint import canonical_json
from .data import DataBundle
from .errors import (
    BudgetZero,
    EmptyPool,
    InvalidEdit,
    MissingMonth,
    OodsimError,
    SchemaError,
    SpaceTooLarge,
    UnknownPolicy,
    UnknownState,
    WindowOutOfRange,
)
from .simulate import (
    PolicyEdit,
    Scenario,
    Simulator,
    build_actions,
    mcts_optimize,
)

MAX_BUDGET = 100_000
MAX_SCHEDULE_SPACE = 1_000_000

_NOT_FOUND = (UnknownState, UnknownPolicy)
_BAD_REQUEST = (
    InvalidEdit,
    WindowOutOfRange,
    EmptyPool,
    BudgetZero,
    SpaceTooLarge,
    SchemaError,
    MissingMonth,
)


def _json_response(payload: dict, status_code: int = 200) -> Response:
    return Response(
        content=canonical_json(payload),
        status_code=status_code,
        media_type="application/json",
    )


def _error(code: str, message: str, status: int, detail: dict | None = None) -> Response:
    return _json_response(
        {"code": code, "message": message, "detail": detail or {}}, status
    )


# Shared payload builders (the CLI uses the same functions for parity).


def states_payload(bundle: DataBundle) -> dict:
    return {
        "states": list(bundle.panel.states),
        "month_range": [bundle.panel.months[0], bundle.panel.months[-1]],
    }


def policies_payload(bundle: DataBundle, state: str) -> dict:
    if state not in bundle.panel.states:
        raise UnknownState(f"unknown state {state!r}")
    records = []
    for rec in bundle.corpus:
        if rec.state != state:
            continue
        item = {
            "policy_id": rec.policy_id,
            "state": rec.state,
            "enacted_month": rec.enacted_month,
            "triplets": [
                {"subject": s, "relation": r, "object": o} for s, r, o in rec.triplets
            ],
        }
        if rec.repealed_month:
            item["repealed_month"] = rec.repealed_month
        if rec.policy_codes is not None:
            item["policy_codes"] = rec.policy_codes
        records.append(item)
    return {"state": state, "policies": records}


def health_payload(simulator: Simulator) -> dict:
    return {"status": "ok", "model_fingerprint": simulator.ckpt.fingerprint}


def forecast_payload(simulator: Simulator, body: dict) -> dict:
    scenario = Scenario.from_dict(body)
    return simulator.forecast(scenario).to_dict()


def counterfactual_payload(simulator: Simulator, body: dict) -> dict:
    scenario = Scenario.from_dict(body)
    if "edit" not in body:
        raise InvalidEdit("counterfactual request needs an 'edit' object")
    edit = PolicyEdit.from_dict(body["edit"])
    factual, cf, delta = simulator.counterfactual(scenario, edit)
    return {
        "factual": factual.to_dict(),
        "counterfactual": cf.to_dict(),
        "delta": delta,
    }


def optimize_payload(simulator: Simulator, body: dict) -> dict:
    scenario = Scenario.from_dict(body)
    pool = tuple(body.get("pool") or scenario.pool)
    depth = int(body.get("depth", 1))
    budget = int(body.get("budget", 1000))
    seed = int(body.get("seed", 0))
    subset_max = int(body.get("subset_max", 1))
    c_uct = float(body.get("c_uct", math.sqrt(2.0)))
    if budget > MAX_BUDGET:
        raise BudgetZero(f"budget {budget} exceeds the service cap {MAX_BUDGET}")
    n_actions = len(build_actions(pool, subset_max))
    if n_actions**depth > MAX_SCHEDULE_SPACE:
        raise SpaceTooLarge(
            f"{n_actions}^{depth} schedules exceed the service cap {MAX_SCHEDULE_SPACE}"
        )
    result = mcts_optimize(
        simulator, scenario, pool, depth, budget,
        c_uct=c_uct, seed=seed, subset_max=subset_max,
    )
    return result.to_dict()


def codebook_payload(simulator: Simulator) -> dict:
    cb = simulator.model.codebook
    if cb is None:
        return {"codes": [], "usage": [], "size": 0}
    return {
        "codes": [[float(x) for x in row] for row in cb.codes.tolist()],
        "usage": [float(x) for x in cb.ema_counts.tolist()],
        "size": cb.num_codes,
    }


def create_app(simulator: Simulator, bundle: DataBundle) -> FastAPI:
    app = FastAPI(title="oodsim", docs_url=None, redoc_url=None)

    @app.exception_handler(OodsimError)
    def _domain_error(_req: Request, exc: OodsimError):
        if isinstance(exc, _NOT_FOUND):
            return _error("NOT_FOUND", str(exc), 404)
        if isinstance(exc, _BAD_REQUEST):
            return _error("BAD_REQUEST", str(exc), 400)
        return _error("INTERNAL", str(exc), 500)

    @app.exception_handler(RequestValidationError)
    def _validation_error(_req: Request, exc: RequestValidationError):
        return _error("BAD_REQUEST", "malformed request", 400, {"errors": str(exc)})

    @app.exception_handler(StarletteHTTPException)
    def _http_error(_req: Request, exc: StarletteHTTPException):
        if exc.status_code in (404, 405):
            return _error("NOT_FOUND", str(exc.detail), exc.status_code)
        if exc.status_code < 500:
            return _error("BAD_REQUEST", str(exc.detail), exc.status_code)
        return _error("INTERNAL", str(exc.detail), exc.status_code)

    @app.exception_handler(Exception)
    def _internal_error(_req: Request, exc: Exception):
        return _error("INTERNAL", f"{type(exc).__name__}: {exc}", 500)

    # Endpoints are plain functions so FastAPI dispatches them to its thread
    # pool; the model snapshot is read-only and safe to share.

    @app.get("/v1/health")
    def health():
        return _json_response(health_payload(simulator))

    @app.get("/v1/states")
    def states():
        return _json_response(states_payload(bundle))

    @app.get("/v1/policies")
    def policies(state: str):
        return _json_response(policies_payload(bundle, state))

    @app.post("/v1/forecast")
    def forecast(body: dict):
        return _json_response(forecast_payload(simulator, body))

    @app.post("/v1/counterfactual")
    def counterfactual(body: dict):
        return _json_response(counterfactual_payload(simulator, body))

    @app.post("/v1/optimize")
    def optimize(body: dict):
        return _json_response(optimize_payload(simulator, body))

    @app.get("/v1/codebook")
    def codebook():
        return _json_response(codebook_payload(simulator))

    return app


def serve(checkpoint_path: str, data_dir: str, train_months: tuple[str, str],
          host: str = "127.0.0.1", port: int = 8000) -> None:
    """Load everything, then bind; a broken checkpoint never reaches the socket."""
    import uvicorn

    from . import checkpoint as ckpt_mod
    from .data import load_bundle

    ckpt = ckpt_mod.load(checkpoint_path)
    bundle = load_bundle(data_dir, train_months)
    simulator = Simulator(ckpt, bundle)
    app = create_app(simulator, bundle)
    uvicorn.run(app, host=host, port=port, log_level="warning")
