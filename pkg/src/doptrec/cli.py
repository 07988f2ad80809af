"""Command line entry point: ``doptrec solve-design | simulate | serve``.

Config files are JSON documents validated against the schemas below; unknown
keys are rejected.  Exit codes: 0 success, 1 runtime failure (solver, run or
service error), 2 bad input (usage, unreadable or invalid config/data).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .data import FeatureMapConfig
from .design import ContextBundle, SolverConfig, solve_d_optimal
from .errors import DoptrecError
from .recommenders import RECOMMENDER_NAMES

log = logging.getLogger("doptrec")

LISTEN_ENV = "DOPTREC_LISTEN"
DEFAULT_LISTEN = "127.0.0.1:8080"
POLICY_NAMES = ["uniform", "eps_greedy", "ucb", "beta_ts", "linucb", "lin_ts", "stagewise_freq", "stagewise_bayes",
                "epoch_greedy"]

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}

POLICY_SCHEMA = {
    "type": "object",
    "properties": {"policy": {"enum": POLICY_NAMES}, "params": {"type": "object"}, "label": {"type": "string"}},
    "required": ["policy"],
    "additionalProperties": False,
}

SOLVER_SCHEMA = {
    "type": "object",
    "properties": {"epsilon": {"type": "number", "exclusiveMinimum": 0}, "max_iter": _pos_int,
                   "ridge": {"type": "number", "minimum": 0}, "away_steps": {"type": "boolean"}},
    "additionalProperties": False,
}

SIMULATE_SCHEMA = {
    "type": "object",
    "properties": {
        "epochs": _pos_int,
        "runs": _pos_int,
        "seed": _int,
        "initial_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "policies": {"oneOf": [{"const": "all"}, {"type": "array", "items": POLICY_SCHEMA, "minItems": 1}]},
        "recommenders": {"type": "array", "items": {"enum": list(RECOMMENDER_NAMES)}, "minItems": 1,
                         "uniqueItems": True},
        "features": {"type": "object", "additionalProperties": False, "properties": {
            "user_fields": {"type": "array", "items": {"enum": ["gender", "age", "occupation"]}},
            "include_genres": {"type": "boolean"}, "title_dims": _pos_int,
            "include_user_context": {"type": "boolean"}}},
        "n_users": {"oneOf": [_pos_int, {"type": "null"}]},
        "world": {"enum": ["movielens", "synthetic_movielens", "linear"]},
        "data_path": {"type": "string"},
        "synthetic": {"type": "object", "additionalProperties": False, "properties": {
            "n_users": _pos_int, "n_movies": _pos_int, "ratings_per_user": _pos_int}},
        "linear": {"type": "object", "additionalProperties": False, "properties": {
            "d": _pos_int, "k": _pos_int, "d_user": {"type": "integer", "minimum": 0}, "sigma": _num,
            "n_spread": _pos_int, "cluster_noise": _num, "context_effect": _num}},
        "rounds_per_epoch": _pos_int,
        "mf_params": {"type": "object", "additionalProperties": False, "properties": {
            "rank": _pos_int, "reg": _num, "n_iters": _pos_int, "init_scale": _num}},
        "n_jobs": _pos_int,
        "ablation": {"type": "boolean"},
        "ablation_policy": POLICY_SCHEMA,
    },
    "additionalProperties": False,
}

SERVE_SCHEMA = {
    "type": "object",
    "properties": {
        "k": _pos_int, "d": _pos_int, "mode": {"enum": ["frequentist", "bayesian"]},
        "n_explore": _pos_int, "n_exploit": {"type": "integer", "minimum": 0},
        "ttl_seconds": {"type": "number", "exclusiveMinimum": 0}, "window": _pos_int,
        "ridge_fit": _num, "prior_var": _num, "noise_var": _num, "solver_ridge": _num, "solver_epsilon": _num,
        "lambda_prior": {"oneOf": [_num, {"type": "null"}]}, "n_mc": _pos_int, "seed": _int,
        "log_path": {"type": "string"}, "snapshot_path": {"type": "string"},
        "sweep_interval": {"type": "number", "exclusiveMinimum": 0}, "listen": {"type": "string"},
    },
    "required": ["k", "d"],
    "additionalProperties": False,
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def load_json(path: str | os.PathLike, what: str) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno} (char {exc.pos}): {exc.msg}") \
            from None


def validate(doc: Any, schema: dict, what: str) -> dict:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"invalid {what} at {where}: {exc.message}") from None
    return doc


def emit(doc: Any, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# solve-design


def cmd_solve_design(args) -> int:
    doc = load_json(args.input, "bundle")
    conf = validate(load_json(args.config, "config") if args.config else {}, SOLVER_SCHEMA, "solver config")
    if args.ridge is not None:
        conf["ridge"] = args.ridge
    bundle = ContextBundle.from_json(doc)
    result = solve_d_optimal(bundle, SolverConfig(**conf))
    emit(result.to_json(), args.out)
    if not result.converged:
        print(f"NotConverged: certificate gap {result.certificate_gap:.3g} after {result.iterations} iterations",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# simulate


def build_sim_config(doc: dict, args):
    from .replay import BASELINE_MENU, SimConfig

    doc = dict(doc)
    run_ablation = doc.pop("ablation", False) or args.ablation
    ablation_policy = doc.pop("ablation_policy", None)
    configured = doc.pop("policies", "all")
    policies = args.policies if args.policies is not None else configured
    if policies == "all":
        doc["policies"] = BASELINE_MENU
    elif isinstance(policies, str):
        names = [p.strip() for p in policies.split(",") if p.strip()]
        bad = [n for n in names if n not in POLICY_NAMES]
        if bad:
            raise CliError(f"unknown policies {bad}; choose from {POLICY_NAMES} or 'all'")
        doc["policies"] = tuple({"policy": n} for n in names)
    else:
        doc["policies"] = tuple(policies)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.synthetic and doc.get("world", "movielens") == "movielens":
        doc["world"] = "synthetic_movielens"
    if "features" in doc:
        doc["features"] = FeatureMapConfig(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in doc["features"].items()})
    if "recommenders" in doc:
        doc["recommenders"] = tuple(doc["recommenders"])
    return SimConfig(**doc), run_ablation, ablation_policy


def cmd_simulate(args) -> int:
    from .replay import ablation_suite, load_world_data, run_simulation, write_ablation, write_outputs

    doc = validate(load_json(args.config, "config") if args.config else {}, SIMULATE_SCHEMA, "simulate config")
    config, run_ablation, ablation_policy = build_sim_config(doc, args)
    if config.world == "movielens":
        if not config.data_path:
            raise CliError("no dataset: set data_path in the config or pass --synthetic")
        if not Path(config.data_path).is_dir():
            raise CliError(f"dataset directory {config.data_path} not found")
    out = Path(args.out)
    try:
        data = load_world_data(config)
    except FileNotFoundError as exc:
        raise CliError(f"dataset missing: {exc}") from None
    result = run_simulation(config, data)
    paths = write_outputs(result, out)
    if run_ablation:
        paths += write_ablation(ablation_suite(config, data, ablation_policy), out)
    effective = {**doc, "seed": config.seed, "world": config.world, "policies": list(config.policies),
                 "ablation": run_ablation}
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
    for p in paths:
        log.info("wrote %s", p)
    summary = result.summary()
    for label, s in summary["policies"].items():
        print(f"{label}: final {s['final_mean']:.4f} +/- {s['final_std']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# serve


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise CliError(f"listen address must be host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import BanditService, ServiceConfig, create_app

    if not args.config:
        raise CliError("serve needs --config")
    doc = validate(load_json(args.config, "config"), SERVE_SCHEMA, "service config")
    listen = args.listen or os.environ.get(LISTEN_ENV) or doc.get("listen") or DEFAULT_LISTEN
    host, port = parse_listen(listen)
    conf = {k: v for k, v in doc.items() if k != "listen"}
    if args.seed is not None:
        conf["seed"] = args.seed
    sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise CliError(f"cannot bind {host}:{port}: {exc.strerror}", code=1) from None
    service = BanditService(ServiceConfig(**conf))
    server = uvicorn.Server(uvicorn.Config(create_app(service, sweep=True), log_level="info"))
    signal.signal(signal.SIGTERM, lambda *_: setattr(server, "should_exit", True))
    print(f"serving on {host}:{sock.getsockname()[1]}", flush=True)
    try:
        server.run(sockets=[sock])
    finally:
        service.close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doptrec", description="D-optimal design bandits for recommender selection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-design", help="solve the D-optimal design for a bundle JSON file")
    p.add_argument("input", help='bundle JSON: {"arms": [[...], ...]}')
    p.add_argument("--config", help="solver config JSON")
    p.add_argument("--ridge", type=float, help="ridge added to the information matrix (default 1e-8; 0 disables)")
    p.add_argument("--out", help="write the result here instead of stdout")
    p.add_argument("--seed", type=int, help="accepted for uniformity; the solver is deterministic")
    p.set_defaults(func=cmd_solve_design)

    p = sub.add_parser("simulate", help="run replay simulations and write CSV/JSON outputs")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, help="base seed; runs use seed, seed+1, ...")
    p.add_argument("--policies", help="'all' or a comma-separated list of policy names")
    p.add_argument("--ablation", action="store_true", help="also run the context x design ablation matrix")
    p.add_argument("--synthetic", action="store_true", help="use generated MovieLens-format data")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the HTTP bandit service")
    p.add_argument("--config", help="service config JSON")
    p.add_argument("--listen", help=f"host:port (default ${LISTEN_ENV} or {DEFAULT_LISTEN})")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DoptrecError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        # bad input (contract, parse) is 2; solver and run failures are 1
        return 2 if isinstance(exc, ValueError) else 1


if __name__ == "__main__":
    sys.exit(main())
