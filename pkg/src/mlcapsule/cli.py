"""Command-line front end.

stdout carries only results (JSON, CSV or markdown); diagnostics go to stderr
as ``error: <ErrorName>: <message>``. The exit status is the error's numeric
code (see ``mlcapsule.errors``), 2 for usage errors and 4 for file-system
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, crypto, errors, hw
from .errors import CapsuleError, ConfigError
from .guard import issue_ticket
from .nn import zoo
from .nn.model import ModelDef, import_weights, predict, save_model
from .nn.train import train_toy
from .protocol import algorithms, secrecy, wire
from .protocol.program import ProgramQ, encode_tensor
from .workspace import (
    ENV_WORKSPACE,
    POLICY_KEYS,
    Workspace,
    WorkspaceConfig,
    defense_config,
    parse_endpoint,
    read_policy,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 4
ENV_SEED = "MLCAPSULE_SEED"
SP_MODEL_FILES = ("model.json", "weights.mlcw")

log = logging.getLogger("mlcapsule")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _json(doc) -> None:
    _out(json.dumps(doc, sort_keys=True))


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get(ENV_SEED, "0"))


def _load_input(args, shape: tuple[int, ...] | None = None) -> np.ndarray:
    if args.values is not None:
        x = np.array([float(v) for v in args.values.split(",") if v.strip()], dtype=np.float32)
    elif args.input is not None:
        path = Path(args.input)
        if path.suffix == ".npy":
            x = np.load(path, allow_pickle=False)
        else:
            x = np.asarray(json.loads(path.read_text()), dtype=np.float32)
    else:
        raise UsageError("give the query with --input FILE or --values a,b,c")
    x = np.asarray(x, dtype=np.float32)
    if shape is not None and x.ndim == 1 and x.size == int(np.prod(shape)):
        x = x.reshape(shape)
    return x


def _posterior_json(p: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(p, dtype=np.float32)]


# -- service provider ---------------------------------------------------------------

def _sp_model(directory) -> tuple[ModelDef, object]:
    d = Path(directory)
    return import_weights(d / SP_MODEL_FILES[1], d / SP_MODEL_FILES[0])


def cmd_sp_train(args) -> int:
    seed = _seed(args)
    if args.data:
        with np.load(args.data, allow_pickle=False) as z:
            X, y = np.asarray(z["X"], np.float32), np.asarray(z["y"], np.int64)
    else:
        # Gaussian blobs, one per class
        rng = np.random.default_rng(seed)
        centers = rng.normal(scale=3.0, size=(args.classes, args.features))
        y = rng.integers(0, args.classes, size=args.samples)
        X = (centers[y] + rng.normal(size=(args.samples, args.features))).astype(np.float32)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    arch = zoo.mlp(X.shape[1], hidden, int(y.max()) + 1 if args.data else args.classes)
    secrets = train_toy(X, y, arch, epochs=args.epochs, lr=args.lr, rng_seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(arch, secrets, out / SP_MODEL_FILES[1], out / SP_MODEL_FILES[0])
    acc = float((predict(arch, secrets, X).argmax(axis=1) == y).mean())
    _json({"model_dir": str(out), "digest": arch.digest().hex(), "params": arch.param_count(),
           "train_accuracy": acc})
    return EXIT_OK


def cmd_sp_import(args) -> int:
    model_def, secrets = import_weights(args.weights, args.model_def)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model_def, secrets, out / SP_MODEL_FILES[1], out / SP_MODEL_FILES[0])
    _json({"model_dir": str(out), "digest": model_def.digest().hex(), "params": model_def.param_count()})
    return EXIT_OK


def _policy_from_args(args, base: dict | None = None) -> dict:
    policy = dict(base or {})
    if getattr(args, "policy", None):
        policy.update(read_policy(args.policy))
    for key in POLICY_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            policy[key] = str(Path(v).resolve()) if key == "detector" else v
    return policy


def cmd_sp_serve(args) -> int:
    model_def, secrets = _sp_model(args.model)
    tag = ProgramQ(defense_config(_policy_from_args(args))).tag
    cfg = wire.EndpointConfig(args.host, args.port, timeout=args.timeout)
    srv = wire.serve_provision(model_def, secrets, tag, cfg)
    host, port = srv.address
    _out(f"{host}:{port}")
    log.info("serving %s with program tag %s", model_def.digest().hex()[:16], tag.hex()[:16])
    try:
        while args.max_requests is None or srv.served < args.max_requests:
            time.sleep(0.02)
    except KeyboardInterrupt:
        pass
    finally:
        srv.shutdown()
        srv.server_close()
    return EXIT_OK


def _ticket_key(path: Path) -> tuple[bytes, bytes]:
    if path.exists():
        seed = path.read_bytes()
        if len(seed) != 32:
            raise ConfigError(f"{path} is not a 32-byte signing key")
    else:
        seed = os.urandom(32)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as f:
            f.write(seed)
    return crypto.sig_keygen(seed)


def cmd_sp_ticket_key(args) -> int:
    _, pk = _ticket_key(Path(args.key))
    _out(pk.hex())
    return EXIT_OK


def cmd_sp_issue_ticket(args) -> int:
    sk, _ = _ticket_key(Path(args.key))
    shape = tuple(ModelDef.from_json(Path(args.model_def).read_text()).input_shape) if args.model_def else None
    ticket = issue_ticket(sk, encode_tensor(_load_input(args, shape)))
    if args.out:
        Path(args.out).write_bytes(ticket.to_bytes())
    _out(ticket.to_bytes().hex())
    return EXIT_OK


# -- client -----------------------------------------------------------------------------

def _workspace(args) -> Workspace:
    return Workspace(args.workspace)


def cmd_client_obtain(args) -> int:
    ws = _workspace(args)
    cfg = ws.config() if ws.exists() else WorkspaceConfig()
    if ws.model_path.exists():
        raise ConfigError(f"workspace {ws.root} already holds a model")
    cfg.policy = ws.adopt_detector(_policy_from_args(args, cfg.policy))
    if args.endpoint:
        cfg.endpoint = args.endpoint
    if not cfg.endpoint:
        raise UsageError("no endpoint: pass --endpoint host:port")
    ws.save_config(cfg)
    req, session = algorithms.obtain(None, ws.defense(cfg), platform=ws.platform())
    hidden = wire.request_provision(parse_endpoint(cfg.endpoint), req, timeout=args.timeout)
    digest = algorithms.install(session, hidden)
    ws.model_path.write_text(hidden.model_def.to_json(indent=2))
    _json({"workspace": str(ws.root), "model_digest": digest.hex(), "program_tag": session.program.tag.hex()})
    return EXIT_OK


def _client_session(ws: Workspace):
    return algorithms.open_session(ws.defense(), platform=ws.platform())


def cmd_client_classify(args) -> int:
    ws = _workspace(args)
    session = _client_session(ws)
    model_def = ModelDef.from_json(ws.model_path.read_text())
    x = _load_input(args, model_def.input_shape)
    ticket = b""
    if args.ticket:
        raw = Path(args.ticket).read_bytes()
        ticket = bytes.fromhex(raw.decode()) if raw[:4] != b"MLCT" else raw
    if args.request_id:
        rid = bytes.fromhex(args.request_id)
        p = algorithms.classify_sealed(session, x, request_id=rid, ticket=ticket)
    else:
        rid = ws.pending_request(crypto.digest(encode_tensor(x)))
        p = algorithms.classify_sealed(session, x, request_id=rid, ticket=ticket)
        ws.clear_pending()
    _json({"posterior": _posterior_json(p), "label": int(np.argmax(p))})
    return EXIT_OK


def cmd_client_status(args) -> int:
    ws = _workspace(args)
    doc = algorithms.status(_client_session(ws))
    doc["workspace"] = str(ws.root)
    _json(doc)
    return EXIT_OK


# -- bench / eval / game --------------------------------------------------------------

def _emit_report(args, rep) -> None:
    text = rep.to_csv() if args.format == "csv" else rep.to_markdown()
    if args.out:
        Path(args.out).write_text(text)
    _out(text)


def cmd_bench_layer(args) -> int:
    rows = []
    if args.table in ("dense", "all"):
        sizes = tuple(int(s) for s in args.sizes.split(","))
        rows += bench.dense_table(sizes, args.reps, args.warmup, unchunked_row=not args.no_unchunked)
    if args.table in ("conv", "all"):
        rows += bench.conv_table(channel_div=args.channel_div, spatial_div=args.spatial_div,
                                 reps=args.reps, warmup=args.warmup)
    _emit_report(args, bench.report(rows, args.reps, args.warmup))
    return EXIT_OK


def cmd_bench_network(args) -> int:
    if args.model:
        cases = []
        for spec in args.model:
            d = Path(spec)
            md, s = import_weights(d / SP_MODEL_FILES[1], d / SP_MODEL_FILES[0])
            cases.append(bench.NetworkCase(d.name, md, s))
    else:
        cases = bench.builtin_networks(args.scale, seed=_seed(args))
    rows = bench.bench_network(cases, args.reps, args.warmup, seed=_seed(args))
    _emit_report(args, bench.report(rows, args.reps, args.warmup))
    return EXIT_OK


def cmd_bench_kernels(args) -> int:
    rows = bench.bench_backends(args.reps, args.warmup, seed=_seed(args))
    _out(bench.backends_csv(rows) if args.format == "csv" else bench.backends_markdown(rows))
    return EXIT_OK


def cmd_eval_membership(args) -> int:
    from .defense import experiments, membership

    res = experiments.membership_eval(args.c_grid, seed=_seed(args), epochs=args.epochs)
    _out(membership.rows_to_csv(res.rows))
    log.info("train accuracy %.3f, test accuracy %.3f", res.train_acc, res.test_acc)
    return EXIT_OK


def cmd_eval_stealing(args) -> int:
    from .defense import experiments, stealing

    res = experiments.stealing_eval(seed=_seed(args), queries=args.queries, dim=args.dim, tau=args.tau,
                                    rho=args.rho, window=args.window)
    if args.csv:
        Path(args.csv).mkdir(parents=True, exist_ok=True)
        Path(args.csv, "benign.csv").write_text(stealing.rows_to_csv(res.benign_rows))
        Path(args.csv, "attack.csv").write_text(stealing.rows_to_csv(res.attack_rows))
    _json({"benign_queries": len(res.benign_rows), "benign_alarms": res.benign_alarms,
           "attack_queries": len(res.attack_rows), "first_attack_alarm": res.first_attack_alarm,
           "window": res.window})
    return EXIT_OK


def cmd_eval_redetect(args) -> int:
    from .defense import experiments
    from .workspace import DETECTOR_FILES

    det, rep = experiments.redetect_eval(seed=_seed(args), n_train=args.n_train, n_test=args.n_test,
                                         epochs=args.epochs)
    if args.save:
        d = Path(args.save)
        d.mkdir(parents=True, exist_ok=True)
        det.save(d / DETECTOR_FILES[1], d / DETECTOR_FILES[0])
    _json({"accuracy": rep.accuracy, "false_denials_train": rep.false_denials_train,
           "benign_train": rep.benign_train, "overhead_ms": rep.overhead_ms,
           "sgx_overhead_ms": bench.SGX_DETECTOR_MS})
    return EXIT_OK


def cmd_game_secrecy(args) -> int:
    rng = np.random.default_rng(_seed(args))
    model = zoo.mlp(args.inputs, (args.hidden,), args.classes)
    from .nn.model import ModelSecrets

    secrets_ = ModelSecrets.random(model, rng)
    names = sorted(secrecy.DISTINGUISHERS) if args.distinguisher == "all" else [args.distinguisher]
    lines = ["distinguisher,trials,p1_given_b1,p1_given_b0,advantage"]
    for name in names:
        if name not in secrecy.DISTINGUISHERS:
            raise UsageError(f"unknown distinguisher {name!r}; choose from {sorted(secrecy.DISTINGUISHERS)}")
        adv = secrecy.DISTINGUISHERS[name](np.random.default_rng(rng.integers(2**63)))
        r = secrecy.estimate_advantage(name, adv, model, secrets_, args.trials, args.query_budget)
        lines.append(f"{name},{r.trials},{r.p1_given_b1:.6f},{r.p1_given_b0:.6f},{r.advantage:.6f}")
    _out("\n".join(lines))
    return EXIT_OK


def cmd_game_forge(args) -> int:
    import random

    rng = random.Random(_seed(args))
    out = {}
    for name, adversary, n in (("random", hw.RandomForger(rng), args.attempts),
                               ("mauled", hw.MauledForger(rng), args.mauled),
                               ("replay", hw.ReplayAdversary(), args.replays)):
        r = hw.unforgeability_game(n, adversary)
        out[name] = {"attempts": r.attempts, "accepted": r.accepted, "replays": r.replays,
                     "honest_failures": r.honest_failures}
    _json(out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_policy_flags(p) -> None:
    p.add_argument("--policy", help="JSON policy document; flags below override it")
    p.add_argument("--threshold", type=int, help="query quota")
    p.add_argument("--noise-c", dest="noise_c", type=float, help="membership noise level c in [0, 1]")
    p.add_argument("--tau", type=float, help="stealing archive distance threshold")
    p.add_argument("--rho", type=float, help="stealing alarm growth rate")
    p.add_argument("--window", type=int, help="stealing alarm window")
    p.add_argument("--detector", help="directory with detector.json and detector.mlcw")
    p.add_argument("--ticket-pk", dest="ticket_pk", help="hex SP ticket key; enables ticket mode")


def _add_input_flags(p) -> None:
    p.add_argument("--input", help=".npy or JSON array file")
    p.add_argument("--values", help="comma-separated input values")


def _add_bench_flags(p) -> None:
    p.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    p.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", help="also write the report here")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="mlcapsule", description="Guarded offline model serving")
    root.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    groups = root.add_subparsers(dest="group", required=True, parser_class=_Parser)

    sp = groups.add_parser("sp", help="service-provider commands").add_subparsers(dest="cmd", required=True)
    p = sp.add_parser("train", help="train a dense model")
    p.add_argument("--out", required=True, help="model directory to write")
    p.add_argument("--data", help=".npz file with arrays X and y; synthetic blobs otherwise")
    p.add_argument("--hidden", default="64", help="comma-separated hidden widths")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--features", type=int, default=20)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sp_train)
    p = sp.add_parser("import-weights", help="import externally trained weights")
    p.add_argument("--def", dest="model_def", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sp_import)
    p = sp.add_parser("serve", help="run the provisioning endpoint")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--max-requests", type=int, help="exit after this many successful provisions")
    _add_policy_flags(p)
    p.set_defaults(fn=cmd_sp_serve)
    p = sp.add_parser("ticket-key", help="create or show the ticket signing key")
    p.add_argument("--key", required=True)
    p.set_defaults(fn=cmd_sp_ticket_key)
    p = sp.add_parser("issue-ticket", help="sign one query")
    p.add_argument("--key", required=True)
    p.add_argument("--def", dest="model_def", help="model definition, to shape flat inputs")
    p.add_argument("--out", help="write the binary ticket here")
    _add_input_flags(p)
    p.set_defaults(fn=cmd_sp_issue_ticket)

    cl = groups.add_parser("client", help="client commands").add_subparsers(dest="cmd", required=True)
    for name, fn, helptext in (("obtain", cmd_client_obtain, "provision and install a model"),
                               ("classify", cmd_client_classify, "classify offline"),
                               ("status", cmd_client_status, "show guard counters")):
        p = cl.add_parser(name, help=helptext)
        p.add_argument("--workspace", help=f"workspace directory (default ${ENV_WORKSPACE})")
        p.set_defaults(fn=fn)
        if name == "obtain":
            p.add_argument("--endpoint", help="provider host:port")
            p.add_argument("--timeout", type=float, default=10.0)
            _add_policy_flags(p)
        elif name == "classify":
            _add_input_flags(p)
            p.add_argument("--ticket", help="ticket file (binary or hex) for ticket mode")
            p.add_argument("--request-id", help="hex request id; reuse to retry without charge")

    bn = groups.add_parser("bench", help="timing reports").add_subparsers(dest="cmd", required=True)
    p = bn.add_parser("layer", help="single-layer capsule vs plain")
    p.add_argument("--table", choices=("dense", "conv", "all"), default="all")
    p.add_argument("--sizes", default="256,512,1024,2048,4096")
    p.add_argument("--no-unchunked", action="store_true", help="skip the single-chunk budget row")
    p.add_argument("--channel-div", type=int, default=1)
    p.add_argument("--spatial-div", type=int, default=1)
    _add_bench_flags(p)
    p.set_defaults(fn=cmd_bench_layer)
    p = bn.add_parser("network", help="whole-network capsule vs plain")
    p.add_argument("--model", action="append", help="model directory (repeatable); built-ins otherwise")
    p.add_argument("--scale", choices=("small", "full"), default="small")
    p.add_argument("--seed", type=int)
    _add_bench_flags(p)
    p.set_defaults(fn=cmd_bench_network)
    p = bn.add_parser("kernels", help="compiled core vs numpy fallback")
    p.add_argument("--seed", type=int)
    _add_bench_flags(p)
    p.set_defaults(fn=cmd_bench_kernels)

    ev = groups.add_parser("eval", help="defense experiments").add_subparsers(dest="cmd", required=True)
    p = ev.add_parser("membership", help="noise-level sweep against the entropy attack")
    p.add_argument("--c-grid", default="0:0.5:0.05")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval_membership)
    p = ev.add_parser("stealing", help="benign and probing query streams")
    p.add_argument("--queries", type=int, default=5000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--csv", help="directory for per-query CSV traces")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval_stealing)
    p = ev.add_parser("re-detect", help="train and score the crafted-input detector")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--save", help="write the detector to this directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval_redetect)

    gm = groups.add_parser("game", help="security experiments").add_subparsers(dest="cmd", required=True)
    p = gm.add_parser("secrecy", help="distinguisher advantage in the secrecy experiment")
    p.add_argument("--distinguisher", default="all")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--query-budget", type=int, default=100)
    p.add_argument("--inputs", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_game_secrecy)
    p = gm.add_parser("forge", help="quote forgery attempts")
    p.add_argument("--attempts", type=int, default=100_000)
    p.add_argument("--mauled", type=int, default=1000)
    p.add_argument("--replays", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_game_forge)
    return root


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(name)s: %(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapsuleError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return EXIT_IO


def exit_codes() -> dict[str, int]:
    """Every documented exit status by name."""
    table = {"OK": EXIT_OK, "UsageError": EXIT_USAGE, "OSError": EXIT_IO}
    table.update({cls.__name__: cls.code for cls in errors.all_errors()})
    return table


if __name__ == "__main__":
    sys.exit(main())
