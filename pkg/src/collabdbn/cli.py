"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 protocol/transport
error, 5 numeric failure. Set ``COLLABDBN_LOG`` (e.g. ``INFO``, ``DEBUG``) for
log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, collab, dbn
from .dataset import (
    DEFAULT_CLASSES,
    ScalerParams,
    SynthConfig,
    concat,
    fit_scaler,
    generate_synthetic,
    iter_records,
    load_csv,
    node_files,
    pca_project,
    split,
    write_csv,
    write_pca_csv,
)
from .errors import ConfigError, DataError, NumericError, ProtocolError
from .metrics import compute_metrics, confusion, report
from .modelfile import load_model, save_model
from .transport import SessionConfig, SocketEndpoint, parse_address

log = logging.getLogger("collabdbn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(ConfigError):
    pass


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(vals)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _parse_peers(text):
    peers = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        node, sep, addr = item.partition("=")
        if not sep or not node.isdigit():
            raise UsageError(f"bad peer {item!r}; expected NODE=HOST:PORT")
        try:
            peers[int(node)] = parse_address(addr)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return peers


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


class Manifest:
    """Records what a command did so it can be replayed."""

    def __init__(self, command, argv, args):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": {k: _jsonable(v) for k, v in vars(args).items() if k != "func"},
            "seeds": {k: v for k, v in vars(args).items() if "seed" in k},
            "inputs": [],
            "outputs": [],
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "timings": {"started": time.time()},
        }
        self._t0 = time.perf_counter()

    def input(self, path):
        self.data["inputs"].append(str(path))

    def output(self, path):
        self.data["outputs"].append(str(path))

    def write(self, path):
        self.data["timings"]["elapsed_s"] = time.perf_counter() - self._t0
        _dump_json(self.data, path)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _resolve_scaler(args, model_path):
    if getattr(args, "no_scaler", False):
        return None
    path = args.scaler
    if path is None:
        candidate = Path(model_path).with_name("scaler.json")
        if candidate.is_file():
            path = candidate
    if path is None:
        return None
    try:
        return ScalerParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: cannot read scaler ({exc})") from None


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------


def cmd_gen(args, argv):
    if args.per_node:
        rows = tuple(_int_list(r) for r in args.per_node.split(";"))
        per_class = rows
        if args.nodes is not None and args.nodes != len(rows):
            raise UsageError("--nodes disagrees with --per-node")
        nodes = len(rows)
    else:
        per_class = args.per_class
        nodes = 3 if args.nodes is None else args.nodes
    if nodes < 1:
        raise UsageError("--nodes must be >= 1")
    cfg = SynthConfig(nodes=nodes, per_class=per_class, feature_dim=args.features,
                      overlap=args.overlap, node_shift=args.node_shift, seed=args.seed)
    datasets = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("gen", argv, args)
    for l, ds in enumerate(datasets, start=1):
        p = out / f"node{l}.csv"
        write_csv(ds, p)
        man.output(p)
        log.info("wrote %s (%d rows)", p, len(ds))
    man.write(out / "manifest.json")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _train_config(args):
    train = dbn.TrainConfig(hidden=args.arch, learning_rate=args.lr, cd_steps=args.cd_k,
                            batch_size=args.batch, iterations=args.epochs, seed=args.seed)
    return collab.CollabConfig(train, transport=args.transport, eval_every=args.eval_every,
                               timeout=args.timeout)


def cmd_train(args, argv):
    if args.scheme != "pclm" and (args.peers or args.transport == "socket"):
        raise UsageError(f"--scheme {args.scheme} trains without communication; drop --peers/--transport socket")
    multiprocess = args.node_id is not None
    if multiprocess and (args.transport != "socket" or args.peers is None or args.listen is None):
        raise UsageError("--node-id requires --transport socket, --listen and --peers")
    if args.peers is not None and not multiprocess:
        raise UsageError("--peers requires --node-id")
    config = _train_config(args)
    man = Manifest("train", argv, args)

    files = node_files(args.data)
    if multiprocess:
        by_id = {int(p.stem[4:]): p for p in files}
        if args.node_id not in by_id:
            raise DataError(f"{args.data}: no node{args.node_id}.csv")
        ids = [args.node_id]
        files = [by_id[args.node_id]]
    else:
        if args.nodes is not None:
            if args.nodes > len(files):
                raise DataError(f"{args.data}: {len(files)} node files, --nodes {args.nodes}")
            files = files[:args.nodes]
        ids = list(range(1, len(files) + 1))
    raw = [load_csv(p, n_classes=args.classes) for p in files]
    for p in files:
        man.input(p)
    dims = {d.feature_dim for d in raw}
    if len(dims) != 1:
        raise DataError(f"node files disagree on feature dimension: {sorted(dims)}")

    parts = [split(d, args.test_fraction, seed=[args.seed, l]) for l, d in zip(ids, raw)]
    train_raw = [p[0] for p in parts]
    test_raw = [p[1] for p in parts]
    if args.scaler:
        scaler = _resolve_scaler(args, Path(args.scaler))
        man.input(args.scaler)
    else:
        scaler = fit_scaler(concat(train_raw))
    train_sets = [scaler.transform(t) for t in train_raw]
    test_sets = [scaler.transform(t) for t in test_raw]
    global_test = concat(test_sets, provenance="global test")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if multiprocess:
        result = _train_socket_node(args, config, train_sets[0], global_test)
    else:
        result = collab.train(args.scheme, train_sets, config, global_test)
    _write_train_outputs(args, out, man, result, ids, raw, test_raw, test_sets, global_test, scaler)
    man.write(out / "manifest.json")
    return EXIT_OK


def _train_socket_node(args, config, train_set, eval_set):
    arch = config.train.arch(train_set.feature_dim, train_set.n_classes)
    node = collab.NodeState(args.node_id, dbn.init_model(arch, config.train.seed),
                            train_set.canonical(), args.node_id)
    peers = _parse_peers(args.peers)
    n_nodes = len(peers) + 1
    if set(peers) | {args.node_id} != set(range(1, n_nodes + 1)):
        raise UsageError(f"node ids must be 1..{n_nodes}; got {sorted(set(peers) | {args.node_id})}")
    session = SessionConfig(n_nodes, args.node_id, dbn.param_count(arch), config.timeout, peers)
    with SocketEndpoint(session, parse_address(args.listen)) as ep:
        ep.connect(args.connect_timeout)
        return collab.run_node(node, ep, config, eval_set)


def _write_train_outputs(args, out, man, result, ids, raw, test_raw, test_sets, global_test, scaler):
    scaler_path = out / "scaler.json"
    _dump_json(scaler.to_dict(), scaler_path)
    man.output(scaler_path)

    reports = []
    if result.scheme == "clm":
        model = result.models[1]
        path = out / "model_central.bndm"
        save_model(model, path)
        man.output(path)
        models = {l: model for l in ids}
        global_entries = [(None, model)]
    else:
        models = {}
        for l in ids:
            model = result.models[l]
            path = out / f"model_node{l}.bndm"
            save_model(model, path)
            man.output(path)
            models[l] = model
        global_entries = [(l, models[l]) for l in ids]

    for l, ts in zip(ids, test_sets):
        m = compute_metrics(confusion(ts.labels, _predict_rows(models[l], ts.features), ts.n_classes))
        reports.append(report(m, result.scheme, l, test_set=f"node{l}"))
    for l, model in global_entries:
        g = global_test
        m = compute_metrics(confusion(g.labels, _predict_rows(model, g.features), g.n_classes))
        reports.append(report(m, result.scheme, l, test_set="global"))
    _dump_json(reports, out / "report.json")
    man.output(out / "report.json")

    for l, t in zip(ids, test_raw):
        p = out / f"test_node{l}.csv"
        write_csv(t, p)
        man.output(p)
    if len(ids) > 1:
        p = out / "test_global.csv"
        write_csv(concat(test_raw), p)
        man.output(p)

    hist = out / "history.csv"
    collab.write_history(result, hist)
    man.output(hist)


# --------------------------------------------------------------------------
# eval / detect
# --------------------------------------------------------------------------


def _predict_rows(model, features):
    """Per-record classification (the same path the streaming detector takes)."""
    return np.array([int(np.argmax(dbn.predict_proba(model, x))) for x in features], dtype=np.int64)


def _load_model_checked(path, man):
    model = load_model(path)
    man.input(path)
    return model


def _default_manifest(args, command):
    if args.manifest:
        return args.manifest
    if getattr(args, "out", None):
        return f"{args.out}.manifest.json"
    return f"{command}.manifest.json"


def cmd_eval(args, argv):
    man = Manifest("eval", argv, args)
    model = _load_model_checked(args.model, man)
    scaler = _resolve_scaler(args, args.model)
    data = load_csv(args.data, expected_dim=model.arch[0], n_classes=model.n_classes)
    man.input(args.data)
    if scaler is not None:
        data = scaler.transform(data)
    pred = _predict_rows(model, data.features)
    m = compute_metrics(confusion(data.labels, pred, data.n_classes))
    _dump_json(report(m, args.scheme, args.node, records=len(data)), args.out)
    if args.out:
        man.output(args.out)
    man.write(_default_manifest(args, "eval"))
    return EXIT_OK


def cmd_detect(args, argv):
    man = Manifest("detect", argv, args)
    model = _load_model_checked(args.model, man)
    scaler = _resolve_scaler(args, args.model)
    d = model.arch[0]
    source = sys.stdin if args.input in (None, "-") else open(args.input, newline="", encoding="utf-8")
    sink = sys.stdout if args.out in (None, "-") else open(args.out, "w", encoding="utf-8")
    if args.input not in (None, "-"):
        man.input(args.input)
    truths, preds = [], []
    class_counts = np.zeros(model.n_classes, dtype=np.int64)
    windows = []
    t0 = time.perf_counter()
    window_start, window_count = t0, 0
    labeled = None
    try:
        for line, x, label in iter_records(source, model.n_classes, d, args.input):
            if labeled is None:
                labeled = label is not None
            if scaler is not None:
                x = scaler.apply(x)
            probs = dbn.predict_proba(model, x)
            pred = int(np.argmax(probs))
            sink.write(json.dumps({"timestamp": time.time(), "record": len(preds),
                                   "predicted_class": pred + 1,
                                   "probabilities": probs.tolist()}) + "\n")
            class_counts[pred] += 1
            preds.append(pred)
            if label is not None:
                truths.append(label)
            window_count += 1
            now = time.perf_counter()
            if now - window_start >= args.window:
                windows.append(window_count)
                window_start, window_count = now, 0
        sink.flush()
    finally:
        if source is not sys.stdin:
            source.close()
        if sink is not sys.stdout:
            sink.close()
    elapsed = time.perf_counter() - t0
    if window_count:
        windows.append(window_count)
    summary = {
        "records": len(preds),
        "elapsed_s": elapsed,
        "records_per_s": len(preds) / elapsed if elapsed > 0 else None,
        "window_s": args.window,
        "windows": len(windows),
        "records_per_window": windows,
        "predicted_counts": {str(u + 1): int(c) for u, c in enumerate(class_counts)},
    }
    if labeled and preds:
        m = compute_metrics(confusion(np.array(truths), np.array(preds), model.n_classes))
        summary["metrics"] = report(m, args.scheme, args.node, records=len(preds))
    if args.summary:
        _dump_json(summary, args.summary)
        man.output(args.summary)
    else:
        sys.stderr.write(json.dumps(summary) + "\n")
    if args.out not in (None, "-"):
        man.output(args.out)
    man.write(_default_manifest(args, "detect"))
    return EXIT_OK


# --------------------------------------------------------------------------
# pca / replay
# --------------------------------------------------------------------------


def cmd_pca(args, argv):
    man = Manifest("pca", argv, args)
    datasets = [load_csv(p, n_classes=args.classes) for p in args.data]
    for p in args.data:
        man.input(p)
    data = concat(datasets) if len(datasets) > 1 else datasets[0]
    if args.standardize:
        data = fit_scaler(data).transform(data)
    res = pca_project(data, args.k)
    write_pca_csv(res, data.labels, args.out)
    man.output(args.out)
    log.info("explained variance ratio: %s", np.round(res.explained_ratio, 4).tolist())
    man.write(_default_manifest(args, "pca"))
    return EXIT_OK


def cmd_replay(args, argv):
    try:
        manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
        replay_argv = manifest["argv"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{args.manifest_file}: not a run manifest ({exc})") from None
    if replay_argv and replay_argv[0] == "replay":
        raise UsageError("refusing to replay a replay")
    return main(replay_argv)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="collabdbn", description="Collaborative DBN cyberattack detection.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic per-node datasets")
    g.add_argument("--nodes", type=int, default=None, help="number of nodes (default 3)")
    g.add_argument("--per-class", type=_int_list, default=(3000, 300, 300, 300),
                   help="samples per class for every node (default 3000,300,300,300)")
    g.add_argument("--per-node", default=None,
                   help="per-node class counts, e.g. '3300,300,300,0;3000,300,300,300'")
    g.add_argument("--features", type=_positive_int, default=10, help="feature dimension (default 10)")
    g.add_argument("--overlap", type=float, default=0.25, help="attack/normal overlap in [0,1] (default 0.25)")
    g.add_argument("--node-shift", type=float, default=0.0, help="per-node Normal offset (default 0)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train under one scheme",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--data", required=True, help="directory with node{l}.csv files")
    t.add_argument("--scheme", choices=collab.SCHEMES, default="pclm")
    t.add_argument("--nodes", type=_positive_int, default=None, help="use only the first N node files")
    t.add_argument("--epochs", type=int, default=700, help="training iterations (one mini-batch each)")
    t.add_argument("--lr", type=_positive_float, default=0.01, help="learning rate")
    t.add_argument("--cd-k", type=_positive_int, default=1, help="Gibbs steps per CD estimate")
    t.add_argument("--batch", type=_positive_int, default=64, help="mini-batch size per node")
    t.add_argument("--arch", type=_int_list, default=(16, 8), help="hidden layer widths")
    t.add_argument("--classes", type=_positive_int, default=DEFAULT_CLASSES)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--test-fraction", type=float, default=0.2)
    t.add_argument("--eval-every", type=_positive_int, default=10, help="history accuracy cadence")
    t.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    t.add_argument("--node-id", type=_positive_int, default=None, help="socket mode: this process's node")
    t.add_argument("--listen", default=None, help="socket mode: HOST:PORT to accept peers on")
    t.add_argument("--peers", default=None, help="socket mode: NODE=HOST:PORT,...")
    t.add_argument("--timeout", type=_positive_float, default=30.0, help="per-round gather timeout (s)")
    t.add_argument("--connect-timeout", type=_positive_float, default=30.0)
    t.add_argument("--scaler", default=None, help="scaler JSON to use instead of fitting one")
    t.add_argument("--out", default="run", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model on a labeled CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scaler", default=None, help="default: scaler.json next to the model")
    e.add_argument("--no-scaler", action="store_true")
    e.add_argument("--scheme", default=None)
    e.add_argument("--node", type=int, default=None)
    e.add_argument("--out", default=None, help="report path (default stdout)")
    e.add_argument("--manifest", default=None)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="classify a stream of feature records")
    d.add_argument("--model", required=True)
    d.add_argument("--input", default=None, help="CSV file, '-' or omitted for stdin")
    d.add_argument("--scaler", default=None, help="default: scaler.json next to the model")
    d.add_argument("--no-scaler", action="store_true")
    d.add_argument("--window", type=_positive_float, default=2.0,
                   help="reporting window in seconds (throughput accounting only)")
    d.add_argument("--scheme", default=None)
    d.add_argument("--node", type=int, default=None)
    d.add_argument("--out", default=None, help="alert lines (default stdout)")
    d.add_argument("--summary", default=None, help="summary JSON (default stderr)")
    d.add_argument("--manifest", default=None)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("pca", help="export a PCA projection of datasets")
    c.add_argument("--data", nargs="+", required=True)
    c.add_argument("--k", type=_positive_int, default=3)
    c.add_argument("--classes", type=_positive_int, default=DEFAULT_CLASSES)
    c.add_argument("--standardize", action="store_true")
    c.add_argument("--out", required=True)
    c.add_argument("--manifest", default=None)
    c.set_defaults(func=cmd_pca)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest_file")
    r.set_defaults(func=cmd_replay)
    return p


def _setup_logging():
    level = os.environ.get("COLLABDBN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"collabdbn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"collabdbn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"collabdbn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as exc:
        print(f"collabdbn: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericError as exc:
        print(f"collabdbn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
