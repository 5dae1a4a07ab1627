"""Training schemes: collaborative gradient averaging (PCLM), centralized
training on pooled data (CLM) and isolated local training (LLM).

Every scheme runs the same per-iteration step: draw one mini-batch, compute the
total DBN gradient, and add ``learning_rate`` times the (averaged) gradient to
the parameters. All randomness of node ``l`` at iteration ``i`` comes from
``default_rng([seed, stream_l, i])`` where ``stream_l`` defaults to ``l``.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import dbn
from .dataset import Dataset, concat
from .errors import ConfigError, DataError, NumericError, ProtocolError
from .metrics import accuracy, confusion
from .transport import InProcessBus, RoundMessage, loopback_mesh

log = logging.getLogger(__name__)

SCHEMES = ("pclm", "clm", "llm")


@dataclass(frozen=True)
class CollabConfig:
    train: dbn.TrainConfig = field(default_factory=dbn.TrainConfig)
    transport: str = "inproc"
    eval_every: int = 10
    timeout: float = 30.0
    # optional early stop: accuracy range below plateau_tol over plateau_window iterations
    plateau_window: int | None = None
    plateau_tol: float = 0.001

    def __post_init__(self):
        if self.transport not in ("inproc", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")


@dataclass
class NodeState:
    node_id: int
    model: dbn.DbnModel
    data: Dataset
    stream: int

    def __post_init__(self):
        if len(self.data) == 0:
            raise DataError(f"node {self.node_id} has no training data")


@dataclass
class RoundRecord:
    iteration: int
    losses: dict[int, float]
    accuracies: dict[int, float] | None = None
    duration: float = 0.0


@dataclass
class TrainResult:
    scheme: str
    models: dict[int, dbn.DbnModel]
    history: list[RoundRecord]


# --------------------------------------------------------------------------
# Averaging
# --------------------------------------------------------------------------


def average_flat(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean that is exact for equal inputs and order-independent.

    Values are sorted per coordinate, then the mean is formed as the minimum
    plus the mean deviation from it.
    """
    stacked = np.stack([np.asarray(v, dtype=float) for v in vectors])
    s = np.sort(stacked, axis=0)
    lo = s[0]
    dev = (s - lo).sum(axis=0) / s.shape[0]
    return np.where(s[-1] == lo, lo, lo + dev)


def average_gradients(bundles: Sequence[dbn.GradientBundle], n_nodes: int) -> dbn.GradientBundle:
    if len(bundles) != n_nodes:
        raise ProtocolError(f"expected {n_nodes} gradients, got {len(bundles)}")
    arch = bundles[0].arch
    if any(b.arch != arch for b in bundles):
        raise ProtocolError("gradient layouts differ")
    avg = average_flat([dbn.flatten(b) for b in bundles])
    return dbn.unflatten_gradient(avg, arch, sum(b.batch_size for b in bundles))


# --------------------------------------------------------------------------
# Per-node step
# --------------------------------------------------------------------------


def step_rng(seed: int, stream: int, iteration: int):
    return np.random.default_rng([seed, stream, iteration])


def draw_batch(rng, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return rng.permutation(n)
    return rng.choice(n, size=batch_size, replace=False)


def local_gradient(node: NodeState, iteration: int, cfg: dbn.TrainConfig):
    """(gradient bundle, batch loss) of ``node`` at ``iteration``."""
    rng = step_rng(cfg.seed, node.stream, iteration)
    idx = draw_batch(rng, len(node.data), cfg.batch_size)
    x, y = node.data.features[idx], node.data.labels[idx]
    loss = dbn.classification_loss(node.model, x, y)
    grad = dbn.total_gradient(node.model, x, y, cfg.cd_steps, rng)
    if not np.isfinite(loss):
        raise NumericError(f"node {node.node_id} iteration {iteration}: loss is not finite")
    dbn.check_finite(grad, f"gradient of node {node.node_id} at iteration {iteration}")
    return grad, loss


def node_step(node: NodeState, endpoint, iteration: int, config: CollabConfig):
    """One synchronized round for one node; returns (new model, loss).

    With an endpoint the node broadcasts its gradient, waits for every peer's
    gradient of the same round and applies the average (its own included).
    """
    cfg = config.train
    grad, loss = local_gradient(node, iteration, cfg)
    flat = dbn.flatten(grad)
    if endpoint is None:
        gathered = [flat]
    else:
        endpoint.broadcast(RoundMessage(iteration, node.node_id, flat))
        peers = endpoint.gather(iteration, config.timeout)
        gathered = [flat] + [m.gradient for m in peers]
    avg = dbn.unflatten_gradient(average_flat(gathered), node.model.arch, grad.batch_size)
    model = dbn.apply_update(node.model, avg, cfg.learning_rate)
    dbn.check_finite(model, f"model of node {node.node_id} after iteration {iteration}")
    return model, loss


def _eval_accuracy(model, eval_set):
    pred = dbn.predict(model, eval_set.features)
    return accuracy(confusion(eval_set.labels, pred, eval_set.n_classes))


def _due(iteration, config):
    return iteration % config.eval_every == 0 or iteration == config.train.iterations


def run_round(nodes: list[NodeState], endpoints, iteration: int, config: CollabConfig,
              executor=None, eval_set=None) -> RoundRecord:
    """Advance every node by one round, in parallel when ``executor`` is given.

    ``endpoints`` is a list aligned with ``nodes`` or None (no communication).
    Node models are replaced in place.
    """
    t0 = time.perf_counter()
    eps = endpoints if endpoints is not None else [None] * len(nodes)
    if executor is None:
        results = [node_step(n, e, iteration, config) for n, e in zip(nodes, eps)]
    else:
        futures = [executor.submit(node_step, n, e, iteration, config) for n, e in zip(nodes, eps)]
        results = [f.result() for f in futures]
    for node, (model, _) in zip(nodes, results):
        node.model = model
    accs = None
    if eval_set is not None and _due(iteration, config):
        accs = {n.node_id: _eval_accuracy(n.model, eval_set) for n in nodes}
    return RoundRecord(iteration, {n.node_id: r[1] for n, r in zip(nodes, results)},
                       accs, time.perf_counter() - t0)


def _plateaued(history, config) -> bool:
    w = config.plateau_window
    if not w:
        return False
    last = history[-1].iteration
    vals = [np.mean(list(r.accuracies.values())) for r in history
            if r.accuracies and r.iteration > last - w]
    seen = [r for r in history if r.accuracies]
    if not seen or seen[0].iteration > last - w or len(vals) < 2:
        return False
    return max(vals) - min(vals) < config.plateau_tol


# --------------------------------------------------------------------------
# Schemes
# --------------------------------------------------------------------------


def _check_datasets(datasets):
    if not datasets:
        raise DataError("no datasets")
    dims = {d.feature_dim for d in datasets}
    if len(dims) != 1:
        raise DataError(f"node datasets disagree on feature dimension: {sorted(dims)}")
    classes = {d.n_classes for d in datasets}
    if len(classes) != 1:
        raise DataError("node datasets disagree on the number of classes")
    return dims.pop(), classes.pop()


def make_nodes(datasets, config: CollabConfig, streams=None, node_ids=None) -> list[NodeState]:
    """Node states sharing one initial model; training rows in canonical order."""
    d, u = _check_datasets(datasets)
    arch = config.train.arch(d, u)
    init = dbn.init_model(arch, config.train.seed)
    node_ids = list(node_ids) if node_ids is not None else list(range(1, len(datasets) + 1))
    streams = list(streams) if streams is not None else node_ids
    if len(streams) != len(datasets) or len(node_ids) != len(datasets):
        raise ConfigError("need one stream id and node id per dataset")
    return [NodeState(l, init.copy(), ds.canonical(), s) for l, ds, s in zip(node_ids, datasets, streams)]


def _loop(nodes, endpoints, config, executor, eval_set, on_round=None):
    history = []
    for i in range(1, config.train.iterations + 1):
        history.append(run_round(nodes, endpoints, i, config, executor, eval_set))
        if on_round is not None:
            on_round(i, {n.node_id: n.model for n in nodes})
        if history[-1].accuracies and _plateaued(history, config):
            log.info("accuracy plateaued at iteration %d", i)
            break
    return history


def train_pclm(datasets: Sequence[Dataset], config: CollabConfig, eval_set: Dataset | None = None,
               streams=None, on_round=None) -> TrainResult:
    """Collaborative training: all nodes exchange gradients every round.

    ``on_round(iteration, {node_id: model})`` is called after every round.
    """
    nodes = make_nodes(datasets, config, streams)
    n = len(nodes)
    glen = dbn.param_count(nodes[0].model.arch)
    if config.transport == "socket":
        endpoints = loopback_mesh(n, glen, config.timeout)
    else:
        endpoints = InProcessBus(n, glen, config.timeout).endpoints
    try:
        with ThreadPoolExecutor(max_workers=n, thread_name_prefix="node") as pool:
            history = _loop(nodes, endpoints, config, pool, eval_set, on_round)
    finally:
        for ep in endpoints:
            ep.close()
    return TrainResult("pclm", {nd.node_id: nd.model for nd in nodes}, history)


def train_llm(datasets: Sequence[Dataset], config: CollabConfig, eval_set: Dataset | None = None,
              streams=None, on_round=None) -> TrainResult:
    """Independent per-node training, no communication."""
    nodes = make_nodes(datasets, config, streams)
    history = _loop(nodes, None, config, None, eval_set, on_round)
    return TrainResult("llm", {nd.node_id: nd.model for nd in nodes}, history)


def train_clm(datasets: Sequence[Dataset], config: CollabConfig, eval_set: Dataset | None = None,
              on_round=None) -> TrainResult:
    """One model trained on the union of all node datasets (reported as node 1).

    Each update draws ``batch_size * L`` pooled rows, the number of rows a
    collaborative round consumes across L nodes.
    """
    _check_datasets(datasets)
    pooled = concat(list(datasets), provenance="pooled")
    if len(datasets) > 1:
        train = replace(config.train, batch_size=config.train.batch_size * len(datasets))
        config = replace(config, train=train)
    nodes = make_nodes([pooled], config)
    history = _loop(nodes, None, config, None, eval_set, on_round)
    return TrainResult("clm", {1: nodes[0].model}, history)


def train(scheme: str, datasets, config: CollabConfig, eval_set=None, on_round=None) -> TrainResult:
    if scheme == "pclm":
        return train_pclm(datasets, config, eval_set, on_round=on_round)
    if scheme == "clm":
        return train_clm(datasets, config, eval_set, on_round=on_round)
    if scheme == "llm":
        return train_llm(datasets, config, eval_set, on_round=on_round)
    raise ConfigError(f"unknown scheme {scheme!r}")


def run_node(node: NodeState, endpoint, config: CollabConfig, eval_set=None) -> TrainResult:
    """Drive a single node of a multi-process PCLM session."""
    history = _loop([node], [endpoint], config, None, eval_set)
    return TrainResult("pclm", {node.node_id: node.model}, history)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


HISTORY_HEADER = ("iteration", "scheme", "node", "loss", "accuracy")


def history_rows(result: TrainResult):
    for rec in result.history:
        for node in sorted(rec.losses):
            acc = "" if not rec.accuracies else repr(float(rec.accuracies[node]))
            yield rec.iteration, result.scheme, node, repr(float(rec.losses[node])), acc


def write_history(result: TrainResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        w.writerows(history_rows(result))
