"""Heterogeneous three-node benchmark comparing PCLM, CLM and LLM.

Node 1 never sees FoT traffic and node 3 never sees BP traffic; the missing
samples are replaced by extra Normal samples so every node still holds 3900
rows. Each node's Normal traffic is offset by a node-specific shift. All
models are scored on the pooled test split of every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import collab
from .dataset import Dataset, SynthConfig, concat, generate_synthetic, split, standardize
from .dbn import TrainConfig
from .metrics import evaluate

HETEROGENEOUS_COUNTS = (
    (3300, 300, 300, 0),
    (3000, 300, 300, 300),
    (3300, 0, 300, 300),
)
BENCHMARK_SEEDS = (7, 13, 42)


def heterogeneous_config(seed: int, overlap: float = 0.25, node_shift: float = 2.0) -> SynthConfig:
    return SynthConfig(nodes=3, per_class=HETEROGENEOUS_COUNTS, feature_dim=10,
                       overlap=overlap, node_shift=node_shift, seed=seed)


def benchmark_train_config(seed: int, iterations: int = 3000) -> collab.CollabConfig:
    return collab.CollabConfig(
        TrainConfig(hidden=(16, 8), learning_rate=0.3, cd_steps=1, batch_size=64,
                    iterations=iterations, seed=seed),
        eval_every=50,
    )


@dataclass
class Prepared:
    train: list[Dataset]
    test: list[Dataset]
    global_test: Dataset
    scaler: object


def prepare(datasets, test_fraction: float = 0.2, seed: int = 0) -> Prepared:
    """Per-node stratified splits; one scaler fitted on the pooled training rows."""
    parts = [split(d, test_fraction, seed=[seed, node]) for node, d in enumerate(datasets, start=1)]
    train = [p[0] for p in parts]
    test = [p[1] for p in parts]
    scaler, _, _ = standardize(concat(train))
    train = [scaler.transform(t) for t in train]
    test = [scaler.transform(t) for t in test]
    return Prepared(train, test, concat(test, provenance="global test"), scaler)


@dataclass
class SchemeScore:
    scheme: str
    per_node: dict[int, float]
    result: collab.TrainResult = field(repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_node.values())))


def run_seed(seed: int, config: collab.CollabConfig | None = None,
             synth: SynthConfig | None = None) -> dict[str, SchemeScore]:
    synth = synth or heterogeneous_config(seed)
    config = config or benchmark_train_config(seed)
    prep = prepare(generate_synthetic(synth), seed=seed)
    scores = {}
    for scheme in collab.SCHEMES:
        res = collab.train(scheme, prep.train, config, prep.global_test)
        per_node = {n: evaluate(m, prep.global_test).accuracy for n, m in res.models.items()}
        scores[scheme] = SchemeScore(scheme, per_node, res)
    return scores


def with_iterations(config: collab.CollabConfig, iterations: int) -> collab.CollabConfig:
    return replace(config, train=replace(config.train, iterations=iterations))
