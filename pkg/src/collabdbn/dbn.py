"""Deep belief network: one Gaussian-Bernoulli RBM, a stack of binary RBMs and
a softmax classifier head.

Weights are stored visible-by-hidden (``W[p, g]``). An architecture is a tuple
``(d, h1, ..., hk, U)``: the GRBM maps ``d -> h1``, each following pair is a
binary RBM, and the head maps ``hk -> U``.

All gradients are *ascent* directions of a log-likelihood; updates add them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

MAX_ENUMERATION_UNITS = 16


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax(z):
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------


@dataclass
class GrbmLayer:
    """Gaussian visible units, binary hidden units."""

    W: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    gamma: np.ndarray = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        if self.gamma is None:
            self.gamma = np.ones(self.b1.shape)
        self.gamma = np.asarray(self.gamma, dtype=float)
        _check_layer_shapes(self.W, self.b1, self.b2)
        if self.gamma.shape != self.b1.shape:
            raise ConfigError("gamma must have one entry per visible unit")
        if np.any(self.gamma <= 0):
            raise ConfigError("gamma entries must be positive")

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]

    def copy(self):
        return GrbmLayer(self.W.copy(), self.b1.copy(), self.b2.copy(), self.gamma.copy())


@dataclass
class RbmLayer:
    """Binary visible units, binary hidden units."""

    W: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        _check_layer_shapes(self.W, self.b1, self.b2)

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]

    def copy(self):
        return RbmLayer(self.W.copy(), self.b1.copy(), self.b2.copy())


@dataclass
class SoftmaxHead:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ConfigError(f"head shapes inconsistent: W{self.W.shape}, b{self.b.shape}")

    @property
    def n_classes(self):
        return self.W.shape[1]

    def copy(self):
        return SoftmaxHead(self.W.copy(), self.b.copy())


@dataclass
class DbnModel:
    grbm: GrbmLayer
    rbms: list[RbmLayer]
    head: SoftmaxHead

    def __post_init__(self):
        self.rbms = list(self.rbms)
        width = self.grbm.n_hidden
        for i, rbm in enumerate(self.rbms):
            if rbm.n_visible != width:
                raise ConfigError(f"RBM {i} expects {rbm.n_visible} inputs, layer below emits {width}")
            width = rbm.n_hidden
        if self.head.W.shape[0] != width:
            raise ConfigError(f"head expects {self.head.W.shape[0]} inputs, last hidden layer has {width}")

    @property
    def arch(self) -> tuple[int, ...]:
        return (
            self.grbm.n_visible,
            self.grbm.n_hidden,
            *(r.n_hidden for r in self.rbms),
            self.head.n_classes,
        )

    @property
    def n_classes(self):
        return self.head.n_classes

    def copy(self):
        return DbnModel(self.grbm.copy(), [r.copy() for r in self.rbms], self.head.copy())

    def equals(self, other) -> bool:
        """Bitwise parameter equality."""
        return self.arch == other.arch and flatten(self).tobytes() == flatten(other).tobytes()


def _check_layer_shapes(W, b1, b2):
    if W.ndim != 2 or b1.shape != (W.shape[0],) or b2.shape != (W.shape[1],):
        raise ConfigError(f"layer shapes inconsistent: W{W.shape}, b1{b1.shape}, b2{b2.shape}")


@dataclass
class LayerGradient:
    """Ascent direction for one GRBM/RBM layer."""

    W: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    batch_size: int = 0


@dataclass
class HeadGradient:
    W: np.ndarray
    b: np.ndarray
    batch_size: int = 0


@dataclass
class GradientBundle:
    """Total gradient of a DBN, one block per layer, same layout as the model."""

    grbm: LayerGradient
    rbms: list[LayerGradient]
    head: HeadGradient
    batch_size: int = 0

    @property
    def arch(self) -> tuple[int, ...]:
        return (
            self.grbm.W.shape[0],
            self.grbm.W.shape[1],
            *(r.W.shape[1] for r in self.rbms),
            self.head.W.shape[1],
        )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the per-iteration training step.

    ``hidden`` lists the hidden-layer widths (first is the GRBM, the rest are
    RBMs). ``iterations`` counts mini-batch updates.
    """

    hidden: tuple[int, ...] = (16, 8)
    learning_rate: float = 0.01
    cd_steps: int = 1
    batch_size: int = 64
    iterations: int = 700
    seed: int = 0

    def __post_init__(self):
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive and non-empty")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.cd_steps < 1:
            raise ConfigError("cd_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    def arch(self, feature_dim: int, n_classes: int) -> tuple[int, ...]:
        return (feature_dim, *self.hidden, n_classes)


# --------------------------------------------------------------------------
# Energies and conditionals
# --------------------------------------------------------------------------


def _vec(x, n, what):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {x.shape}")
    return x


def grbm_energy(layer: GrbmLayer, v, h) -> float:
    v = _vec(v, layer.n_visible, "v")
    h = _vec(h, layer.n_hidden, "h")
    g = layer.gamma
    quad = np.sum((v - layer.b1) ** 2 / (2.0 * g**2))
    inter = (v / g) @ layer.W @ h
    return float(quad - inter - layer.b2 @ h)


def rbm_energy(layer: RbmLayer, v, h) -> float:
    v = _vec(v, layer.n_visible, "v")
    h = _vec(h, layer.n_hidden, "h")
    return float(-(layer.b1 @ v) - v @ layer.W @ h - layer.b2 @ h)


def _check_visible(layer, v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != layer.n_visible:
        raise ValueError(f"expected {layer.n_visible} visible values, got {v.shape[-1]}")
    return v


def hidden_conditional(layer, v):
    """P(h_g = 1 | v) for a single vector or a batch (rows)."""
    v = _check_visible(layer, v)
    if isinstance(layer, GrbmLayer):
        v = v / layer.gamma
    return sigmoid(v @ layer.W + layer.b2)


def visible_conditional(layer, h):
    """RBM: P(v_p = 1 | h). GRBM: (mean, std) of the Gaussian visible units."""
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != layer.n_hidden:
        raise ValueError(f"expected {layer.n_hidden} hidden values, got {h.shape[-1]}")
    if isinstance(layer, GrbmLayer):
        mean = layer.b1 + layer.gamma * (h @ layer.W.T)
        return mean, layer.gamma
    return sigmoid(h @ layer.W.T + layer.b1)


def _reconstruct_visible(layer, h):
    # mean-field reconstruction for both layer types
    if isinstance(layer, GrbmLayer):
        return visible_conditional(layer, h)[0]
    return visible_conditional(layer, h)


def _sufficient_stats(layer, v, ph):
    """Batch-averaged (W, b1, b2) statistics of the log-likelihood gradient."""
    n = v.shape[0]
    if isinstance(layer, GrbmLayer):
        vs = v / layer.gamma
        return (vs.T @ ph) / n, ((v - layer.b1) / layer.gamma**2).mean(axis=0), ph.mean(axis=0)
    return (v.T @ ph) / n, v.mean(axis=0), ph.mean(axis=0)


def _as_batch(layer, batch):
    batch = _check_visible(layer, batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("batch is empty")
    return batch


def cd_gradient(layer, batch, k: int = 1, rng=None, model_term: str = "cd") -> LayerGradient:
    """Contrastive-divergence estimate of the log-likelihood gradient.

    The data term uses hidden probabilities on ``batch``. With ``model_term="cd"``
    the model term comes from a k-step Gibbs chain started at the data: hidden
    states are sampled, visible states are reconstructed from their conditional
    mean. ``model_term="exact"`` replaces the chain with the enumerated model
    expectation (binary RBMs only).
    """
    batch = _as_batch(layer, batch)
    ph_data = hidden_conditional(layer, batch)
    pos = _sufficient_stats(layer, batch, ph_data)

    if model_term == "exact":
        if not isinstance(layer, RbmLayer):
            raise ValueError("exact model expectation is only available for binary RBMs")
        neg = _exact_model_stats(layer)
    elif model_term == "cd":
        if k < 1:
            raise ValueError("k must be >= 1")
        if rng is None:
            raise ValueError("cd model term needs an rng")
        ph = ph_data
        for _ in range(k):
            h = (rng.random(ph.shape) < ph).astype(float)
            v = _reconstruct_visible(layer, h)
            ph = hidden_conditional(layer, v)
        neg = _sufficient_stats(layer, v, ph)
    else:
        raise ValueError(f"unknown model_term {model_term!r}")

    return LayerGradient(pos[0] - neg[0], pos[1] - neg[1], pos[2] - neg[2], batch.shape[0])


# --------------------------------------------------------------------------
# Exact enumeration (small binary RBMs only)
# --------------------------------------------------------------------------


def _binary_states(n):
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(-1, n)


def _check_enumerable(layer):
    if not isinstance(layer, RbmLayer):
        raise ValueError("enumeration requires a binary RBM")
    if layer.n_visible + layer.n_hidden > MAX_ENUMERATION_UNITS:
        raise ValueError(
            f"model too large to enumerate ({layer.n_visible + layer.n_hidden} units, "
            f"limit {MAX_ENUMERATION_UNITS})"
        )


def _visible_log_marginals(layer, vs):
    # log sum_h exp(-E(v, h)) with hidden units summed out analytically
    return vs @ layer.b1 + softplus(vs @ layer.W + layer.b2).sum(axis=1)


def _exact_model_stats(layer):
    _check_enumerable(layer)
    vs = _binary_states(layer.n_visible)
    logp = _visible_log_marginals(layer, vs)
    p = np.exp(logp - np.logaddexp.reduce(logp))
    ph = hidden_conditional(layer, vs)
    return (vs * p[:, None]).T @ ph, p @ vs, p @ ph


def log_partition(layer: RbmLayer) -> float:
    _check_enumerable(layer)
    vs = _binary_states(layer.n_visible)
    return float(np.logaddexp.reduce(_visible_log_marginals(layer, vs)))


def exact_loglik(layer: RbmLayer, batch) -> float:
    """Mean log-likelihood of ``batch`` under the RBM, partition function enumerated."""
    batch = _as_batch(layer, batch)
    return float(np.mean(_visible_log_marginals(layer, batch)) - log_partition(layer))


def exact_loglik_gradient(layer: RbmLayer, batch) -> LayerGradient:
    _check_enumerable(layer)
    return cd_gradient(layer, batch, model_term="exact")


# --------------------------------------------------------------------------
# Forward pass and classifier head
# --------------------------------------------------------------------------


def hidden_activations(model: DbnModel, x) -> list[np.ndarray]:
    """Mean-field outputs of every hidden layer, bottom to top."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.grbm.n_visible:
        raise ValueError(f"expected {model.grbm.n_visible} features, got {x.shape[-1]}")
    outs = [hidden_conditional(model.grbm, x)]
    for rbm in model.rbms:
        outs.append(hidden_conditional(rbm, outs[-1]))
    return outs


def forward(model: DbnModel, x) -> np.ndarray:
    return hidden_activations(model, x)[-1]


def head_logits(head: SoftmaxHead, xstar):
    return np.asarray(xstar, dtype=float) @ head.W + head.b


def predict_proba(model: DbnModel, x) -> np.ndarray:
    return softmax(head_logits(model.head, forward(model, x)))


def predict(model: DbnModel, x):
    """Zero-based class index (ties resolve to the lowest index)."""
    return np.argmax(predict_proba(model, x), axis=-1)


def _onehot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def head_gradient(head: SoftmaxHead, xstar, labels) -> HeadGradient:
    """Gradient of the mean log-probability of the true class w.r.t. the head."""
    xstar = np.atleast_2d(np.asarray(xstar, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if xstar.shape[0] != labels.shape[0]:
        raise ValueError("batch and labels are not aligned")
    if xstar.shape[0] == 0:
        raise ValueError("batch is empty")
    err = _onehot(labels, head.n_classes) - softmax(head_logits(head, xstar))
    n = xstar.shape[0]
    return HeadGradient(xstar.T @ err / n, err.mean(axis=0), n)


def classification_loss(model: DbnModel, x, labels) -> float:
    """Mean negative log-probability of the true class."""
    logits = head_logits(model.head, forward(model, x))
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    lse = np.logaddexp.reduce(logits, axis=1)
    return float(np.mean(lse - logits[np.arange(labels.shape[0]), labels]))


def total_gradient(model: DbnModel, x, labels, k: int = 1, rng=None) -> GradientBundle:
    """GRBM, RBM and head gradients assembled into one bundle.

    Each RBM is trained on the mean-field output of the layer below; the head
    on the top hidden layer with the true labels.
    """
    x = _as_batch(model.grbm, x)
    grads = [cd_gradient(model.grbm, x, k, rng)]
    inp = hidden_conditional(model.grbm, x)
    for rbm in model.rbms:
        grads.append(cd_gradient(rbm, inp, k, rng))
        inp = hidden_conditional(rbm, inp)
    head = head_gradient(model.head, inp, labels)
    return GradientBundle(grads[0], grads[1:], head, x.shape[0])


def apply_update(model: DbnModel, grad: GradientBundle, lr: float) -> DbnModel:
    """New model with every block moved by ``lr * grad`` (gamma untouched)."""
    if grad.arch != model.arch:
        raise ValueError(f"gradient layout {grad.arch} does not match model {model.arch}")
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    g = model.grbm
    grbm = GrbmLayer(g.W + lr * grad.grbm.W, g.b1 + lr * grad.grbm.b1, g.b2 + lr * grad.grbm.b2, g.gamma.copy())
    rbms = [
        RbmLayer(r.W + lr * dr.W, r.b1 + lr * dr.b1, r.b2 + lr * dr.b2)
        for r, dr in zip(model.rbms, grad.rbms)
    ]
    head = SoftmaxHead(model.head.W + lr * grad.head.W, model.head.b + lr * grad.head.b)
    return DbnModel(grbm, rbms, head)


# --------------------------------------------------------------------------
# Canonical flat encoding
# --------------------------------------------------------------------------


def validate_arch(arch) -> tuple[int, ...]:
    arch = tuple(int(a) for a in arch)
    if len(arch) < 3:
        raise ConfigError("architecture needs input, at least one hidden layer and output sizes")
    if any(a < 1 for a in arch):
        raise ConfigError("architecture sizes must be positive")
    if arch[-1] < 2:
        raise ConfigError("need at least 2 classes")
    return arch


def block_shapes(arch) -> list[tuple[int, ...]]:
    arch = validate_arch(arch)
    shapes = []
    for p, g in zip(arch[:-2], arch[1:-1]):
        shapes += [(p, g), (p,), (g,)]
    shapes += [(arch[-2], arch[-1]), (arch[-1],)]
    return shapes


def param_count(arch) -> int:
    return sum(int(np.prod(s)) for s in block_shapes(arch))


def _blocks(obj):
    if not isinstance(obj, (DbnModel, GradientBundle)):
        raise TypeError(f"cannot flatten {type(obj).__name__}")
    out = [a for lay in (obj.grbm, *obj.rbms) for a in (lay.W, lay.b1, lay.b2)]
    return out + [obj.head.W, obj.head.b]


def flatten(obj) -> np.ndarray:
    """Canonical flat vector: per layer (W row-major, b1, b2), then head (W, b)."""
    return np.concatenate([np.ravel(b) for b in _blocks(obj)])


def _split(flat, arch):
    flat = np.asarray(flat, dtype=float)
    shapes = block_shapes(arch)
    total = sum(int(np.prod(s)) for s in shapes)
    if flat.shape != (total,):
        raise ValueError(f"flat vector has length {flat.size}, architecture {tuple(arch)} needs {total}")
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    return out


def unflatten_model(flat, arch) -> DbnModel:
    b = _split(flat, arch)
    grbm = GrbmLayer(b[0], b[1], b[2])
    rbms = [RbmLayer(b[i], b[i + 1], b[i + 2]) for i in range(3, len(b) - 2, 3)]
    return DbnModel(grbm, rbms, SoftmaxHead(b[-2], b[-1]))


def unflatten_gradient(flat, arch, batch_size: int = 0) -> GradientBundle:
    b = _split(flat, arch)
    grbm = LayerGradient(b[0], b[1], b[2], batch_size)
    rbms = [LayerGradient(b[i], b[i + 1], b[i + 2], batch_size) for i in range(3, len(b) - 2, 3)]
    return GradientBundle(grbm, rbms, HeadGradient(b[-2], b[-1], batch_size), batch_size)


def init_model(arch, seed: int = 0) -> DbnModel:
    """Weights ~ N(0, 0.01^2), biases 0, gamma 1.

    Weights are drawn from ``numpy.random.default_rng(seed)`` block by block in
    canonical order, so the same seed always yields the same model.
    """
    arch = validate_arch(arch)
    rng = np.random.default_rng(seed)
    b = []
    for shape in block_shapes(arch):
        if len(shape) == 2:
            b.append(rng.normal(0.0, 0.01, size=shape))
        else:
            b.append(np.zeros(shape))
    return unflatten_model(np.concatenate([x.ravel() for x in b]), arch)


def check_finite(obj, what="parameters"):
    if not np.all(np.isfinite(flatten(obj))):
        raise NumericError(f"non-finite values in {what}")
