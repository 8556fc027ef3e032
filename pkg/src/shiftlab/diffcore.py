"""Minimal differentiable classifiers with exact backprop.

Three tiny architectures (linear, one-hidden-layer tanh MLP, mean-pooled
embedding bag) over a single flat parameter vector, plus per-example losses,
batch gradients, a finite-difference verification harness and Monte Carlo
estimation of the diagonal empirical Fisher.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class InputShapeError(ValueError):
    """Example is incompatible with the model spec."""


class UnsupportedArchitectureError(TypeError):
    """Operation called on an architecture that does not support it."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description for one of the three tiny classifiers.

    architecture: "linear", "mlp" or "embed_bag".
    input_dim is ignored for embed_bag; hidden_units only applies to mlp;
    vocab_size/embed_dim only apply to embed_bag.
    """

    architecture: str
    input_dim: int = 0
    num_classes: int = 2
    hidden_units: int = 0
    vocab_size: int = 0
    embed_dim: int = 0

    def __post_init__(self):
        if self.architecture not in ("linear", "mlp", "embed_bag"):
            raise ValueError(f"unknown architecture: {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.architecture in ("linear", "mlp") and self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.architecture == "mlp" and self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.architecture == "embed_bag":
            if self.vocab_size < 2:
                raise ValueError("vocab_size must be >= 2")
            if self.embed_dim < 1:
                raise ValueError("embed_dim must be >= 1")


@dataclass
class Example:
    """A single labeled example: dense features or a token-id sequence."""

    input: np.ndarray
    label: int
    group: Optional[int] = None
    id: int = 0


@dataclass
class ModelState:
    """Model spec plus the flat parameter vector and its slot layout."""

    spec: ModelSpec
    params: np.ndarray
    layout: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    def slot(self, name: str) -> np.ndarray:
        lo, hi = self.layout[name]
        return self.params[lo:hi]

    def copy(self) -> "ModelState":
        return ModelState(self.spec, self.params.copy(), dict(self.layout))

    @property
    def num_params(self) -> int:
        return self.params.size


def _slot_shapes(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for each parameter slot, in layout order."""
    c = spec.num_classes
    if spec.architecture == "linear":
        d = spec.input_dim
        return [("linear.weight", (c, d), d), ("linear.bias", (c,), 0)]
    if spec.architecture == "mlp":
        d, h = spec.input_dim, spec.hidden_units
        return [
            ("hidden.weight", (h, d), d),
            ("hidden.bias", (h,), 0),
            ("out.weight", (c, h), h),
            ("out.bias", (c,), 0),
        ]
    v, e = spec.vocab_size, spec.embed_dim
    return [
        ("embedding.weight", (v, e), e),
        ("out.weight", (c, e), e),
        ("out.bias", (c,), 0),
    ]


def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """Deterministic init: uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    layout = {}
    offset = 0
    for name, shape, fan_in in _slot_shapes(spec):
        n = int(np.prod(shape))
        if fan_in == 0:
            values = np.zeros(n)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=n)
        layout[name] = (offset, offset + n)
        chunks.append(values)
        offset += n
    return ModelState(spec, np.concatenate(chunks), layout)


def _slot_view(model: ModelState, name: str) -> np.ndarray:
    shape = dict((n, s) for n, s, _ in _slot_shapes(model.spec))[name]
    return model.slot(name).reshape(shape)


def _dense_matrix(model: ModelState, batch: Sequence[Example]) -> np.ndarray:
    d = model.spec.input_dim
    out = np.empty((len(batch), d))
    for i, ex in enumerate(batch):
        x = np.asarray(ex.input, dtype=float)
        if x.shape != (d,):
            raise InputShapeError(
                f"expected input of shape ({d},), got {x.shape}"
            )
        out[i] = x
    return out


def _token_batch(model: ModelState, batch: Sequence[Example]):
    v = model.spec.vocab_size
    seqs = []
    for ex in batch:
        ids = np.asarray(ex.input, dtype=int)
        if ids.ndim != 1 or ids.size == 0:
            raise InputShapeError("token input must be a non-empty 1-d sequence")
        if ids.min() < 0 or ids.max() >= v:
            raise InputShapeError(f"token id out of range [0, {v})")
        seqs.append(ids)
    return seqs


def _forward_batch(model: ModelState, batch: Sequence[Example]):
    """Logits for a batch plus the activation cache used by backprop."""
    arch = model.spec.architecture
    cache: Dict[str, object] = {}
    if arch == "linear":
        x = _dense_matrix(model, batch)
        w = _slot_view(model, "linear.weight")
        b = _slot_view(model, "linear.bias")
        cache["x"] = x
        logits = x @ w.T + b
    elif arch == "mlp":
        x = _dense_matrix(model, batch)
        w1 = _slot_view(model, "hidden.weight")
        b1 = _slot_view(model, "hidden.bias")
        w2 = _slot_view(model, "out.weight")
        b2 = _slot_view(model, "out.bias")
        a = np.tanh(x @ w1.T + b1)
        cache["x"] = x
        cache["a"] = a
        logits = a @ w2.T + b2
    else:
        seqs = _token_batch(model, batch)
        emb = _slot_view(model, "embedding.weight")
        w = _slot_view(model, "out.weight")
        b = _slot_view(model, "out.bias")
        bag = np.stack([emb[ids].mean(axis=0) for ids in seqs])
        cache["seqs"] = seqs
        cache["bag"] = bag
        logits = bag @ w.T + b
    return logits, cache


def _backward_from_dlogits(model: ModelState, cache, dlogits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given d(loss)/d(logits) for each example."""
    arch = model.spec.architecture
    grad = np.zeros_like(model.params)

    def put(name, value):
        lo, hi = model.layout[name]
        grad[lo:hi] = value.ravel()

    if arch == "linear":
        put("linear.weight", dlogits.T @ cache["x"])
        put("linear.bias", dlogits.sum(axis=0))
    elif arch == "mlp":
        a = cache["a"]
        w2 = _slot_view(model, "out.weight")
        put("out.weight", dlogits.T @ a)
        put("out.bias", dlogits.sum(axis=0))
        dpre = (dlogits @ w2) * (1.0 - a * a)
        put("hidden.weight", dpre.T @ cache["x"])
        put("hidden.bias", dpre.sum(axis=0))
    else:
        bag = cache["bag"]
        w = _slot_view(model, "out.weight")
        put("out.weight", dlogits.T @ bag)
        put("out.bias", dlogits.sum(axis=0))
        dbag = dlogits @ w
        demb = np.zeros((model.spec.vocab_size, model.spec.embed_dim))
        for i, ids in enumerate(cache["seqs"]):
            np.add.at(demb, ids, dbag[i] / len(ids))
        put("embedding.weight", demb)
    return grad


def forward_logits(model: ModelState, example: Example) -> np.ndarray:
    logits, _ = _forward_batch(model, [example])
    return logits[0]


def forward_logits_batch(model: ModelState, batch: Sequence[Example]) -> np.ndarray:
    logits, _ = _forward_batch(model, batch)
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def nll_loss(model: ModelState, example: Example) -> float:
    return float(nll_loss_batch(model, [example])[0])


def nll_loss_batch(model: ModelState, batch: Sequence[Example]) -> np.ndarray:
    logits, _ = _forward_batch(model, batch)
    labels = np.array([ex.label for ex in batch])
    logp = _log_softmax(logits)
    return -logp[np.arange(len(batch)), labels]


def zero_one_loss(model: ModelState, example: Example) -> int:
    return int(zero_one_loss_batch(model, [example])[0])


def zero_one_loss_batch(model: ModelState, batch: Sequence[Example]) -> np.ndarray:
    logits, _ = _forward_batch(model, batch)
    labels = np.array([ex.label for ex in batch])
    # np.argmax breaks ties toward the lowest class index
    preds = logits.argmax(axis=-1)
    return (preds != labels).astype(float)


def grad_params(
    model: ModelState, batch: Sequence[Example], weights: np.ndarray
) -> np.ndarray:
    """Gradient of sum_i weights[i] * nll(x_i, y_i) wrt the flat params."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(batch),):
        raise ValueError(
            f"weights length {weights.shape} does not match batch size {len(batch)}"
        )
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    logits, cache = _forward_batch(model, batch)
    labels = np.array([ex.label for ex in batch])
    probs = softmax(logits)
    dlogits = probs
    dlogits[np.arange(len(batch)), labels] -= 1.0
    dlogits *= weights[:, None]
    return _backward_from_dlogits(model, cache, dlogits)


def finite_diff_check(
    model: ModelState, batch: Sequence[Example], step: float = 1e-5
) -> float:
    """Max relative error of grad_params against central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = len(batch)
    weights = np.full(n, 1.0 / n)
    analytic = grad_params(model, batch, weights)
    worst = 0.0
    params = model.params
    for j in range(params.size):
        orig = params[j]
        params[j] = orig + step
        up = nll_loss_batch(model, batch).mean()
        params[j] = orig - step
        down = nll_loss_batch(model, batch).mean()
        params[j] = orig
        numeric = (up - down) / (2.0 * step)
        err = abs(numeric - analytic[j]) / max(1.0, abs(analytic[j]))
        worst = max(worst, err)
    return worst


def per_example_grads(model: ModelState, batch: Sequence[Example]) -> np.ndarray:
    """(n, num_params) matrix of individual nll gradients."""
    out = np.empty((len(batch), model.num_params))
    for i, ex in enumerate(batch):
        out[i] = grad_params(model, [ex], np.ones(1))
    return out


def fisher_diag(model: ModelState, dataset, sample_count: int, seed: int) -> np.ndarray:
    """Monte Carlo diagonal empirical Fisher: mean of squared nll gradients."""
    examples = dataset.examples if hasattr(dataset, "examples") else list(dataset)
    if len(examples) == 0:
        raise ValueError("fisher_diag requires a non-empty dataset")
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(examples), size=sample_count)
    total = np.zeros(model.num_params)
    for i in idx:
        g = grad_params(model, [examples[i]], np.ones(1))
        total += g * g
    return total / sample_count


def grad_wrt_embeddings(
    model: ModelState, example: Example, loss_kind: str = "nll"
) -> np.ndarray:
    """Per-position gradients of the loss wrt the input embedding vectors.

    loss_kind "nll" is -log p(y|x); "adversarial" is log(1 - p(y|x)), the
    log-probability of the model erring on the true label.
    """
    if model.spec.architecture != "embed_bag":
        raise UnsupportedArchitectureError(
            "grad_wrt_embeddings requires an embed_bag model"
        )
    if loss_kind not in ("nll", "adversarial"):
        raise ValueError(f"unknown loss_kind: {loss_kind!r}")
    logits, cache = _forward_batch(model, [example])
    probs = softmax(logits)[0]
    y = example.label
    if loss_kind == "nll":
        dlogits = probs.copy()
        dlogits[y] -= 1.0
    else:
        # d/dz_k log(1 - p_y) = -p_y (1[k=y] - p_k) / (1 - p_y)
        py = probs[y]
        dlogits = py * probs / max(1.0 - py, 1e-300)
        dlogits[y] -= py / max(1.0 - py, 1e-300)
    w = _slot_view(model, "out.weight")
    dbag = dlogits @ w
    ids = cache["seqs"][0]
    per_pos = np.tile(dbag / len(ids), (len(ids), 1))
    return per_pos
