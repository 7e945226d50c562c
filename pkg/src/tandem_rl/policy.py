"""Two-branch scoring networks with hand-written backpropagation.

A network scores a pair of vectors. Both vectors go through the same
encoder ("siamese" branch); the two embeddings are concatenated and fed to a
discriminator head that outputs one logit. The accept probability is the
sigmoid of that logit.

All passes are batched over rows: ``forward`` takes ``(n, input_dim)``
arrays and ``backward`` sums parameter gradients over the batch.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from scipy.special import expit, log_expit

CHECKPOINT_VERSION = 1

Gradients = List[np.ndarray]


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int = 24
    hidden_dims: tuple = (32, 16)
    head_dims: tuple = (16, 1)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or not self.head_dims:
            raise ValueError("encoder and head need at least one layer each")
        if any(d < 1 for d in self.hidden_dims + self.head_dims):
            raise ValueError("layer widths must be positive")
        if self.head_dims[-1] != 1:
            raise ValueError("the head must end in a single logit")

    @property
    def embedding_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def head_input_dim(self) -> int:
        return 2 * self.embedding_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every layer, encoder first."""
        enc = [self.input_dim, *self.hidden_dims]
        head = [self.head_input_dim, *self.head_dims]
        return list(zip(enc[:-1], enc[1:])) + list(zip(head[:-1], head[1:]))

    @property
    def n_encoder_layers(self) -> int:
        return len(self.hidden_dims)

    def as_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "head_dims": list(self.head_dims)}


@dataclass
class PolicyNet:
    """Parameters of one scoring network.

    ``params`` is the flat list ``[W0, b0, W1, b1, ...]``, encoder layers
    first. Weight matrices have shape ``(fan_in, fan_out)``.
    """

    spec: LayerSpec
    params: list = field(repr=False)

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if len(self.params) != 2 * len(shapes):
            raise ValueError("parameter count does not match layer spec")
        for (fi, fo), w, b in zip(shapes, self.params[0::2], self.params[1::2]):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"bad parameter shape {w.shape}/{b.shape}, expected ({fi}, {fo})")

    @property
    def layers(self):
        return list(zip(self.params[0::2], self.params[1::2]))

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.spec, [p.copy() for p in self.params])

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class ForwardCache:
    """Activations kept for the backward pass.

    ``enc_a`` / ``enc_b`` / ``head`` hold the post-activation output of every
    layer, with the layer input at index 0. ``pre_*`` hold pre-activations.
    """

    input_a: np.ndarray
    input_b: np.ndarray
    enc_a: list
    enc_b: list
    pre_a: list
    pre_b: list
    head: list
    pre_head: list
    logit: np.ndarray
    prob: np.ndarray


def init_network(spec: LayerSpec, seed: int) -> PolicyNet:
    """Glorot-uniform weights, zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return PolicyNet(spec, params)


def _run_stack(layers, x, relu_last: bool):
    outs, pres = [x], []
    for i, (w, b) in enumerate(layers):
        z = x @ w + b
        pres.append(z)
        if i < len(layers) - 1 or relu_last:
            x = np.maximum(z, 0.0)
        else:
            x = z
        outs.append(x)
    return outs, pres


def _as_batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected input of dimension {dim}, got shape {x.shape}")
    return x


def forward(net: PolicyNet, input_a, input_b) -> tuple[np.ndarray, ForwardCache]:
    """Accept probabilities for a batch of input pairs.

    Single vectors are treated as a batch of one; the returned probability
    array then has shape ``(1,)``.
    """
    a = _as_batch(input_a, net.spec.input_dim)
    b = _as_batch(input_b, net.spec.input_dim)
    if a.shape[0] != b.shape[0]:
        raise ValueError("input_a and input_b must have the same number of rows")
    k = net.spec.n_encoder_layers
    layers = net.layers
    enc_a, pre_a = _run_stack(layers[:k], a, relu_last=True)
    enc_b, pre_b = _run_stack(layers[:k], b, relu_last=True)
    head, pre_head = _run_stack(layers[k:], np.concatenate((enc_a[-1], enc_b[-1]), axis=1),
                                relu_last=False)
    logit = head[-1][:, 0]
    prob = expit(logit)
    return prob, ForwardCache(a, b, enc_a, enc_b, pre_a, pre_b, head, pre_head, logit, prob)


def score(net: PolicyNet, input_a, input_b) -> np.ndarray:
    """Logits for a batch of pairs; used as detection scores."""
    return forward(net, input_a, input_b)[1].logit


def _backprop_stack(layers, outs, pres, delta, relu_last: bool, grads):
    """Backprop ``delta`` (gradient w.r.t. the stack output) and return the input gradient."""
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1 or relu_last:
            delta = delta * (pres[i] > 0.0)
        w, _ = layers[i]
        grads[2 * i] += outs[i].T @ delta
        grads[2 * i + 1] += delta.sum(axis=0)
        delta = delta @ w.T
    return delta


def backward(net: PolicyNet, cache: ForwardCache, dlogit) -> Gradients:
    """Parameter gradient of ``sum_i dlogit[i] * logit_i``.

    Both branches share the encoder, so their contributions are summed.
    """
    dlogit = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
    if dlogit.shape[0] != cache.logit.shape[0]:
        raise ValueError("dlogit must have one entry per batch row")
    k = net.spec.n_encoder_layers
    layers = net.layers
    enc_grads = [np.zeros_like(p) for p in net.params[:2 * k]]
    head_grads = [np.zeros_like(p) for p in net.params[2 * k:]]
    d_concat = _backprop_stack(layers[k:], cache.head, cache.pre_head, dlogit, False, head_grads)
    emb = net.spec.embedding_dim
    _backprop_stack(layers[:k], cache.enc_a, cache.pre_a, d_concat[:, :emb], True, enc_grads)
    _backprop_stack(layers[:k], cache.enc_b, cache.pre_b, d_concat[:, emb:], True, enc_grads)
    return enc_grads + head_grads


def log_prob(cache: ForwardCache, action) -> np.ndarray:
    """``log P(action)`` under the Bernoulli policy, computed from logits."""
    action = np.asarray(action)
    return np.where(action == 1, log_expit(cache.logit), log_expit(-cache.logit))


def grad_log_bernoulli(net: PolicyNet, cache: ForwardCache, action) -> Gradients:
    """Gradient of ``sum_i log P(action_i)``; the logit-level term is ``action - prob``."""
    return backward(net, cache, np.asarray(action, dtype=np.float64) - cache.prob)


def bce(cache: ForwardCache, target) -> np.ndarray:
    return -log_prob(cache, target)


def grad_bce(net: PolicyNet, cache: ForwardCache, target) -> Gradients:
    """Gradient of the summed binary cross-entropy against ``target``."""
    return backward(net, cache, cache.prob - np.asarray(target, dtype=np.float64))


def sgd_step(net: PolicyNet, grads: Gradients, learning_rate: float,
             direction: str = "descent") -> PolicyNet:
    """Return a new network moved by ``learning_rate * grads``."""
    if direction not in ("ascent", "descent"):
        raise ValueError("direction must be 'ascent' or 'descent'")
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradientError("non-finite gradient")
    sign = 1.0 if direction == "ascent" else -1.0
    return PolicyNet(net.spec, [p + sign * learning_rate * g for p, g in zip(net.params, grads)])


class Adam:
    """Adam with optional L2 penalty; keeps its own moment estimates."""

    def __init__(self, net: PolicyNet, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in net.params]
        self.v = [np.zeros_like(p) for p in net.params]
        self.t = 0

    def step(self, net: PolicyNet, grads: Gradients) -> PolicyNet:
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteGradientError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = []
        for i, (p, g) in enumerate(zip(net.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            new.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return PolicyNet(net.spec, new)


def sample_bernoulli(prob, rng: np.random.Generator):
    """Draw ``1`` with probability ``prob``; vectorized over arrays."""
    p = np.asarray(prob, dtype=np.float64)
    if np.any(~((p >= 0.0) & (p <= 1.0))):
        raise ValueError("probabilities must lie in [0, 1]")
    draws = (rng.random(p.shape) < p).astype(np.int64)
    return int(draws) if draws.ndim == 0 else draws


def write_npz(path, arrays: dict) -> None:
    """Uncompressed ``.npz`` archive with reproducible bytes.

    ``np.savez`` stamps every entry with the current time; here the zip
    timestamps are fixed so identical arrays give identical files.
    """
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.require(arr, requirements="C"), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def save_checkpoint(net: PolicyNet, path) -> None:
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "layer_spec": net.spec.as_dict()})
    arrays = {"header": np.array(header)}
    arrays.update({f"p{i}": np.asarray(p, dtype=np.float64) for i, p in enumerate(net.params)})
    write_npz(path, arrays)


def load_checkpoint(path) -> PolicyNet:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')!r}")
        spec = LayerSpec(**header["layer_spec"])
        n = 2 * len(spec.layer_shapes())
        params = [np.array(data[f"p{i}"], dtype=np.float64) for i in range(n)]
    return PolicyNet(spec, params)
