"""Network assembly, credit-assignment strategies and the training loop.

A network is a convolutional stem (possibly empty) followed by one
contiguous fully-connected tail. The tail is split into *blocks*: each block
is one fully-connected layer plus the activation / batch-norm / dropout layers
that follow it. Convolutional layers are always trained with back-propagation;
the tail uses the configured strategy:

``bp``
    exact back-propagation everywhere.
``fa``
    each block receives ``e_next R^T`` with a fixed random ``R`` in place of
    the next layer's transposed weight.
``dfa`` / ``bdfa``
    each block receives ``e_L D^T`` straight from the output error (``D`` dense
    or +/-1 bit-packed). Blocks have no data dependency on each other.

Under ``fa``/``dfa``/``bdfa`` the conv stem's incoming error is the first
block's error pushed through the first FC layer's *forward* weight, then
ordinary back-propagation through the stem.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import feedback as fb
from . import layers as L
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError

STRATEGIES = ("bp", "fa", "dfa", "bdfa")
FEEDBACK_INITS = ("random", "product", "sign-product")
_VALID_INITS = {
    "bp": FEEDBACK_INITS,
    "fa": ("random", "product"),
    "dfa": ("random", "product"),
    "bdfa": FEEDBACK_INITS,
}
_STEM_ONLY = (L.CONV, L.MAXPOOL, L.FLATTEN)


@dataclass
class NetworkSpec:
    """Declarative network layout.

    ``layers`` holds descriptors such as ``"conv:16"`` (``conv:OUT[:K[:STRIDE[:PAD]]]``),
    ``"bn"``, ``"relu"``, ``"sigmoid"``, ``"tanh"``, ``"maxpool:2"``,
    ``"dropout:0.5"``, ``"flatten"`` and ``"fc:128"``.
    """

    layers: list
    input_shape: tuple
    classes: int
    fc_strategy: str = "bp"
    feedback_init: str = "random"
    feedback_scheme: str = "random_he"
    feedback_refresh: bool = False
    precision: str = "float32"

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.fc_strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.fc_strategy!r}; choose from {STRATEGIES}")
        if self.feedback_init not in _VALID_INITS[self.fc_strategy]:
            raise ConfigError(
                f"feedback init {self.feedback_init!r} is not valid for {self.fc_strategy}; "
                f"choose from {_VALID_INITS[self.fc_strategy]}"
            )
        if self.feedback_scheme not in fb.RANDOM_SCHEMES:
            raise ConfigError(f"unknown random feedback scheme {self.feedback_scheme!r}")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {tuple(T.DTYPES)}")

    @property
    def dtype(self):
        return T.DTYPES[self.precision]


def _parse(desc: str):
    parts = desc.strip().lower().split(":")
    kind, args = parts[0], parts[1:]
    try:
        nums = [float(a) for a in args]
    except ValueError:
        raise ConfigError(f"bad layer descriptor {desc!r}") from None
    return kind, nums


def build_layers(spec: NetworkSpec, seed: int = 0) -> list:
    rng = np.random.default_rng([seed, 0])
    dt = spec.dtype
    shape = spec.input_shape
    kinds = [_parse(d)[0] for d in spec.layers]
    out = []
    for i, desc in enumerate(spec.layers):
        kind, a = _parse(desc)
        nxt = kinds[i + 1] if i + 1 < len(kinds) else None
        if kind == "conv":
            if not a:
                raise ConfigError(f"{desc!r}: conv needs an output channel count")
            k = int(a[1]) if len(a) > 1 else 3
            stride = int(a[2]) if len(a) > 2 else 1
            pad = int(a[3]) if len(a) > 3 else k // 2
            if len(shape) != 3:
                raise ConfigError(f"{desc!r}: conv needs a C x H x W input, got {shape}")
            # a bias right before batch norm is cancelled by the mean subtraction
            layer = L.Conv2d(shape[0], int(a[0]), k, stride, pad, rng=rng, dtype=dt, bias=nxt != "bn")
        elif kind == "fc":
            if len(shape) != 1:
                raise ConfigError(f"{desc!r}: fc needs a flat input, got {shape}; add 'flatten'")
            layer = L.FullyConnected(shape[0], int(a[0]), rng=rng, dtype=dt)
        elif kind == "bn":
            layer = L.BatchNorm(shape[0], dtype=dt)
        elif kind in L.ACTIVATIONS:
            layer = L.Activation(kind)
        elif kind == "maxpool":
            layer = L.MaxPool(int(a[0]) if a else 2, int(a[1]) if len(a) > 1 else None)
        elif kind == "dropout":
            layer = L.Dropout(a[0] if a else 0.5)
        elif kind == "flatten":
            layer = L.Flatten()
        else:
            raise ConfigError(f"unknown layer kind in {desc!r}")
        try:
            shape = layer.output_shape(shape)
        except (DimensionError, ValueError) as exc:
            raise ConfigError(f"layer {i} ({desc}): {exc}") from None
        out.append(layer)
    _validate_layout(out, spec)
    return out


def _validate_layout(layers, spec):
    fc_idx = [i for i, l in enumerate(layers) if l.tag == L.FC]
    if not fc_idx:
        raise ConfigError("network needs at least one fc layer")
    if any(l.tag in _STEM_ONLY for l in layers[fc_idx[0]:]):
        raise ConfigError("conv/pool/flatten layers may not follow the first fc layer")
    last = layers[-1]
    if last.tag != L.FC:
        raise ConfigError("the last layer must be fc (logits)")
    if last.n_out != spec.classes:
        raise ConfigError(f"last fc width {last.n_out} != class count {spec.classes}")


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.layers = build_layers(spec, seed)
        self.fc_idx = [i for i, l in enumerate(self.layers) if l.tag == L.FC]
        self.feedback: dict[int, object] = {}
        self.build_feedback()

    @property
    def dtype(self):
        return self.spec.dtype

    @property
    def fc_layers(self):
        return [self.layers[i] for i in self.fc_idx]

    def blocks(self):
        """``(fc_position, fc_layer_index, tail_layer_indices)`` per tail block."""
        ends = self.fc_idx[1:] + [len(self.layers)]
        return [(k, i, list(range(i + 1, end))) for k, (i, end) in enumerate(zip(self.fc_idx, ends))]

    def forward(self, x, train=False, rng=None):
        x = T.as_tensor(x, self.dtype)
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    # -- feedback ------------------------------------------------------------

    def build_feedback(self):
        """(Re)build the fixed feedback matrices for the FC tail from current weights."""
        spec = self.spec
        fcs = self.fc_layers
        n_last = fcs[-1].n_out
        self.feedback = {}
        if spec.fc_strategy == "fa":
            # position k feeds the error of fc k back to the input of fc k
            for k in range(1, len(fcs)):
                w = fcs[k].weight
                if spec.feedback_init == "product":
                    m = fb.build_product_feedback([w])
                else:
                    m = fb.build_random_feedback(w.shape[1], w.shape[0], spec.feedback_scheme,
                                                 [self.seed, 1, k], self.dtype)
                self.feedback[k] = m
        elif spec.fc_strategy in ("dfa", "bdfa"):
            # position k feeds the output error to the output of fc k
            for k in range(len(fcs) - 1):
                if spec.feedback_init in ("product", "sign-product"):
                    m = fb.build_product_feedback([f.weight for f in fcs[k + 1:]])
                else:
                    m = fb.build_random_feedback(fcs[k].n_out, n_last, spec.feedback_scheme,
                                                 [self.seed, 1, k], self.dtype)
                if spec.fc_strategy == "bdfa":
                    m = fb.binarize_sign(m)
                self.feedback[k] = m

    def feedback_bytes(self) -> bytes:
        return b"".join(self.feedback[k].to_bytes() for k in sorted(self.feedback))


# -- loss and metrics --------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and the per-sample output error ``softmax - onehot``.

    The error is *not* divided by the batch size; the gradient step does that.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= c)):
        raise DataError(f"labels must be {n} integers in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, labels]))
    e = ez / s
    e[rows, labels] -= 1
    return loss, e


def topk_hits(logits, labels, k) -> int:
    """Samples whose label ranks within the ``k`` largest logits (ties go to the lower index)."""
    labels = np.asarray(labels)
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (idx < labels[:, None])).sum(axis=1)
    return int((rank < k).sum())


# -- strategies --------------------------------------------------------------------

def _stem_backward(net, e, first_fc, errors):
    for j in range(first_fc - 1, -1, -1):
        errors[j] = e
        e = net.layers[j].backward(e, propagate=j > 0)


def backward_bp(net: Network, e_last):
    errors = {}
    e = e_last
    for j in range(len(net.layers) - 1, -1, -1):
        errors[j] = e
        e = net.layers[j].backward(e, propagate=j > 0)
    return errors


def _block_backward(net, tail, e, errors):
    for j in reversed(tail):
        errors[j] = e
        e = net.layers[j].backward(e)
    return e


def _junction(net, delta_first, errors):
    first = net.fc_idx[0]
    if first > 0:
        e = net.layers[first].backward_error(delta_first)
        _stem_backward(net, e, first, errors)


def backward_fa(net: Network, e_last):
    blocks = net.blocks()
    errors = {}
    delta = e_last
    for k, i, tail in reversed(blocks):
        if k < len(blocks) - 1:
            if k + 1 not in net.feedback:
                raise ConfigError(f"missing feedback matrix for fc position {k + 1}")
            delta = _block_backward(net, tail, fb.fa_error(net.feedback[k + 1], delta), errors)
        errors[i] = delta
        net.layers[i].gradient(delta)
    _junction(net, errors[net.fc_idx[0]], errors)
    return errors


def backward_dfa(net: Network, e_last, order=None):
    """DFA / BDFA over the FC tail, BP through the conv stem.

    ``order`` optionally permutes the hidden blocks; results do not depend on it.
    """
    blocks = net.blocks()
    errors = {}
    k_last, i_last, _ = blocks[-1]
    errors[i_last] = e_last
    net.layers[i_last].gradient(e_last)
    hidden = list(range(len(blocks) - 1)) if order is None else list(order)
    if sorted(hidden) != list(range(len(blocks) - 1)):
        raise ValueError(f"order must permute the {len(blocks) - 1} hidden fc blocks")
    for k in hidden:
        if k not in net.feedback:
            raise ConfigError(f"missing feedback matrix for fc position {k}")
        _, i, tail = blocks[k]
        delta = _block_backward(net, tail, fb.apply_feedback(net.feedback[k], e_last), errors)
        errors[i] = delta
        net.layers[i].gradient(delta)
    _junction(net, errors[net.fc_idx[0]], errors)
    return errors


backward_cdfa = backward_dfa


def backward(net: Network, e_last, strategy=None, order=None):
    """Run the configured (or an overriding) strategy; returns errors keyed by layer index.

    The error stored for layer ``j`` is the error at that layer's *output*.
    """
    strategy = strategy or net.spec.fc_strategy
    if strategy == "bp":
        return backward_bp(net, e_last)
    if strategy == "fa":
        return backward_fa(net, e_last)
    if strategy in ("dfa", "bdfa"):
        return backward_dfa(net, e_last, order)
    raise ConfigError(f"unknown strategy {strategy!r}")


def collect_grads(net: Network) -> dict:
    return {key: layer.grads[name].copy() for key, layer, name in net.named_params()}


# -- optimisation ------------------------------------------------------------------

@dataclass
class Hyperparams:
    lr: float = 0.01
    batch: int = 100
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 1
    seed: int = 0
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 0  # epochs; 0 disables decay

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_decay_every < 0 or self.lr_decay_factor <= 0:
            raise ConfigError("invalid learning-rate decay")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every:
            return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)
        return self.lr


@dataclass
class TrainState:
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0


DECAYED = ("weight", "kernel")


def sgd_momentum_step(net: Network, state: TrainState, hyper: Hyperparams, lr=None):
    """``v <- mu v + G + lambda W`` (no decay on biases / BN), then ``W <- W - lr v``."""
    dt = net.dtype
    lr = dt(hyper.lr if lr is None else lr)
    mu = dt(hyper.momentum)
    lam = dt(hyper.weight_decay)
    for key, layer, name in net.named_params():
        w = layer.params[name]
        g = layer.grads[name]
        if g.shape != w.shape:
            raise DimensionError(f"{key}: gradient {g.shape} vs parameter {w.shape}")
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(w)
        v = mu * v + g
        if name in DECAYED:
            v = v + lam * w
        state.velocity[key] = v.astype(dt, copy=False)
        layer.params[name] = (w - lr * state.velocity[key]).astype(dt, copy=False)
    state.step += 1


def train_step(net: Network, x, y, state, hyper, lr, rng=None):
    logits = net.forward(x, train=True, rng=rng)
    loss, e = softmax_cross_entropy(logits, y)
    backward(net, e)
    sgd_momentum_step(net, state, hyper, lr)
    return loss, logits


def train_epoch(net: Network, ds: D.Dataset, hyper: Hyperparams, state: TrainState,
                policy: D.AugmentPolicy | None = None, on_step=None) -> dict:
    """One pass over ``ds`` in a ``(seed, epoch)``-determined order.

    ``on_step(step, x, y)`` is called before each update with the batch in use.
    """
    if len(ds) == 0:
        raise DataError("empty training set")
    spec = net.spec
    if spec.feedback_refresh and spec.feedback_init != "random" and state.epoch > 0:
        net.build_feedback()
    lr = hyper.lr_at(state.epoch)
    rng = np.random.default_rng([hyper.seed, 2, state.epoch])
    total_loss = 0.0
    top1 = top5 = 0
    k5 = min(5, spec.classes)
    for idx in D.batches(len(ds), hyper.batch, hyper.seed, state.epoch):
        x = ds.x[idx]
        if policy is not None:
            x = D.augment(x, policy, rng)
        y = ds.y[idx]
        if on_step is not None:
            on_step(state.step, x, y)
        loss, logits = train_step(net, x, y, state, hyper, lr, rng)
        total_loss += loss * len(idx)
        top1 += topk_hits(logits, y, 1)
        top5 += topk_hits(logits, y, k5)
    state.epoch += 1
    n = len(ds)
    return {"loss": total_loss / n, "top1": top1 / n, "top5": top5 / n, "lr": lr}


def evaluate(net: Network, ds: D.Dataset, batch: int = 500) -> dict:
    """Eval-mode loss and top-1 / top-5 accuracy (fractions)."""
    if len(ds) == 0:
        raise DataError("empty evaluation set")
    total = 0.0
    top1 = top5 = 0
    k5 = min(5, net.spec.classes)
    for s in range(0, len(ds), batch):
        x, y = ds.x[s : s + batch], ds.y[s : s + batch]
        logits = net.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits, y)
        total += loss * len(y)
        top1 += topk_hits(logits, y, 1)
        top5 += topk_hits(logits, y, k5)
    n = len(ds)
    return {"loss": total / n, "top1": top1 / n, "top5": top5 / n}


METRICS_HEADER = "epoch,phase,loss,top1,top5,lr,wall_ms"


def metrics_row(epoch, phase, m, lr, wall_ms=0):
    return f"{epoch},{phase},{m['loss']:.8f},{m['top1']:.6f},{m['top5']:.6f},{lr:.8g},{wall_ms}"


def fit(net: Network, train: D.Dataset, hyper: Hyperparams, test: D.Dataset | None = None,
        state: TrainState | None = None, policy=None, timing=False, on_epoch=None, on_step=None):
    """Train for ``hyper.epochs`` epochs; returns ``(state, metric rows)``.

    ``wall_ms`` is written as 0 unless ``timing`` is set, so reruns stay byte-identical.
    """
    state = state or TrainState()
    rows = [METRICS_HEADER]
    for _ in range(hyper.epochs):
        t0 = time.perf_counter()
        epoch = state.epoch
        m = train_epoch(net, train, hyper, state, policy, on_step)
        ms = int((time.perf_counter() - t0) * 1000) if timing else 0
        rows.append(metrics_row(epoch, "train", m, m["lr"], ms))
        if test is not None:
            t0 = time.perf_counter()
            tm = evaluate(net, test)
            ms = int((time.perf_counter() - t0) * 1000) if timing else 0
            rows.append(metrics_row(epoch, "test", tm, m["lr"], ms))
        if on_epoch is not None:
            on_epoch(epoch, m, tm if test is not None else None)
    return state, rows
