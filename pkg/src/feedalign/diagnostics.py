"""Verification instruments: finite differences, gradient alignment, storage accounting."""

from __future__ import annotations

import copy
import math
from fractions import Fraction

import numpy as np

from . import feedback as fb
from . import trainer as tr
from .errors import ConfigError, DimensionError, NumericError


def finite_diff_gradient(net, loss_fn, param_key: str, epsilon: float = 1e-5, entries=None):
    """Central-difference gradient of ``loss_fn(net)`` w.r.t. one parameter tensor.

    ``param_key`` is ``"<layer index>.<name>"`` as produced by ``named_params``.
    ``entries`` optionally restricts the check to a list of flat indices (the
    others are left at zero). The network itself is never modified.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError("epsilon must lie in [1e-7, 1e-3]")
    work = copy.deepcopy(net)
    lookup = {k: (layer, name) for k, layer, name in work.named_params()}
    if param_key not in lookup:
        raise ConfigError(f"unknown parameter {param_key!r}")
    layer, name = lookup[param_key]
    p = layer.params[name]
    flat = p.reshape(-1)
    grad = np.zeros(p.size, dtype=np.float64)
    for j in range(p.size) if entries is None else entries:
        orig = flat[j]
        flat[j] = orig + epsilon
        hi = loss_fn(work)
        flat[j] = orig - epsilon
        lo = loss_fn(work)
        flat[j] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite loss while perturbing {param_key}[{j}]")
        grad[j] = (hi - lo) / (2 * epsilon)
    return grad.reshape(p.shape)


def relative_error(a, n) -> float:
    """Normwise ``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(a, np.float64).ravel()
    n = np.asarray(n, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def batch_loss(x, y):
    def loss_fn(net):
        return tr.softmax_cross_entropy(net.forward(x, train=True), y)[0]
    return loss_fn


def gradcheck(net, x, y, epsilon=1e-5, fault=None):
    """Compare back-propagated gradients with central differences on every parameter.

    Returns ``[(param_key, relative_error)]``. ``fault`` names a parameter
    whose analytic gradient is deliberately corrupted (a test hook).
    """
    if net.dtype != np.float64:
        raise ConfigError("gradient checks need a 64-bit network")
    work = copy.deepcopy(net)
    logits = work.forward(x, train=True)
    _, e = tr.softmax_cross_entropy(logits, y)
    tr.backward_bp(work, e)
    loss_fn = batch_loss(x, y)
    rows = []
    for key, layer, name in work.named_params():
        analytic = layer.grads[name].copy()
        if key == fault:
            analytic.reshape(-1)[0] += 1e-2 * (1 + abs(analytic.reshape(-1)[0]))
        numeric = finite_diff_gradient(net, loss_fn, key, epsilon)
        rows.append((key, relative_error(analytic, numeric)))
    return rows


# -- alignment ---------------------------------------------------------------------

def alignment(grad_bp, grad_strategy):
    """Cosine between two gradients; returns ``(cosine, zero_norm_flag)``."""
    a = np.asarray(grad_bp, np.float64)
    b = np.asarray(grad_strategy, np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    a, b = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


def alignment_report(net, x, y, rng_seed=0):
    """Per-parameter cosine between the BP gradient and the configured strategy's gradient.

    Both gradients are taken at the current weights on the same batch; ``net``
    is not modified.
    """
    grads = {}
    for strategy in ("bp", None):
        work = copy.deepcopy(net)
        logits = work.forward(x, train=True, rng=np.random.default_rng(rng_seed))
        _, e = tr.softmax_cross_entropy(logits, y)
        tr.backward(work, e, strategy)
        grads[strategy] = tr.collect_grads(work)
    return [(key, *alignment(grads["bp"][key], grads[None][key])) for key in grads["bp"]]


# -- memory ------------------------------------------------------------------------

def reduction(rows: int, cols: int, precision="float32") -> Fraction:
    """Exact storage saving of a packed sign matrix over a dense one."""
    return 1 - Fraction(fb.packed_size(rows, cols), fb.dense_size_bytes(rows, cols, precision))


def format_percent(f: Fraction) -> str:
    return f"{float(f * 100):.1f}%"


def memory_report(net, baseline="float32"):
    """``(layer, metric, value)`` rows: parameter bytes and feedback storage per FC position.

    Feedback is reported against a dense baseline at ``baseline`` precision
    along with its sign-packed size; a BP network has no feedback rows.
    """
    rows = []
    for i, layer in enumerate(net.layers):
        n = sum(v.nbytes for v in layer.params.values())
        if n:
            rows.append((f"{i}:{layer.name}", "param_bytes", n))
    dense_total = packed_total = 0
    for k in sorted(net.feedback):
        m = net.feedback[k]
        r, c = m.shape
        dense = fb.dense_size_bytes(r, c, baseline)
        packed = fb.packed_size(r, c)
        dense_total += dense
        packed_total += packed
        tag = f"feedback{k}:{r}x{c}"
        rows += [
            (tag, "stored_bytes", m.nbytes),
            (tag, "dense_bytes", dense),
            (tag, "packed_bytes", packed),
            (tag, "reduction_pct", format_percent(reduction(r, c, baseline))),
            (tag, "reduction_exact", float(reduction(r, c, baseline) * 100)),
        ]
    rows += [("total", "feedback_dense_bytes", dense_total), ("total", "feedback_packed_bytes", packed_total)]
    if dense_total:
        total = 1 - Fraction(packed_total, dense_total)
        rows.append(("total", "reduction_pct", format_percent(total)))
    return rows


def rows_to_csv(rows, header="layer,metric,value") -> str:
    return "\n".join([header] + [",".join(str(v) for v in r) for r in rows]) + "\n"
