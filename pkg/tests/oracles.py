"""Independent reference implementations used as test oracles.

Everything here is deliberately written without the library's autodiff or
forward-pass code paths: plain loops and closed-form numpy, so agreement is
evidence rather than tautology.
"""

import numpy as np

from kml.tensor import Tensor, constant


def central_fd(loss_fn, params, h=1e-5):
    """Central finite differences of a scalar loss over a list of leaf tensors.

    loss_fn takes a list of Tensors (same structure as params) and returns a
    scalar Tensor. Gradients are evaluated by value substitution, never
    through the graph under test.
    """
    grads = []
    base = [p.data.copy() for p in params]
    for pi in range(len(params)):
        g = np.zeros_like(base[pi])
        flat = base[pi].reshape(-1)
        for i in range(flat.size):
            up, dn = None, None
            for sgn in (+1.0, -1.0):
                v = base[pi].copy().reshape(-1)
                v[i] += sgn * h
                trial = [constant(b) for b in base]
                trial[pi] = constant(v.reshape(base[pi].shape))
                val = loss_fn(trial).item()
                if sgn > 0:
                    up = val
                else:
                    dn = val
            g.reshape(-1)[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst elementwise |a - n| / max(|n|, floor) across a list of arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        rel = np.abs(a - n) / np.maximum(np.abs(n), floor)
        worst = max(worst, float(rel.max()))
    return worst


def loop_conv2d(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation, the slow reference."""
    n, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, ho, wo))
    for ni in range(n):
        for c in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, c, i, j] = (patch * w[c]).sum() + b[c]
    return out


def straightline_conv_forward(x, layers, stride=2, padding=1):
    """Re-implementation of the conv trunk: conv, relu, global average pool."""
    h = x
    for w, b in layers:
        h = loop_conv2d(h, w, b, stride=stride, padding=padding)
        h = np.maximum(h, 0.0)
    return h.mean(axis=(2, 3))


def straightline_dense_forward(x, layers):
    """Re-implementation of the dense trunk (weights stored output-major)."""
    h = x.reshape(x.shape[0], -1)
    for w, b in layers:
        h = np.maximum(h @ w.T + b, 0.0)
    return h


def softmax_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def protonet_loss(s_emb, s_lab, q_emb, q_lab, n_way):
    """Prototype classification loss from raw embeddings."""
    protos = np.stack([s_emb[s_lab == c].mean(axis=0) for c in range(n_way)])
    d2 = ((q_emb[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return softmax_ce(-d2, q_lab)
