"""Dense ReLU network with manual backprop, float64 throughout.

Small nets on small batches; numpy matmul is the only heavy op, so
there is no reason for anything fancier. He-uniform initialization
from a seeded generator keeps runs reproducible. Checkpoints are .npz
archives with a JSON meta entry; loading validates layer widths.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError, ShapeMismatch, TrainingDiverged
from .util import make_rng

CHECKPOINT_VERSION = 1


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(logits):
    """Shannon entropy of softmax(logits) along the last axis."""
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def assert_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged("non-finite values in parameters or loss")


class Mlp:
    """Fully connected net: ReLU hidden layers, linear output."""

    def __init__(self, widths, seed=0, rng=None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ShapeMismatch(f"bad layer widths {self.widths}")
        rng = rng if rng is not None else make_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.widths, self.widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit,
                                            size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeMismatch(
                f"input shape {x.shape} does not match width {self.in_width}")
        return x, squeeze

    def forward(self, x):
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x):
        """Returns (output, cache) where cache feeds backward()."""
        x, squeeze = self._prep(x)
        activations = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            activations.append(h)
        out = activations[-1][0] if squeeze else activations[-1]
        return out, (activations, pre, squeeze)

    def backward(self, cache, dout):
        """Gradients of a scalar loss given d(loss)/d(output).
        Returns [(dW, db), ...] parallel to the layers."""
        activations, pre, squeeze = cache
        dout = np.asarray(dout, dtype=np.float64)
        if squeeze and dout.ndim == 1:
            dout = dout[None, :]
        grads = [None] * len(self.weights)
        dz = dout
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = activations[i]
            grads[i] = (a_prev.T @ dz, dz.sum(axis=0))
            if i > 0:
                dz = (dz @ self.weights[i].T) * (pre[i - 1] > 0.0)
        return grads

    # -- parameter plumbing (finite differences, optimizers, io) ----------

    def params_flat(self):
        return np.concatenate(
            [w.ravel() for w in self.weights] +
            [b.ravel() for b in self.biases])

    def set_params_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for w in self.weights:
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = flat[pos:pos + b.size]
            pos += b.size
        if pos != flat.size:
            raise ShapeMismatch("flat parameter vector has wrong length")

    def grads_flat(self, grads):
        return np.concatenate(
            [dw.ravel() for dw, _ in grads] + [db.ravel() for _, db in grads])

    def clone(self):
        other = Mlp(self.widths, seed=0)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def check_finite(self):
        assert_finite(*self.weights, *self.biases)


class Sgd:
    """Plain gradient step: params -= lr * grad."""

    kind = "sgd"

    def step(self, net, grads, lr):
        for (w, b), (dw, db) in zip(zip(net.weights, net.biases), grads):
            w -= lr * dw
            b -= lr * db
        net.check_finite()

    def state_arrays(self):
        return {}

    def meta(self):
        return {"type": self.kind}


class Adam:
    kind = "adam"

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def _init_like(self, net):
        self.m = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(net.weights, net.biases)]
        self.v = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(net.weights, net.biases)]

    def step(self, net, grads, lr):
        if self.m is None:
            self._init_like(net)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for i, (dw, db) in enumerate(grads):
            for j, (param, grad) in enumerate(
                    ((net.weights[i], dw), (net.biases[i], db))):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                param -= lr * scale * m / (np.sqrt(v) + self.eps)
        net.check_finite()

    def state_arrays(self):
        if self.m is None:
            return {}
        out = {}
        for i in range(len(self.m)):
            out[f"adam_mw{i}"] = self.m[i][0]
            out[f"adam_mb{i}"] = self.m[i][1]
            out[f"adam_vw{i}"] = self.v[i][0]
            out[f"adam_vb{i}"] = self.v[i][1]
        return out

    def meta(self):
        return {"type": self.kind, "t": self.t, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


def save_checkpoint(path, net, *, kind, optimizer=None, seed=None, step=0):
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "widths": list(net.widths),
        "seed": seed,
        "step": int(step),
        "optimizer": optimizer.meta() if optimizer else None,
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    np.savez(path, meta=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, *, expect_widths=None, expect_kind=None):
    """Returns (net, optimizer | None, meta). Raises CheckpointError on
    malformed files or width/kind mismatches."""
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} unsupported")
    widths = meta["widths"]
    if expect_widths is not None and list(expect_widths) != list(widths):
        raise CheckpointError(
            f"checkpoint widths {widths} do not match expected "
            f"{list(expect_widths)}")
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise CheckpointError(
            f"checkpoint kind {meta.get('kind')!r} != {expect_kind!r}")
    net = Mlp(widths, seed=0)
    try:
        for i in range(len(widths) - 1):
            net.weights[i][...] = data[f"w{i}"]
            net.biases[i][...] = data[f"b{i}"]
    except Exception as exc:
        raise CheckpointError(f"checkpoint arrays malformed: {exc}") from None
    optimizer = None
    opt_meta = meta.get("optimizer")
    if opt_meta and opt_meta["type"] == "adam":
        optimizer = Adam(beta1=opt_meta["beta1"], beta2=opt_meta["beta2"],
                         eps=opt_meta["eps"])
        optimizer.t = opt_meta["t"]
        if "adam_mw0" in data:
            optimizer._init_like(net)
            for i in range(len(optimizer.m)):
                optimizer.m[i] = (data[f"adam_mw{i}"], data[f"adam_mb{i}"])
                optimizer.v[i] = (data[f"adam_vw{i}"], data[f"adam_vb{i}"])
    elif opt_meta and opt_meta["type"] == "sgd":
        optimizer = Sgd()
    return net, optimizer, meta
