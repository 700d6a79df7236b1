"""Network forward/backward correctness and checkpoint round-trips."""

import numpy as np
import pytest

from phaser.errors import CheckpointError, ShapeMismatch, TrainingDiverged
from phaser.mlp import (Adam, Mlp, Sgd, entropy, load_checkpoint, log_softmax,
                        save_checkpoint, softmax)
from phaser.util import make_rng


def _fd_grad(net, x, loss_fn, eps=1e-6):
    """Central finite differences over the flat parameter vector."""
    theta = net.params_flat()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bump = theta.copy()
        bump[i] += eps
        net.set_params_flat(bump)
        hi = loss_fn(net.forward(x))
        bump[i] -= 2 * eps
        net.set_params_flat(bump)
        lo = loss_fn(net.forward(x))
        grad[i] = (hi - lo) / (2 * eps)
    net.set_params_flat(theta)
    return grad


def test_backward_matches_finite_differences():
    rng = make_rng(0)
    for trial in range(20):
        widths = [int(rng.integers(2, 6)) for _ in range(3)]
        net = Mlp(widths, seed=trial)
        x = rng.normal(size=(4, widths[0]))
        target = rng.normal(size=(4, widths[-1]))

        def loss_fn(out):
            return 0.5 * float(((out - target) ** 2).sum())

        out, cache = net.forward_cache(x)
        grads = net.backward(cache, out - target)
        analytic = net.grads_flat(grads)
        fd = _fd_grad(net, x, loss_fn)
        denom = max(1.0, float(np.abs(fd).max()))
        assert np.abs(analytic - fd).max() / denom < 1e-6


def test_forward_squeeze_and_batch_agree():
    net = Mlp((5, 7, 3), seed=1)
    x = make_rng(2).normal(size=5)
    single = net.forward(x)
    batched = net.forward(x[None, :])
    assert single.shape == (3,)
    assert batched.shape == (1, 3)
    assert np.array_equal(single, batched[0])


def test_shape_validation():
    with pytest.raises(ShapeMismatch):
        Mlp((4,))
    with pytest.raises(ShapeMismatch):
        Mlp((4, 0, 2))
    net = Mlp((4, 3), seed=0)
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros(5))
    with pytest.raises(ShapeMismatch):
        net.set_params_flat(np.zeros(net.params_flat().size + 1))


def test_params_flat_roundtrip_layout():
    net = Mlp((3, 4, 2), seed=3)
    flat = net.params_flat()
    # all weights first, then all biases
    w_sizes = sum(w.size for w in net.weights)
    assert np.array_equal(flat[:net.weights[0].size],
                          net.weights[0].ravel())
    assert np.array_equal(flat[w_sizes:w_sizes + 4], net.biases[0])
    other = Mlp((3, 4, 2), seed=99)
    other.set_params_flat(flat)
    x = make_rng(4).normal(size=(6, 3))
    assert np.array_equal(net.forward(x), other.forward(x))


def test_clone_is_independent():
    net = Mlp((3, 3), seed=5)
    twin = net.clone()
    assert np.array_equal(net.params_flat(), twin.params_flat())
    twin.weights[0][0, 0] += 1.0
    assert not np.array_equal(net.params_flat(), twin.params_flat())


def test_seeded_init_is_reproducible():
    a = Mlp((6, 8, 4), seed=11)
    b = Mlp((6, 8, 4), seed=11)
    c = Mlp((6, 8, 4), seed=12)
    assert np.array_equal(a.params_flat(), b.params_flat())
    assert not np.array_equal(a.params_flat(), c.params_flat())


def test_softmax_identities():
    rng = make_rng(6)
    logits = rng.normal(size=(5, 7)) * 10
    p = softmax(logits)
    assert np.allclose(p.sum(axis=-1), 1.0)
    assert np.allclose(np.log(p), log_softmax(logits))
    # shift invariance
    assert np.allclose(softmax(logits + 123.0), p)
    # entropy of a uniform distribution is log(k)
    assert np.isclose(entropy(np.zeros(7)), np.log(7))
    assert entropy(np.array([100.0, 0.0, 0.0])) < 1e-6


def test_sgd_step_is_exact():
    net = Mlp((2, 2), seed=7)
    before = net.params_flat()
    grads = [(np.ones_like(net.weights[0]), np.ones_like(net.biases[0]))]
    Sgd().step(net, grads, lr=0.5)
    assert np.allclose(net.params_flat(), before - 0.5)


def test_adam_first_step_direction():
    # with bias correction the first step is lr * sign(grad)
    net = Mlp((2, 3), seed=8)
    before = net.params_flat()
    g = make_rng(9).normal(size=(2, 3))
    grads = [(g, np.zeros(3))]
    Adam().step(net, grads, lr=0.01)
    moved = net.params_flat() - before
    w_moved = moved[:6].reshape(2, 3)
    assert np.allclose(w_moved, -0.01 * np.sign(g), atol=1e-6)


def test_adam_decreases_quadratic():
    net = Mlp((1, 1), seed=10)
    opt = Adam()
    x = np.ones((1, 1))
    for _ in range(200):
        out, cache = net.forward_cache(x)
        grads = net.backward(cache, out - 3.0)
        opt.step(net, grads, lr=0.05)
    assert abs(float(net.forward(x)[0, 0]) - 3.0) < 1e-2


def test_divergence_detection():
    net = Mlp((2, 2), seed=0)
    net.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        net.check_finite()


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp((4, 8, 3), seed=13)
    opt = Adam()
    x = make_rng(14).normal(size=(2, 4))
    out, cache = net.forward_cache(x)
    opt.step(net, net.backward(cache, out), lr=1e-3)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net, kind="ppo", optimizer=opt, seed=13, step=7)

    loaded, loaded_opt, meta = load_checkpoint(path)
    assert meta["kind"] == "ppo"
    assert meta["widths"] == [4, 8, 3]
    assert meta["seed"] == 13
    assert meta["step"] == 7
    assert np.array_equal(loaded.params_flat(), net.params_flat())
    assert isinstance(loaded_opt, Adam)
    assert loaded_opt.t == 1
    # optimizer state restored: next steps agree between nets
    g = [(np.full_like(net.weights[0], 0.1), np.zeros(8)),
         (np.full_like(net.weights[1], 0.1), np.zeros(3))]
    opt.step(net, g, lr=1e-3)
    loaded_opt.step(loaded, g, lr=1e-3)
    assert np.allclose(loaded.params_flat(), net.params_flat())


def test_checkpoint_sgd_and_none_optimizer(tmp_path):
    net = Mlp((2, 2), seed=0)
    p1 = tmp_path / "sgd.npz"
    save_checkpoint(p1, net, kind="dqn", optimizer=Sgd())
    _, opt, _ = load_checkpoint(p1)
    assert isinstance(opt, Sgd)
    p2 = tmp_path / "bare.npz"
    save_checkpoint(p2, net, kind="dqn")
    _, opt, meta = load_checkpoint(p2)
    assert opt is None
    assert meta["optimizer"] is None


def test_checkpoint_rejects_mismatches(tmp_path):
    net = Mlp((4, 8, 3), seed=0)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net, kind="pg")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_widths=(4, 8, 2))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_kind="dqn")
    load_checkpoint(path, expect_widths=(4, 8, 3), expect_kind="pg")


def test_checkpoint_rejects_bad_version_and_garbage(tmp_path):
    import json

    net = Mlp((2, 2), seed=0)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net, kind="pg")
    data = dict(np.load(path))
    meta = json.loads(bytes(data["meta"]).decode())
    meta["version"] = 99
    data["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
