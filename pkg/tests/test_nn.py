"""Gradient, optimizer, and checkpoint checks for the tensor engine.

Every differentiable op is validated against central finite differences:
relative error <= 1e-4 with step h = 1e-4, denominator max(|a|,|b|,1e-8).
"""

import math

import numpy as np
import pytest

from oikg import nn
from oikg.errors import (
    IncompatibleCheckpoint,
    InvalidArgument,
    InvalidState,
    NumericFailure,
    SchemaError,
    ShapeError,
)

FD_H = 1e-4
FD_TOL = 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_grads(make_loss, tensors, h=FD_H, tol=FD_TOL):
    """Compare analytic grads of a rebuilt-loss closure to central differences."""
    loss = make_loss()
    nn.backward(loss)
    analytic = []
    for t in tensors:
        assert t.grad is not None, "tracked tensor received no gradient"
        analytic.append(t.grad.copy())
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            assert rel_err(numeric, gflat[i]) <= tol, (
                f"grad mismatch at flat index {i}: analytic {gflat[i]}, numeric {numeric}")


def rand_tensor(rng, shape, requires_grad=True):
    return nn.Tensor(rng.normal(size=shape), requires_grad=requires_grad)


# ----------------------------------------------------------- forward values


def test_softmax_known_values():
    t = nn.softmax(nn.Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(t.data, [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7)) * 10.0
    p = nn.softmax(nn.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(5), atol=1e-12)
    shifted = nn.softmax(nn.Tensor(x + 123.456)).data
    np.testing.assert_allclose(p, shifted, atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    p = nn.softmax(nn.Tensor([1e4, 0.0, -1e4])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)


def test_cross_entropy_uniform_and_known_case():
    assert rel_err(nn.cross_entropy(nn.Tensor([0.0] * 4), 2).item(), math.log(4.0)) < 1e-12
    loss = nn.cross_entropy(nn.Tensor([0.0, math.log(3.0)]), 1)
    assert rel_err(loss.item(), -math.log(0.75)) < 1e-12


def test_cross_entropy_large_margin_vanishes():
    # target logit 50 above the rest: loss is effectively zero
    assert nn.cross_entropy(nn.Tensor([0.0, 50.0, 0.0]), 1).item() < 1e-20


def test_linear_identity_zero_and_hand_case():
    x = nn.Tensor([[1.0, 2.0]])
    eye = nn.Tensor(np.eye(2))
    zero_b = nn.Tensor(np.zeros(2))
    np.testing.assert_array_equal(nn.linear(x, eye, zero_b).data, x.data)
    b = nn.Tensor([1.0, 1.0])
    np.testing.assert_array_equal(
        nn.linear(nn.Tensor(np.zeros((3, 2))), eye, b).data, np.tile(b.data, (3, 1)))
    np.testing.assert_array_equal(nn.linear(x, eye, b).data, [[2.0, 3.0]])


def test_mlp_single_layer_and_relu_kill():
    x = nn.Tensor([[1.0, -1.0]])
    w = nn.Tensor([[2.0, 0.0], [0.0, 2.0]])
    b = nn.Tensor([0.5, 0.5])
    np.testing.assert_array_equal(nn.mlp(x, [(w, b)]).data,
                                  nn.linear(x, w, b).data)
    # strongly negative pre-activations: hidden dies, output = final bias
    w1 = nn.Tensor(-100.0 * np.ones((2, 3)))
    b1 = nn.Tensor(np.zeros(3))
    w2 = nn.Tensor(np.ones((3, 1)))
    b2 = nn.Tensor([7.0])
    out = nn.mlp(nn.Tensor([[1.0, 1.0]]), [(w1, b1), (w2, b2)])
    np.testing.assert_array_equal(out.data, [[7.0]])
    # 2-2-1 hand case: relu([1,-1]@[[1,0],[0,1]]) = [1,0]; [1,0]@[[2],[3]]+1 = 3
    out = nn.mlp(nn.Tensor([[1.0, -1.0]]),
                 [(nn.Tensor(np.eye(2)), nn.Tensor(np.zeros(2))),
                  (nn.Tensor([[2.0], [3.0]]), nn.Tensor([1.0]))])
    np.testing.assert_array_equal(out.data, [[3.0]])


def test_attention_singleton_key_and_identical_keys():
    rng = np.random.default_rng(21)
    q = nn.Tensor(rng.normal(size=(3, 4)))
    wq, wk, wv, wo = (nn.Tensor(rng.normal(size=(4, 4))) for _ in range(4))
    # one key/value row: weights are 1, output = (v wv) wo per query row
    v1 = nn.Tensor(rng.normal(size=(1, 4)))
    out = nn.attention(q, v1, v1, wq, wk, wv, wo, heads=2)
    expect = np.tile((v1.data @ wv.data) @ wo.data, (3, 1))
    np.testing.assert_allclose(out.data, expect, atol=1e-12)
    # identical key rows: uniform weights, output = mean of value rows, projected
    k2 = nn.Tensor(np.tile(rng.normal(size=(1, 4)), (2, 1)))
    v2 = nn.Tensor(rng.normal(size=(2, 4)))
    out2 = nn.attention(q, k2, v2, wq, wk, wv, wo, heads=2)
    expect2 = np.tile((v2.data @ wv.data).mean(axis=0) @ wo.data, (3, 1))
    np.testing.assert_allclose(out2.data, expect2, atol=1e-12)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(InvalidArgument):
        nn.cross_entropy(nn.Tensor([0.0, 1.0]), 2)
    with pytest.raises(ShapeError):
        nn.cross_entropy(nn.Tensor([[0.0, 1.0]]), 0)


def test_matmul_shape_errors():
    a = nn.Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        nn.matmul(a, nn.Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        nn.matmul(a, nn.Tensor(np.zeros(3)))


def test_linear_shape_errors():
    x = nn.Tensor(np.zeros((2, 3)))
    w = nn.Tensor(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        nn.linear(nn.Tensor(np.zeros((2, 5))), w)
    with pytest.raises(ShapeError):
        nn.linear(x, w, nn.Tensor(np.zeros(5)))


def test_embedding_lookup_and_bounds():
    table = nn.Tensor(np.arange(12.0).reshape(4, 3))
    out = nn.embedding([2, 0, 2], table)
    np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])
    with pytest.raises(InvalidArgument):
        nn.embedding([4], table)


def test_debug_finite_flag():
    nn.DEBUG_FINITE = True
    try:
        with pytest.raises(NumericFailure):
            nn.Tensor([np.inf, 1.0])
    finally:
        nn.DEBUG_FINITE = False


# --------------------------------------------------------------- gradients


def test_backward_requires_scalar_tracked_fresh_graph():
    w = nn.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(InvalidArgument):
        nn.backward(nn.relu(w))
    with pytest.raises(InvalidState):
        nn.backward(nn.tsum(nn.Tensor([1.0, 2.0])))  # constants only
    loss = nn.tsum(nn.mul(w, w))
    nn.backward(loss)
    np.testing.assert_allclose(w.grad, [2.0, 4.0], atol=1e-12)
    with pytest.raises(InvalidState):
        nn.backward(loss)


def test_grad_accumulates_across_reuse():
    w = nn.Tensor([3.0], requires_grad=True)
    loss = nn.tsum(nn.add(nn.mul(w, w), w))  # w^2 + w -> 2w + 1
    nn.backward(loss)
    np.testing.assert_allclose(w.grad, [7.0], atol=1e-12)


def test_fd_add_mul_scale_sub():
    rng = np.random.default_rng(1)
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (3, 4))
    c = nn.Tensor(rng.normal(size=(3, 4)))

    def make_loss():
        out = nn.sub(nn.scale(nn.mul(a, b), 1.7), a)
        return nn.tsum(nn.mul(out, c))

    check_grads(make_loss, [a, b])


def test_fd_bias_broadcast():
    rng = np.random.default_rng(2)
    x = rand_tensor(rng, (4, 3))
    b = rand_tensor(rng, (3,))
    c = nn.Tensor(rng.normal(size=(4, 3)))
    check_grads(lambda: nn.tsum(nn.mul(nn.add(x, b), c)), [x, b])


def test_fd_matmul_all_ranks():
    rng = np.random.default_rng(3)
    v = rand_tensor(rng, (3,))
    a = rand_tensor(rng, (3, 4))
    bm1 = rand_tensor(rng, (2, 3, 4))
    bm2 = rand_tensor(rng, (2, 4, 5))
    cv = nn.Tensor(rng.normal(size=(4,)))
    cb = nn.Tensor(rng.normal(size=(2, 3, 5)))
    check_grads(lambda: nn.tsum(nn.mul(nn.matmul(v, a), cv)), [v, a])
    check_grads(lambda: nn.tsum(nn.mul(nn.matmul(bm1, bm2), cb)), [bm1, bm2])


def test_fd_relu_softmax_mean():
    rng = np.random.default_rng(4)
    x = rand_tensor(rng, (3, 5))
    c = nn.Tensor(rng.normal(size=(3, 5)))

    def make_loss():
        return nn.tmean(nn.mul(nn.softmax(nn.relu(x)), c))

    check_grads(make_loss, [x])


def test_fd_concat_stack_reshape_transpose():
    rng = np.random.default_rng(5)
    r1 = rand_tensor(rng, (4,))
    r2 = rand_tensor(rng, (4,))
    r3 = rand_tensor(rng, (4,))
    c = nn.Tensor(rng.normal(size=(2, 12)))

    def make_loss():
        m = nn.stack_rows([r1, r2, r3])                     # (3, 4)
        m2 = nn.concat([m, nn.scale(m, 0.5)], axis=-1)      # (3, 8)
        m3 = nn.reshape(nn.transpose(m2, (1, 0)), (2, 12))  # (2, 12)
        return nn.tsum(nn.mul(m3, c))

    check_grads(make_loss, [r1, r2, r3])


def test_fd_embedding_with_repeats():
    rng = np.random.default_rng(6)
    table = rand_tensor(rng, (5, 3))
    c = nn.Tensor(rng.normal(size=(4, 3)))
    check_grads(lambda: nn.tsum(nn.mul(nn.embedding([1, 3, 1, 0], table), c)), [table])


def test_fd_mlp():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (3, 4))
    w1, b1 = rand_tensor(rng, (4, 6)), rand_tensor(rng, (6,))
    w2, b2 = rand_tensor(rng, (6, 2)), rand_tensor(rng, (2,))
    c = nn.Tensor(rng.normal(size=(3, 2)))

    def make_loss():
        return nn.tsum(nn.mul(nn.mlp(x, [(w1, b1), (w2, b2)]), c))

    check_grads(make_loss, [x, w1, b1, w2, b2])


def test_fd_layer_norm():
    rng = np.random.default_rng(8)
    x = rand_tensor(rng, (3, 6))
    gamma = nn.Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    beta = rand_tensor(rng, (6,))
    c = nn.Tensor(rng.normal(size=(3, 6)))
    check_grads(lambda: nn.tsum(nn.mul(nn.layer_norm(x, gamma, beta), c)), [x, gamma, beta])


def test_fd_attention_multihead():
    rng = np.random.default_rng(9)
    q = rand_tensor(rng, (3, 8))
    k = rand_tensor(rng, (4, 8))
    v = rand_tensor(rng, (4, 8))
    wq, wk, wv, wo = (rand_tensor(rng, (8, 8)) for _ in range(4))
    c = nn.Tensor(rng.normal(size=(3, 8)))

    def make_loss():
        out = nn.attention(q, k, v, wq, wk, wv, wo, heads=2)
        return nn.tsum(nn.mul(out, c))

    check_grads(make_loss, [q, k, v, wq, wk, wv, wo])


def test_fd_cross_entropy_chain():
    rng = np.random.default_rng(10)
    x = rand_tensor(rng, (5,))
    w = rand_tensor(rng, (5, 4))
    b = rand_tensor(rng, (4,))
    check_grads(lambda: nn.cross_entropy(nn.linear(x, w, b), 2), [x, w, b])


def test_attention_head_count_must_divide():
    rng = np.random.default_rng(11)
    t = rand_tensor(rng, (2, 6))
    ws = [rand_tensor(rng, (6, 6)) for _ in range(4)]
    with pytest.raises(ShapeError):
        nn.attention(t, t, t, *ws, heads=4)


# ------------------------------------------------------- parameters/optimizer


def test_init_params_bounds_and_bias_zero():
    store = nn.init_params([("w", (2, 8)), ("b", (8,))], seed=123)
    bound = math.sqrt(6.0 / (2 + 8))
    w = store["w"].data
    assert np.all(np.abs(w) <= bound)
    assert np.max(np.abs(w)) > 0.2 * bound
    np.testing.assert_array_equal(store["b"].data, np.zeros(8))


def test_init_params_per_name_reproducible():
    a = nn.init_params([("w", (3, 3)), ("x", (2, 2))], seed=5)
    b = nn.init_params([("x", (2, 2)), ("y", (4, 4)), ("w", (3, 3))], seed=5)
    np.testing.assert_array_equal(a["w"].data, b["w"].data)
    np.testing.assert_array_equal(a["x"].data, b["x"].data)
    c = nn.init_params([("w", (3, 3))], seed=6)
    assert not np.array_equal(a["w"].data, c["w"].data)


def test_duplicate_param_name_rejected():
    with pytest.raises(InvalidArgument):
        nn.init_params([("w", (2, 2)), ("w", (2, 2))], seed=0)


def test_optimizer_first_step_closed_form():
    store = nn.init_params([("w", (1,))], seed=0)
    store["w"].data[:] = 2.0
    store["w"].grad = np.array([3.0])
    nn.optimizer_step(store, lr=0.1)
    # first step with fresh moments moves by ~lr * sign(grad)
    assert abs(store["w"].data[0] - 1.9) < 1e-6
    assert store["w"].grad is None


def test_optimizer_zero_grad_leaves_params():
    store = nn.init_params([("w", (3, 3))], seed=1)
    before = store["w"].data.copy()
    store["w"].grad = np.zeros((3, 3))
    nn.optimizer_step(store, lr=0.5)
    np.testing.assert_array_equal(store["w"].data, before)


def test_optimizer_deterministic():
    def run():
        store = nn.init_params([("w", (4, 4))], seed=2)
        for step in range(5):
            loss = nn.tsum(nn.mul(store["w"], store["w"]))
            nn.backward(loss)
            nn.optimizer_step(store, lr=0.01)
        return store["w"].data.copy()

    np.testing.assert_array_equal(run(), run())


def test_clip_global_norm():
    store = nn.init_params([("a", (2,)), ("b", (2,))], seed=3)
    store["a"].grad = np.array([3.0, 0.0])
    store["b"].grad = np.array([0.0, 4.0])
    norm = nn.clip_global_norm(store, 2.5)
    assert abs(norm - 5.0) < 1e-12
    assert abs(store.global_grad_norm() - 2.5) < 1e-12
    # already under the limit: untouched
    norm2 = nn.clip_global_norm(store, 100.0)
    assert abs(norm2 - 2.5) < 1e-12
    assert abs(store.global_grad_norm() - 2.5) < 1e-12


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_byte_exact(tmp_path):
    store = nn.init_params([("m.w", (3, 5)), ("m.b", (5,)), ("scalar", ())], seed=7)
    store["scalar"].data = np.array(1.5)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    nn.save_checkpoint(p1, store)
    state = nn.load_checkpoint(p1)
    assert set(state) == {"m.w", "m.b", "scalar"}
    for name in state:
        np.testing.assert_array_equal(state[name], store[name].data)

    other = nn.init_params([("m.w", (3, 5)), ("m.b", (5,)), ("scalar", ())], seed=99)
    other.load_state(state)
    nn.save_checkpoint(p2, other)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(b"OIKG0001")


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(SchemaError):
        nn.load_checkpoint(p)
    good = tmp_path / "good.ckpt"
    nn.save_checkpoint(good, nn.init_params([("w", (2, 2))], seed=0))
    cut = good.read_bytes()[:-5]
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(cut)
    with pytest.raises(SchemaError):
        nn.load_checkpoint(trunc)


def test_load_state_mismatch_errors(tmp_path):
    store = nn.init_params([("w", (2, 2))], seed=0)
    with pytest.raises(IncompatibleCheckpoint):
        store.load_state({"w": np.zeros((3, 3))})
    with pytest.raises(IncompatibleCheckpoint):
        store.load_state({"other": np.zeros((2, 2))})
    with pytest.raises(IncompatibleCheckpoint):
        store.load_state({"w": np.zeros((2, 2)), "extra": np.zeros(1)})
