import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from templet import autodiff as ad
from templet.autodiff import KVBank, LoRADelta, Tape, Tensor

from oracles import central_difference, dense_lora, mha_full_sequence, rel_err


def _rand(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def gradcheck(fn, inputs: list[np.ndarray], eps=1e-3, tol=1e-3):
    """Compare tape gradients of ``fn(*tensors)`` with central differences, in float64."""
    with ad.default_dtype(np.float64):
        leaves = [Tensor(x, trainable=True) for x in inputs]
        with Tape() as tape:
            out = fn(*leaves)
        grads = ad.backward(tape, out)
        for i, x in enumerate(inputs):
            def f(xi, i=i):
                args = [Tensor(v) for v in inputs]
                args[i] = Tensor(xi)
                return fn(*args).item()
            num = central_difference(f, x, eps)
            assert rel_err(grads[leaves[i]], num) <= tol, f"input {i}"


def test_matmul_identity():
    a = np.arange(6, dtype=np.float32).reshape(3, 2)
    assert np.array_equal(ad.matmul(np.eye(3, dtype=np.float32), a).data, a)


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_mse_of_self_is_zero():
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert ad.mse(x, x).item() == 0.0


def test_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    with pytest.raises(ad.ShapeError):
        ad.add(np.zeros((2, 3)), np.zeros((4, 3)))


def test_mse_rejects_nonfinite():
    with pytest.raises(ad.NonFiniteError):
        ad.mse(np.array([np.nan, 1.0]), np.zeros(2))


def test_backward_sum_wx():
    x = np.array([1.0, -2.0, 3.0], np.float32)
    w = Tensor([0.5, 0.5, 0.5], trainable=True)
    with Tape() as tape:
        loss = ad.sum(ad.mul(w, x))
    np.testing.assert_array_equal(ad.backward(tape, loss)[w], x)


def test_backward_mse_to_zero():
    wv = np.array([1.0, -2.0, 3.0, 0.5], np.float32)
    w = Tensor(wv, trainable=True)
    with Tape() as tape:
        loss = ad.mse(w, np.zeros(4))
    np.testing.assert_allclose(ad.backward(tape, loss)[w], 2 * wv / 4, rtol=1e-6)


def test_backward_rejects_nonscalar():
    w = Tensor(np.ones(3), trainable=True)
    with Tape() as tape:
        y = ad.mul(w, 2.0)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, y)


def test_non_trainable_leaves_get_no_gradient():
    w = Tensor(np.ones(3), trainable=True)
    c = Tensor(np.ones(3))
    with Tape() as tape:
        loss = ad.sum(ad.mul(w, c))
    g = ad.backward(tape, loss)
    assert w in g and c not in g


def test_no_recording_outside_tape():
    w = Tensor(np.ones(3), trainable=True)
    y = ad.mul(w, 2.0)
    with Tape() as tape:
        pass
    assert len(tape) == 0 and not tape.records(y)


def test_mlp_gradcheck():
    rng = np.random.default_rng(1)
    x = _rand(rng, 5, 4)
    target = _rand(rng, 5, 3)

    def mlp(w1, b1, w2, b2):
        h = ad.gelu(ad.linear(x, w1, b1))
        return ad.mse(ad.linear(h, w2, b2), target)

    gradcheck(mlp, [_rand(rng, 6, 4), _rand(rng, 6), _rand(rng, 3, 6), _rand(rng, 3)])


OPS = {
    "add": (lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum(ad.mul(ad.sub(a, b), a)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: ad.sum(ad.mul(a, b)), [(2, 3), (2, 3)]),
    "div": (lambda a, b: ad.sum(ad.div(a, ad.add(ad.mul(b, b), 1.0))), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: ad.sum(ad.gelu(ad.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "softmax": (lambda a, b: ad.sum(ad.mul(ad.softmax(a), b)), [(3, 5), (3, 5)]),
    "layernorm": (lambda a, g, b: ad.sum(ad.mul(ad.layernorm(a, g, b), a)), [(3, 6), (6,), (6,)]),
    "gelu": (lambda a: ad.sum(ad.gelu(a)), [(4, 5)]),
    "mean": (lambda a: ad.mean(ad.mul(a, a)), [(4, 5)]),
    "mse": (lambda a, b: ad.mse(a, b), [(3, 4), (3, 4)]),
    "reshape_transpose": (lambda a, b: ad.sum(ad.mul(ad.transpose(ad.reshape(a, (4, 3))), b)), [(2, 6), (3, 4)]),
    "concat_index": (lambda a, b: ad.sum(ad.mul(ad.index(ad.concat([a, b], 0), np.array([0, 2, 2, 4])), 1.5)),
                     [(2, 3), (3, 3)]),
    "sum_axis": (lambda a: ad.sum(ad.mul(ad.sum(a, axis=1), ad.sum(a, axis=1))), [(3, 4)]),
    "conv2d": (lambda x, w, b: ad.sum(ad.gelu(ad.conv2d(x, w, b, stride=2, pad=1))), [(1, 4, 4, 2), (3, 3, 2, 2), (2,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    gradcheck(fn, [_rand(rng, *s) for s in shapes])


def test_lora_linear_gradcheck():
    rng = np.random.default_rng(3)
    x = _rand(rng, 2, 4)

    def f(w, down, up):
        d = LoRADelta("t", down, up, alpha=3.0)
        return ad.sum(ad.gelu(ad.linear(x, w, None, [d])))

    gradcheck(f, [_rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 3, 2)])


def test_attention_injected_gradcheck():
    rng = np.random.default_rng(4)
    q = _rand(rng, 1, 3, 4)

    def f(k, v, bk, bv):
        return ad.sum(ad.mul(ad.attention_injected(q, k, v, KVBank(0, bk, bv), n_heads=2), q))

    gradcheck(f, [_rand(rng, 1, 3, 4), _rand(rng, 1, 3, 4), _rand(rng, 2, 4), _rand(rng, 2, 4)])


# --------------------------------------------------------------------------- attention


def test_empty_bank_bit_identical():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((2, 5, 8)).astype(np.float32) for _ in range(3))
    plain = ad.attention(q, k, v, 2).data
    empty = KVBank(0, np.zeros((0, 8)), np.zeros((0, 8)))
    assert np.array_equal(ad.attention_injected(q, k, v, empty, 2).data, plain)


def test_masked_out_bank_is_plain_attention():
    rng = np.random.default_rng(1)
    # positive queries make every score against a -1e9 key hugely negative
    q = np.abs(rng.standard_normal((1, 5, 8))).astype(np.float32) + 0.1
    k, v = (rng.standard_normal((1, 5, 8)).astype(np.float32) for _ in range(2))
    bank = KVBank(0, -1e9 * np.ones((3, 8)), np.zeros((3, 8)))
    plain = ad.attention(q, k, v, 1).data
    assert np.abs(ad.attention_injected(q, k, v, bank, 1).data - plain).max() <= 1e-5


def test_bank_three_plus_five_matches_oracle():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((1, 5, 8)).astype(np.float32) for _ in range(3))
    bk, bv = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    out = ad.attention_injected(q, k, v, KVBank(0, bk, bv), 2).data
    assert np.abs(out - mha_full_sequence(q, k, v, 2, bk, bv)).max() <= 1e-5


def test_head_width_mismatch():
    q = np.zeros((1, 5, 8), np.float32)
    with pytest.raises(ad.ShapeError):
        ad.attention_injected(q, q, q, KVBank(0, np.zeros((2, 6)), np.zeros((2, 6))), 2)


def test_batched_bank_per_sample():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal((3, 4, 8)).astype(np.float32) for _ in range(3))
    bk, bv = rng.standard_normal((3, 2, 8)), rng.standard_normal((3, 2, 8))
    out = ad.attention_injected(q, k, v, KVBank(0, bk, bv), 4).data
    for i in range(3):
        ref = mha_full_sequence(q[i:i + 1], k[i:i + 1], v[i:i + 1], 4, bk[i], bv[i])
        assert np.abs(out[i:i + 1] - ref).max() <= 1e-5


# --------------------------------------------------------------------------- LoRA


def test_lora_zero_up_and_zero_strength():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3)).astype(np.float32)
    d0 = LoRADelta("t", rng.standard_normal((2, 3)), np.zeros((4, 2)))
    assert np.array_equal(ad.apply_lora(w, [d0]).data, w)
    d1 = LoRADelta("t", rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))
    assert np.array_equal(ad.apply_lora(w, [d1], 0.0).data, w)


def test_two_rank2_deltas_match_dense():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((5, 4))
    fs = [(rng.standard_normal((2, 4)), rng.standard_normal((5, 2)), a, 1.0) for a in (2.0, 0.7)]
    with ad.default_dtype(np.float64):
        got = ad.apply_lora(w, [LoRADelta("t", d, u, a) for d, u, a, _ in fs]).data
    assert np.abs(got - dense_lora(w, fs)).max() <= 1e-6


def test_lora_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.apply_lora(np.zeros((4, 3)), [LoRADelta("t", np.zeros((2, 5)), np.zeros((4, 2)))])
    with pytest.raises(ad.ShapeError):
        LoRADelta("t", np.zeros((2, 5)), np.zeros((4, 3)))


def test_linear_lora_equals_dense_weight():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((5, 4)).astype(np.float32)
    d = LoRADelta("t", rng.standard_normal((2, 4)), rng.standard_normal((5, 2)), alpha=1.0)
    np.testing.assert_allclose(ad.linear(x, w, None, [d]).data, x @ ad.apply_lora(w, [d]).data.T, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_apply_lora_linear_in_strength(a, b, r, seed):
    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        w = rng.standard_normal((4, 3))
        ds = [LoRADelta("t", rng.standard_normal((r, 3)), rng.standard_normal((4, r)))]
        once = ad.apply_lora(w, ds, a + b).data
        twice = ad.apply_lora(ad.apply_lora(w, ds, a), ds, b).data
    assert np.abs(once - twice).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([0, 1, 3, 17]), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_injection_matches_concatenation(n_inj, batch, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((batch, 6, 16)).astype(np.float32) for _ in range(3))
    bk, bv = rng.standard_normal((n_inj, 16)), rng.standard_normal((n_inj, 16))
    out = ad.attention_injected(q, k, v, KVBank(0, bk, bv), 4).data
    assert np.abs(out - mha_full_sequence(q, k, v, 4, bk, bv)).max() <= 1e-5


def test_ops_deterministic():
    rng = np.random.default_rng(7)
    q = rng.standard_normal((2, 6, 8)).astype(np.float32)
    bank = KVBank(0, rng.standard_normal((3, 8)), rng.standard_normal((3, 8)))
    a = ad.attention_injected(q, q, q, bank, 2).data
    b = ad.attention_injected(q, q, q, bank, 2).data
    assert a.tobytes() == b.tobytes()


def test_tensor_data_immutable():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0
