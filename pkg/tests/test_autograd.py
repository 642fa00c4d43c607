"""Tests for the tensor/tape core: oracle checks and gradient properties."""

import math

import numpy as np
import pytest

from microvlm import autograd as ag
from microvlm.autograd import Tape, Tensor


def matmul_triple_loop(a, b):
    """Brute-force reference: three nested loops, float64 accumulation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def central_fd(f, x, h=1e-3):
    """Central finite differences of scalar f at float64 array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4)
    return float(np.max(np.abs(a - b) / denom))


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.5, -2.0], [0.25, 7.0]], dtype=np.float32))
        eye = Tensor(np.eye(2, dtype=np.float32))
        out = ag.matmul(eye, a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        got = ag.matmul(Tensor(a), Tensor(b)).data
        want = matmul_triple_loop(a, b)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_scalar_case(self):
        out = ag.matmul(Tensor([[3.0]]), Tensor([[-2.0]]))
        assert out.data[0, 0] == pytest.approx(-6.0)

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 3, 4)).astype(np.float32)
        b = rng.standard_normal((5, 4, 2)).astype(np.float32)
        got = ag.matmul(Tensor(a), Tensor(b)).data
        for i in range(5):
            np.testing.assert_allclose(got[i], matmul_triple_loop(a[i], b[i]), rtol=1e-6, atol=1e-6)


class TestSoftmax:
    def test_uniform_on_zeros(self):
        out = ag.softmax(Tensor(np.zeros(4, dtype=np.float32)), axis=-1)
        np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-7)

    def test_log_ratios(self):
        x = Tensor(np.log(np.array([1.0, 2.0, 3.0], dtype=np.float64)))
        out = ag.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(6).astype(np.float32)
        a = ag.softmax(Tensor(x), axis=-1).data
        b = ag.softmax(Tensor(x + 37.5), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.standard_normal((4, 7)).astype(np.float32) * 10
            y = ag.softmax(Tensor(x), axis=-1).data
            assert y.min() >= 0
            np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-6)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        logits = np.full((3, 5), -1e4, dtype=np.float32)
        targets = np.array([1, 3, 0])
        for i, t in enumerate(targets):
            logits[i, t] = 1e4
        loss = ag.cross_entropy(Tensor(logits), targets, np.ones(3, bool))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits(self):
        loss = ag.cross_entropy(Tensor(np.zeros((4, 8), np.float32)), np.zeros(4, int), np.ones(4, bool))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-6)

    def test_mask_semantics(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((2, 6)).astype(np.float32)
        targets = np.array([2, 5])
        masked = ag.cross_entropy(Tensor(logits), targets, np.array([True, False]))
        only0 = ag.cross_entropy(Tensor(logits[:1]), targets[:1], np.array([True]))
        assert masked.item() == pytest.approx(only0.item(), abs=1e-7)

    def test_all_masked_is_error(self):
        with pytest.raises(ag.EmptyMaskError):
            ag.cross_entropy(Tensor(np.zeros((2, 4), np.float32)), np.zeros(2, int), np.zeros(2, bool))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ag.tsum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), np.float32))

    def test_chain_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 4))
        w = rng.standard_normal((4, 4))
        targets = rng.integers(0, 4, size=4)
        mask = np.ones(4, bool)
        wt = Tensor(w, requires_grad=True, dtype=np.float64)

        with Tape() as tape:
            h = ag.matmul(Tensor(a, dtype=np.float64), wt)
            loss = ag.cross_entropy(h, targets, mask)
        tape.backward(loss)

        def f():
            h = ag.matmul(Tensor(a, dtype=np.float64), Tensor(w, dtype=np.float64))
            return ag.cross_entropy(h, targets, mask).item()

        fd = central_fd(f, w)
        assert rel_err(wt.grad, fd) < 1e-3

    def test_independent_tapes_do_not_interfere(self):
        def run():
            x = Tensor(np.array([1.0, 2.0, 3.0], np.float32), requires_grad=True)
            with Tape() as tape:
                loss = ag.tsum(ag.mul(x, x))
            tape.backward(loss)
            return x.grad.copy()

        g1 = run()
        # Interleave: build two tapes, backward both, grads must match solo run.
        x1 = Tensor(np.array([1.0, 2.0, 3.0], np.float32), requires_grad=True)
        x2 = Tensor(np.array([1.0, 2.0, 3.0], np.float32), requires_grad=True)
        with Tape() as t1:
            l1 = ag.tsum(ag.mul(x1, x1))
        with Tape() as t2:
            l2 = ag.tsum(ag.mul(x2, x2))
        t2.backward(l2)
        t1.backward(l1)
        np.testing.assert_array_equal(x1.grad, g1)
        np.testing.assert_array_equal(x2.grad, g1)

    def test_non_scalar_root_is_error(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with Tape() as tape:
            y = ag.mul(x, x)
        with pytest.raises(ag.ShapeError):
            tape.backward(y)


def _op_cases(rng):
    """Randomized (name, param arrays, scalar fn builder) gradient-check cases."""
    m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
    cases = []

    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    cases.append(("matmul", [a, b], lambda ts: ag.tsum(ag.mul(ag.matmul(ts[0], ts[1]), ag.matmul(ts[0], ts[1])))))

    x = rng.standard_normal((m, n))
    y = rng.standard_normal((m, n))
    cases.append(("add_mul", [x, y], lambda ts: ag.tsum(ag.mul(ag.add(ts[0], ts[1]), ts[0]))))
    cases.append(("sub", [x, y], lambda ts: ag.tsum(ag.mul(ag.sub(ts[0], ts[1]), ag.sub(ts[0], ts[1])))))

    z = rng.standard_normal((m, n))
    cases.append(("gelu", [z], lambda ts: ag.tsum(ag.gelu(ts[0]))))
    cases.append(("exp", [z * 0.5], lambda ts: ag.tsum(ag.exp(ts[0]))))
    cases.append(("log", [np.abs(z) + 0.5], lambda ts: ag.tsum(ag.log(ts[0]))))
    cases.append(("softmax", [z], lambda ts: ag.tsum(ag.mul(ag.softmax(ts[0], axis=-1), ts[0]))))
    cases.append(("log_softmax", [z], lambda ts: ag.tsum(ag.mul(ag.log_softmax(ts[0], axis=-1), ts[0]))))

    g = rng.standard_normal(n)
    bb = rng.standard_normal(n)
    cases.append(("layer_norm", [z, g, bb], lambda ts: ag.tsum(ag.mul(ag.layer_norm(ts[0], ts[1], ts[2]), ts[0]))))

    table = rng.standard_normal((6, n))
    ids = rng.integers(0, 6, size=m)
    cases.append(("embedding", [table], lambda ts: ag.tsum(ag.mul(ag.embedding(ts[0], ids), ag.embedding(ts[0], ids)))))

    logits = rng.standard_normal((m, 5))
    targets = rng.integers(0, 5, size=m)
    mask = np.ones(m, bool)
    cases.append(("cross_entropy", [logits], lambda ts: ag.cross_entropy(ts[0], targets, mask)))

    w = rng.standard_normal((m, n))
    cases.append(("minimum", [x, w], lambda ts: ag.tsum(ag.minimum(ts[0], ts[1]))))
    cases.append(("clip", [x], lambda ts: ag.tsum(ag.clip(ts[0], -0.5, 0.5))))
    cases.append(("mean", [x], lambda ts: ag.tmean(ag.mul(ts[0], ts[0]))))

    rows = rng.integers(0, m, size=4)
    cols = rng.integers(0, n, size=4)
    cases.append(("gather_rows", [x], lambda ts: ag.tsum(ag.mul(ag.gather_rows(ts[0], rows, cols), ag.gather_rows(ts[0], rows, cols)))))
    cases.append(("reshape_transpose", [x], lambda ts: ag.tsum(ag.mul(ag.transpose(ag.reshape(ts[0], (n, m)), (1, 0)), ts[0]))))
    return cases


def test_gradients_match_finite_differences_property():
    """Analytic vs central FD on randomized small shapes, >= 100 cases."""
    rng = np.random.default_rng(12345)
    checked = 0
    for round_ in range(8):
        for name, arrays, build in _op_cases(rng):
            tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
            with Tape() as tape:
                loss = build(tensors)
            tape.backward(loss)

            for idx, arr in enumerate(arrays):
                def f(arr=arr, idx=idx, arrays=arrays, build=build):
                    ts = [Tensor(a, dtype=np.float64) for a in arrays]
                    return build(ts).item()

                fd = central_fd(f, arr)
                err = rel_err(tensors[idx].grad, fd)
                assert err < 1e-3, f"{name} input {idx}: rel err {err}"
                checked += 1
    assert checked >= 100


def test_forward_determinism():
    rng1 = np.random.default_rng(777)
    rng2 = np.random.default_rng(777)

    def run(rng):
        a = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        b = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        return ag.softmax(ag.matmul(a, b), axis=-1).data

    r1, r2 = run(rng1), run(rng2)
    assert r1.tobytes() == r2.tobytes()


def test_assert_finite():
    ag.assert_finite(Tensor(np.ones(3)))
    with pytest.raises(FloatingPointError):
        ag.assert_finite(np.array([1.0, np.nan]), "probe")
