import numpy as np
import pytest

import koopctl.ndmath as nd


def fd_grad(forward, arr, eps=1e-5):
    """Central-difference gradient of a scalar-valued forward() w.r.t. arr.

    forward() must recompute from arr's current contents each call.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = forward()
        flat[i] = keep - eps
        lo = forward()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def away_from(vals, points, margin=0.02):
    """Nudge entries off the listed kink locations so FD stays valid."""
    for p in points:
        vals = np.where(np.abs(vals - p) < margin, vals + 3 * margin, vals)
    return vals


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = nd.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nd.matmul(nd.Tensor(np.eye(2)), m)
    assert np.array_equal(out.data, m.data)


def test_matmul_hand_case():
    a = nd.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nd.Tensor([[1.0], [1.0]])
    assert np.array_equal(nd.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_grad_is_ones_bt():
    rng = np.random.default_rng(0)
    a = nd.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = nd.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    nd.matmul(a, b).sum().backward()
    expected = np.ones((3, 2)) @ b.data.T
    assert np.allclose(a.grad, expected)

    fd = fd_grad(lambda: (a.data @ b.data).sum(), a.data)
    assert rel_err(a.grad, fd) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nd.DimensionError) as exc:
        nd.matmul(nd.Tensor(np.zeros((2, 3))), nd.Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


# ---------------------------------------------------------------- solve

def test_solve_identity():
    b = np.arange(6, dtype=float).reshape(3, 2)
    assert np.allclose(nd.solve(nd.Tensor(np.eye(3)), nd.Tensor(b)).data, b)


def test_solve_scalar_case():
    out = nd.solve(nd.Tensor([[2.0]]), nd.Tensor([[6.0]]))
    assert np.allclose(out.data, [[3.0]])


def test_solve_residual_bound():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    a = a @ a.T + 4.0 * np.eye(4)
    b = rng.normal(size=(4, 3))
    x = nd.solve(nd.Tensor(a), nd.Tensor(b)).data
    assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_solve_grad_matches_fd_on_spd():
    rng = np.random.default_rng(11)
    raw = rng.normal(size=(3, 3))
    a = nd.Tensor(raw @ raw.T + 3.0 * np.eye(3), requires_grad=True)
    b = nd.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    nd.square(nd.solve(a, b)).sum().backward()

    def forward():
        return (np.linalg.solve(a.data, b.data) ** 2).sum()

    assert rel_err(a.grad, fd_grad(forward, a.data)) < 1e-5
    assert rel_err(b.grad, fd_grad(forward, b.data)) < 1e-5


def test_solve_recovers_x():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(5, 5))
        a = raw @ raw.T + 5.0 * np.eye(5)
        x = rng.normal(size=(5, 2))
        got = nd.solve(nd.Tensor(a), nd.Tensor(a @ x)).data
        assert np.abs(got - x).max() < 1e-9


def test_solve_rejects_ill_conditioned():
    a = nd.Tensor([[1.0, 1.0], [1.0, 1.0 + 1e-15]])
    with pytest.raises(nd.NumericError) as exc:
        nd.solve(a, nd.Tensor(np.eye(2)))
    assert "cond" in str(exc.value)


def test_solve_rejects_singular_scalar():
    with pytest.raises(nd.NumericError):
        nd.solve(nd.Tensor([[0.0]]), nd.Tensor([[1.0]]))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = nd.Tensor(np.arange(5, dtype=float), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_square_at_three():
    x = nd.Tensor(3.0, requires_grad=True)
    nd.mul(x, x).backward()
    assert np.allclose(x.grad, 6.0)


def test_backward_rejects_non_scalar():
    x = nd.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(nd.UsageError):
        (x + 1.0).backward()


def test_backward_repeat_accumulates():
    x = nd.Tensor(2.0, requires_grad=True)
    y = nd.mul(x, x)
    y.backward()
    y.backward()
    assert np.allclose(x.grad, 8.0)


def test_backward_composite_chain_matches_fd():
    # feature map -> linear solve -> quadratic cost, the same op chain the
    # encoder/controller stack produces
    rng = np.random.default_rng(7)
    w = nd.Tensor(0.5 * rng.normal(size=(3, 4)), requires_grad=True)
    b = nd.Tensor(0.1 * rng.normal(size=4), requires_grad=True)
    x = nd.Tensor(rng.normal(size=(5, 3)))

    def graph():
        z = nd.tanh(nd.affine(x, w, b))
        gram = nd.matmul(nd.transpose(z), z) + nd.Tensor(4.0 * np.eye(4))
        k = nd.solve(gram, nd.transpose(z))
        return nd.square(k).sum()

    graph().backward()

    def forward():
        z = np.tanh(x.data @ w.data + b.data)
        k = np.linalg.solve(z.T @ z + 4.0 * np.eye(4), z.T)
        return (k ** 2).sum()

    assert rel_err(w.grad, fd_grad(forward, w.data)) < 1e-4
    assert rel_err(b.grad, fd_grad(forward, b.data)) < 1e-4


def test_dag_reuse_accumulates_k_contributions():
    rng = np.random.default_rng(3)
    xv = rng.normal(size=4)
    for k in (2, 3, 7):
        x = nd.Tensor(xv, requires_grad=True)
        h = nd.tanh(x)
        total = h
        for _ in range(k - 1):
            total = total + h
        total.sum().backward()

        single = nd.Tensor(xv, requires_grad=True)
        nd.tanh(single).sum().backward()
        assert np.array_equal(x.grad, k * single.grad)

        # unrolled copy graph: k independent leaves, grads summed
        copies = [nd.Tensor(xv, requires_grad=True) for _ in range(k)]
        acc = nd.tanh(copies[0])
        for c in copies[1:]:
            acc = acc + nd.tanh(c)
        acc.sum().backward()
        unrolled = sum(c.grad for c in copies)
        assert np.allclose(x.grad, unrolled, rtol=1e-12, atol=0)


# ---------------------------------------------------------------- svd_rank

def test_svd_rank_identity():
    assert nd.svd_rank(nd.Tensor(np.eye(3)), 1e-9) == 3


def test_svd_rank_zeros():
    assert nd.svd_rank(nd.Tensor(np.zeros((2, 2))), 1e-9) == 0


def test_svd_rank_near_singular():
    m = nd.Tensor([[1.0, 1.0], [1.0, 1.0 + 1e-12]])
    assert nd.svd_rank(m, 1e-9) == 1


def test_svd_rank_empty():
    assert nd.svd_rank(nd.Tensor(np.zeros((0, 3))), 1e-9) == 0


# ---------------------------------------------------------------- eigvals

def test_eigvals_diagonal():
    vals = nd.eigvals(nd.Tensor(np.diag([0.5, 1.2])))
    assert sorted(v.real for v in vals) == [0.5, 1.2]
    assert all(v.imag == 0 for v in vals)


def test_eigvals_rotation():
    vals = sorted(nd.eigvals(nd.Tensor([[0.0, -1.0], [1.0, 0.0]])), key=lambda v: v.imag)
    assert np.allclose([vals[0].real, vals[0].imag], [0.0, -1.0])
    assert np.allclose([vals[1].real, vals[1].imag], [0.0, 1.0])


def test_eigvals_trace_identity():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(5, 5))
        vals = nd.eigvals(nd.Tensor(m))
        assert abs(sum(vals) - np.trace(m)) < 1e-8


def test_eigvals_rejects_non_square():
    with pytest.raises(nd.DimensionError):
        nd.eigvals(nd.Tensor(np.zeros((2, 3))))


# ------------------------------------------------- primitive gradient sweep
#
# Every differentiable primitive against central finite differences
# (step 1e-5, rel err < 1e-5) across 20 seeds.

PRIMITIVE_CASES = {
    "add": (
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))],
        lambda a, b: nd.add(a, b),
    ),
    "sub": (
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=4)],
        lambda a, b: nd.sub(a, b),
    ),
    "mul": (
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))],
        lambda a, b: nd.mul(a, b),
    ),
    "neg": (lambda rng: [rng.normal(size=(2, 3))], nd.neg),
    "square": (lambda rng: [rng.normal(size=(2, 3))], nd.square),
    "tanh": (lambda rng: [rng.normal(size=(2, 3))], nd.tanh),
    "exp": (lambda rng: [rng.normal(size=(2, 3))], nd.exp),
    "log": (lambda rng: [np.abs(rng.normal(size=(2, 3))) + 0.5], nd.log),
    "softplus": (lambda rng: [2.0 * rng.normal(size=(2, 3))], nd.softplus),
    "clip": (
        lambda rng: [away_from(rng.uniform(-2, 2, size=(3, 3)), (-0.65, 0.72))],
        lambda a: nd.clip(a, -0.65, 0.72),
    ),
    "minimum": (
        lambda rng: [
            (a := rng.normal(size=(3, 3))),
            a + np.where(rng.random((3, 3)) < 0.5, -1.0, 1.0) * (0.05 + rng.random((3, 3))),
        ],
        nd.minimum,
    ),
    "maximum": (
        lambda rng: [
            (a := rng.normal(size=(3, 3))),
            a + np.where(rng.random((3, 3)) < 0.5, -1.0, 1.0) * (0.05 + rng.random((3, 3))),
        ],
        nd.maximum,
    ),
    "sum_axis": (
        lambda rng: [rng.normal(size=(3, 4))],
        lambda a: nd.tsum(a, axis=1),
    ),
    "sum_keepdims": (
        lambda rng: [rng.normal(size=(3, 4))],
        lambda a: nd.tsum(a, axis=0, keepdims=True),
    ),
    "mean": (lambda rng: [rng.normal(size=(3, 4))], lambda a: nd.tmean(a, axis=0)),
    "logsumexp": (
        lambda rng: [3.0 * rng.normal(size=(4, 5))],
        lambda a: nd.logsumexp(a, axis=1),
    ),
    "transpose": (lambda rng: [rng.normal(size=(3, 4))], nd.transpose),
    "reshape": (
        lambda rng: [rng.normal(size=(3, 4))],
        lambda a: nd.reshape(a, (2, 6)),
    ),
    "concat": (
        lambda rng: [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))],
        lambda a, b: nd.concat([a, b], axis=1),
    ),
    "diag_embed": (lambda rng: [rng.normal(size=4)], nd.diag_embed),
    "diag_part": (lambda rng: [rng.normal(size=(4, 4))], nd.diag_part),
    "matmul": (
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        nd.matmul,
    ),
    "affine": (
        lambda rng: [
            rng.normal(size=(3, 4)),
            rng.normal(size=(4, 2)),
            rng.normal(size=2),
        ],
        nd.affine,
    ),
    "solve": (
        lambda rng: [
            (r := rng.normal(size=(3, 3))) @ r.T + 3.0 * np.eye(3),
            rng.normal(size=(3, 2)),
        ],
        nd.solve,
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_fd(name):
    make_inputs, op = PRIMITIVE_CASES[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        arrays = make_inputs(rng)
        tensors = [nd.Tensor(a, requires_grad=True) for a in arrays]
        # weight the output so the scalarisation is not gradient-blind
        wshape = op(*[nd.Tensor(a) for a in arrays]).data.shape
        wgt = rng.normal(size=wshape)

        nd.tsum(nd.mul(op(*tensors), nd.Tensor(wgt))).backward()

        def forward():
            return (op(*[nd.Tensor(t.data) for t in tensors]).data * wgt).sum()

        for t in tensors:
            fd = fd_grad(forward, t.data)
            assert rel_err(t.grad, fd) < 1e-5, f"{name} seed {seed}"


# ---------------------------------------------------------------- plumbing

def test_no_grad_blocks_recording():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = nd.tanh(x)
    assert not y.requires_grad and y.is_leaf


def test_detach_breaks_graph():
    x = nd.Tensor(2.0, requires_grad=True)
    y = nd.mul(x, x).detach()
    assert not y.requires_grad
    nd.mul(nd.Tensor(3.0, requires_grad=True), y)  # usable downstream


def test_broadcast_grads_reduce_correctly():
    a = nd.Tensor(np.ones((3, 4)), requires_grad=True)
    b = nd.Tensor(np.ones((1, 4)), requires_grad=True)
    nd.mul(a + b, 2.0).sum().backward()
    assert a.grad.shape == (3, 4) and np.all(a.grad == 2.0)
    assert b.grad.shape == (1, 4) and np.all(b.grad == 6.0)


def test_minimum_tie_routes_to_first():
    a = nd.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = nd.Tensor(np.array([1.0, 5.0]), requires_grad=True)
    nd.minimum(a, b).sum().backward()
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_clip_gradient_mask_is_inclusive():
    x = nd.Tensor(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), requires_grad=True)
    nd.clip(x, -1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_grad_shapes_match_data():
    rng = np.random.default_rng(9)
    a = nd.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    nd.square(a).sum().backward()
    assert a.grad.shape == a.data.shape
