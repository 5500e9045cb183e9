import numpy as np
import pytest

from pbnet import autodiff as ad
from pbnet import tensor_core as tc
from pbnet.errors import ShapeError, UsageError

from oracles import central_diff


def grad_of(tape, loss, node):
    return ad.backward(tape, loss)[node.id]


def test_leaf_sum_squares_gradient():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, -2.0, 3.0], requires_grad=True)
    np.testing.assert_array_equal(grad_of(t, ad.record_sum_squares(x), x), [2, -4, 6])


def test_leaf_without_grad_absent():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, 2.0], requires_grad=True)
    c = ad.leaf(t, [3.0, 4.0])
    grads = ad.backward(t, ad.record_dot(x, c))
    assert c.id not in grads and x.id in grads


def test_leaf_ids_dense_and_distinct():
    t = ad.Tape()
    a = ad.leaf(t, [1.0])
    b = ad.leaf(t, [1.0])
    c = ad.record_add(a, b)
    assert [a.id, b.id, c.id] == [0, 1, 2]
    assert all(p < c.id for p in c.parents)


def test_leaf_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.leaf(ad.Tape(), [np.nan])


def test_nodes_are_immutable():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, 2.0])
    with pytest.raises(AttributeError):
        x.value = np.zeros(2)
    with pytest.raises(ValueError):
        x.value[0] = 5.0


class TestDetach:
    def test_severs_flow(self):
        t = ad.Tape()
        x = ad.leaf(t, [1.0, 2.0], requires_grad=True)
        g = ad.record_scale(x, 3.0)
        d = ad.detach(g, requires_grad=True)
        loss = ad.record_sum_squares(d)
        grads = ad.backward(t, loss)
        assert x.id not in grads and g.id not in grads
        np.testing.assert_array_equal(grads[d.id], 2 * d.value)

    def test_copies_value_exactly(self):
        t = ad.Tape()
        x = ad.leaf(t, [0.1, 1 / 3])
        d = ad.detach(ad.record_scale(x, 7.0))
        assert d.value.tobytes() == (7.0 * x.value).tobytes()
        assert d.op == "leaf" and d.parents == ()

    def test_of_leaf_is_fresh_leaf(self):
        t = ad.Tape()
        x = ad.leaf(t, [1.0], requires_grad=True)
        d = ad.detach(x)
        assert d.id != x.id and not d.requires_grad


class TestLocalRules:
    def test_mul_scalars(self):
        t = ad.Tape()
        a = ad.leaf(t, [3.0], True)
        b = ad.leaf(t, [4.0], True)
        grads = ad.backward(t, ad.record_mul(a, b))
        assert grads[a.id][0] == 4.0 and grads[b.id][0] == 3.0

    def test_soft_threshold_rules(self):
        t = ad.Tape()
        z = ad.leaf(t, [1.0, 0.1], True)
        tau = ad.leaf(t, [0.25], True)
        out = ad.record_soft_threshold(z, tau)
        # upstream gradient (1, 1) via dot with ones
        grads = ad.backward(t, ad.record_dot(out, ad.constant(t, [1.0, 1.0])))
        np.testing.assert_array_equal(grads[z.id], [1, 0])
        np.testing.assert_array_equal(grads[tau.id], [-1])

    def test_soft_threshold_kink_derivative_zero(self):
        t = ad.Tape()
        z = ad.leaf(t, [0.5, -0.5], True)
        tau = ad.leaf(t, [0.5], True)
        grads = ad.backward(t, ad.record_dot(ad.record_soft_threshold(z, tau), ad.constant(t, [1.0, 1.0])))
        np.testing.assert_array_equal(grads[z.id], [0, 0])
        np.testing.assert_array_equal(grads[tau.id], [0])

    def test_composite_chain_rule(self):
        t = ad.Tape()
        x = ad.leaf(t, [2.0, 0.1], True)
        loss = ad.record_sum_squares(ad.record_soft_threshold(x, 0.5))
        np.testing.assert_array_equal(grad_of(t, loss, x), [3.0, 0.0])

    def test_matvec_adjoints(self):
        t = ad.Tape()
        A = ad.leaf(t, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], True)
        x = ad.leaf(t, [1.0, -1.0], True)
        v = ad.constant(t, [1.0, 0.0, 2.0])
        grads = ad.backward(t, ad.record_dot(ad.record_matvec(A, x), v))
        np.testing.assert_array_equal(grads[A.id], np.outer([1, 0, 2], [1, -1]))
        np.testing.assert_array_equal(grads[x.id], [11, 14])


class TestErrors:
    def test_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ShapeError):
            ad.record_add(ad.leaf(t, [1.0]), ad.leaf(t, [1.0, 2.0]))
        with pytest.raises(ShapeError):
            ad.record_scale(ad.leaf(t, [1.0, 2.0]), ad.leaf(t, [1.0, 2.0]))

    def test_cross_tape(self):
        with pytest.raises(UsageError):
            ad.record_add(ad.leaf(ad.Tape(), [1.0]), ad.leaf(ad.Tape(), [1.0]))

    def test_non_scalar_loss(self):
        t = ad.Tape()
        x = ad.leaf(t, [1.0, 2.0], True)
        with pytest.raises(UsageError):
            ad.backward(t, x)
        with pytest.raises(UsageError):
            ad.backward_with_graph(t, x, [x])


def test_backward_unreachable_leaf_absent():
    t = ad.Tape()
    x = ad.leaf(t, [1.0], True)
    y = ad.leaf(t, [2.0], True)
    grads = ad.backward(t, ad.record_sum_squares(x))
    assert y.id not in grads


def test_fan_out_accumulates():
    t = ad.Tape()
    x = ad.leaf(t, [1.5, -2.0], True)
    loss = ad.record_dot(x, ad.record_add(x, x))  # 2 * ||x||^2
    np.testing.assert_array_equal(grad_of(t, loss, x), 4 * x.value)


def test_backward_leaves_tape_untouched():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, 2.0], True)
    loss = ad.record_sum_squares(ad.record_soft_threshold(x, 0.5))
    before = [n.value.tobytes() for n in t.nodes]
    ad.backward(t, loss)
    assert len(t) == len(before)
    assert [n.value.tobytes() for n in t.nodes] == before


def _random_graph(seed, size=None):
    """Build a random composition of every primitive; returns (tape, loss, leaves, builder)."""
    rng = tc.Rng(seed)
    J = 1 + rng.randbelow(6)
    K = 1 + rng.randbelow(6)
    values = {
        "A": tc.randn_matrix(rng, J, K),
        "x": tc.randn_vector(rng, K),
        "v": tc.randn_vector(rng, J),
        "s": tc.randn_vector(rng, 1),
        "tau": np.array([0.3 + 0.5 * rng.uniform()]),
    }

    def build(vals, tape):
        L = {k: ad.leaf(tape, v, True) for k, v in vals.items()}
        y = ad.record_matvec(L["A"], L["x"])
        y = ad.record_sub(ad.record_mul(y, y), L["v"])
        u = ad.record_matvec_t(L["A"], y)
        u = ad.record_scale(u, L["s"])
        u = ad.record_soft_threshold(u, L["tau"])
        w = ad.record_add(ad.record_outer(L["v"], u), L["A"])
        loss = ad.record_add(ad.record_sum_squares(ad.record_matvec(w, L["x"])),
                             ad.record_dot(u, L["x"]))
        return loss, L, [n for n in tape.nodes if n.op == "soft_threshold"]

    return values, build


def _kink_clear(values, build, margin=1e-3):
    t = ad.Tape()
    _, L, st = build(values, t)
    for node in st:
        z = t.nodes[node.parents[0]].value
        tau = t.nodes[node.parents[1]].value[0]
        if np.min(np.abs(np.abs(z) - tau)) < margin:
            return False
    return True


@pytest.mark.parametrize("seed", range(25))
def test_random_graph_gradients_match_finite_differences(seed):
    values, build = _random_graph(seed)
    if not _kink_clear(values, build):
        pytest.skip("kink-adjacent instance")
    t = ad.Tape()
    loss, L, _ = build(values, t)
    grads = ad.backward(t, loss)
    for name, node in L.items():
        def f(v, name=name):
            vals = dict(values)
            vals[name] = v
            return build(vals, ad.Tape())[0].value[0]
        fd = central_diff(f, values[name])
        auto = grads.get(node.id, np.zeros_like(values[name]))
        err = np.abs(auto - fd) / np.maximum(np.maximum(np.abs(auto), np.abs(fd)), 1e-6)
        assert np.max(err) < 1e-6, name


@pytest.mark.parametrize("seed", range(25))
def test_graph_backward_matches_plain_backward(seed):
    values, build = _random_graph(seed)
    t = ad.Tape()
    loss, L, _ = build(values, t)
    plain = ad.backward(t, loss)
    nodes = list(L.values())
    traced = ad.backward_with_graph(t, loss, nodes)
    for node, g in zip(nodes, traced):
        assert g.value.tobytes() == plain[node.id].tobytes()


def test_hessian_vector_product_of_sum_squares():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, -2.0, 0.5], True)
    (g,) = ad.backward_with_graph(t, ad.record_sum_squares(x), [x])
    v = np.array([0.3, 1.0, -2.0])
    hv = ad.backward(t, ad.record_dot(g, ad.constant(t, v)))[x.id]
    np.testing.assert_array_equal(hv, 2 * v)


def test_second_derivative_of_linear_function_vanishes():
    t = ad.Tape()
    x = ad.leaf(t, [1.0, 2.0], True)
    (g,) = ad.backward_with_graph(t, ad.record_dot(x, ad.constant(t, [3.0, -1.0])), [x])
    np.testing.assert_array_equal(g.value, [3, -1])
    grads = ad.backward(t, ad.record_dot(g, ad.constant(t, [1.0, 1.0])))
    assert x.id not in grads


@pytest.mark.parametrize("seed", range(10))
def test_hvp_of_random_quadratic_matches_finite_differences(seed):
    rng = tc.Rng(100 + seed)
    n = 2 + rng.randbelow(5)
    M = tc.randn_matrix(rng, n, n)
    b = tc.randn_vector(rng, n)
    x0 = tc.randn_vector(rng, n)
    v = tc.randn_vector(rng, n)

    def gradient(x):
        t = ad.Tape()
        xn = ad.leaf(t, x, True)
        f = ad.record_add(ad.record_sum_squares(ad.record_matvec(ad.constant(t, M), xn)),
                          ad.record_dot(xn, ad.constant(t, b)))
        return t, xn, f

    t, xn, f = gradient(x0)
    (g,) = ad.backward_with_graph(t, f, [xn])
    hv = ad.backward(t, ad.record_dot(g, ad.constant(t, v)))[xn.id]

    def first_order(x):
        t, xn, f = gradient(x)
        return ad.backward(t, f)[xn.id]

    h = 1e-6
    fd = (first_order(x0 + h * v) - first_order(x0 - h * v)) / (2 * h)
    np.testing.assert_allclose(hv, fd, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(hv, 2 * M.T @ M @ v, rtol=1e-12, atol=1e-12)


def test_backward_with_graph_unreachable_is_none():
    t = ad.Tape()
    x = ad.leaf(t, [1.0], True)
    y = ad.leaf(t, [1.0], True)
    assert ad.backward_with_graph(t, ad.record_sum_squares(x), [y]) == [None]


def test_replay_reproduces_values():
    values, build = _random_graph(3)
    t = ad.Tape()
    loss, L, _ = build(values, t)
    ad.backward_with_graph(t, loss, list(L.values()))
    replayed = t.replay()
    assert [v.tobytes() for v in replayed] == [n.value.tobytes() for n in t.nodes]
