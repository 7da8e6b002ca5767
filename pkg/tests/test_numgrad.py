import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetvae import numgrad as ng
from hetvae.numgrad import GradTape, ParamStore, Tensor


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def fd_error(fn, shapes, seed=0, lo=-2.0, hi=2.0):
    store = ParamStore()
    for i, shape in enumerate(shapes):
        store.add(f"x{i}", rand(shape, seed + i, lo, hi))
    return ng.finite_diff_check(lambda p: fn(*[p[f"x{i}"] for i in range(len(shapes))]), store)


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


# -- forward values ------------------------------------------------------------


def test_matmul_matches_triple_loop_bitwise():
    a, b = rand((5, 7), 1), rand((7, 3), 2)
    assert np.array_equal(ng.matmul(a, b).value, triple_loop_matmul(a, b))


def test_matmul_rows_do_not_depend_on_batch_composition():
    a, b = rand((9, 6), 3), rand((6, 4), 4)
    full = ng.matmul(a, b).value
    for i in range(9):
        assert np.array_equal(ng.matmul(a[i : i + 1], b).value[0], full[i])


def test_matmul_shape_error():
    with pytest.raises(ng.NumgradError):
        ng.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_linear_error_names_both_shapes():
    with pytest.raises(ng.NumgradError, match=r"\(2, 3\).*\(4, 5\)"):
        ng.linear(np.ones((2, 3)), np.ones((4, 5)))


def test_linear_zero_weight_gives_bias():
    out = ng.linear(rand((3, 2)), np.zeros((2, 4)), np.arange(4.0)).value
    assert np.array_equal(out, np.tile(np.arange(4.0), (3, 1)))


@pytest.mark.parametrize(
    "kind,ref",
    [("sin", np.sin), ("exp", np.exp), ("relu", lambda x: np.maximum(x, 0.0)), ("softplus", lambda x: np.log1p(np.exp(x)))],
)
def test_primitives_match_numpy(kind, ref):
    x = rand((4, 5), 7)
    np.testing.assert_allclose(ng.primitive(kind, x).value, ref(x), rtol=1e-14, atol=1e-15)


def test_softplus_large_input_is_finite():
    out = ng.softplus(np.array([800.0, -800.0])).value
    assert np.all(np.isfinite(out))
    assert out[0] == 800.0 and out[1] >= 0.0


def test_logsumexp_stable_for_large_inputs():
    x = np.array([1000.0, 1000.0])
    assert ng.reduce("logsumexp", x).value == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)


def test_reduction_over_empty_axis_raises():
    with pytest.raises(ng.EmptyReductionError):
        ng.reduce("max", np.zeros((3, 0)), axis=1)


def test_unknown_primitive_rejected():
    with pytest.raises(ng.NumgradError):
        ng.primitive("tanh", np.zeros(2))


def test_softmax_sums_to_one():
    s = ng.softmax(rand((3, 6), 9) * 100).value
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-15)


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["sin", "exp", "softplus"])
def test_primitive_gradients(kind):
    assert fd_error(lambda x: ng.sum_(ng.primitive(kind, x)), [(3, 4)]) < 1e-6


def test_relu_gradient_away_from_kink():
    # keep inputs away from zero so the central difference never straddles the kink
    def fn(x):
        return ng.sum_(ng.mul(ng.relu(x), x))

    store = ParamStore()
    x = rand((3, 4), 5)
    x[np.abs(x) < 0.1] = 0.5
    store.add("x", x)
    assert ng.finite_diff_check(lambda p: fn(p["x"]), store) < 1e-6


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add", lambda a, b: ng.sum_(ng.square(ng.add(a, b))), [(3, 4), (4,)]),
        ("sub", lambda a, b: ng.sum_(ng.square(ng.sub(a, b))), [(3, 4), (3, 1)]),
        ("mul", lambda a, b: ng.sum_(ng.mul(a, b)), [(2, 3), (2, 3)]),
        ("div", lambda a, b: ng.sum_(ng.div(a, ng.add(ng.square(b), 1.0))), [(2, 3), (2, 3)]),
        ("log", lambda a: ng.sum_(ng.log(ng.add(ng.square(a), 0.5))), [(5,)]),
        ("sqrt", lambda a: ng.sum_(ng.sqrt(ng.add(ng.square(a), 0.5))), [(5,)]),
        ("matmul", lambda a, b: ng.sum_(ng.square(ng.matmul(a, b))), [(2, 3, 4), (4, 5)]),
        ("linear", lambda x, w, b: ng.sum_(ng.softplus(ng.linear(x, w, b))), [(2, 2), (2, 2), (2,)]),
        ("logsumexp", lambda a: ng.sum_(ng.reduce("logsumexp", a, axis=1)), [(3, 5)]),
        ("max", lambda a: ng.sum_(ng.square(ng.reduce("max", a, axis=0))), [(4, 3)]),
        ("softmax", lambda a, b: ng.sum_(ng.mul(ng.softmax(a), b)), [(3, 4), (3, 4)]),
        ("getitem", lambda a: ng.sum_(ng.square(ng.getitem(a, (slice(None), [0, 2, 2])))), [(3, 4)]),
        ("concat", lambda a, b: ng.sum_(ng.sin(ng.concat([a, b], axis=0))), [(2, 3), (1, 3)]),
        ("stack", lambda a, b: ng.sum_(ng.square(ng.stack([a, b], axis=1))), [(2, 3), (2, 3)]),
        ("transpose", lambda a, b: ng.sum_(ng.mul(ng.transpose(a, (1, 0, 2)), b)), [(2, 3, 4), (3, 2, 4)]),
        ("broadcast", lambda a: ng.sum_(ng.sin(ng.broadcast_to(ng.expand_dims(a, 0), (3, 4)))), [(4,)]),
        ("where", lambda a: ng.sum_(ng.square(ng.where(np.array([True, False, True]), a, 2.0))), [(3,)]),
    ],
)
def test_op_gradients_match_finite_differences(name, fn, shapes):
    assert fd_error(fn, shapes) < 1e-6


def test_composite_linear_softplus_sum():
    # linear -> softplus -> sum on a random 2x2 input
    store = ParamStore()
    store.add("w", rand((2, 2), 11))
    store.add("b", rand((2,), 12))
    x = rand((2, 2), 13)
    assert ng.finite_diff_check(lambda p: ng.sum_(ng.softplus(ng.linear(x, p["w"], p["b"]))), store) < 1e-6


def test_backward_zero_for_untouched_and_missing_params():
    store = ParamStore()
    store.add("a", np.ones(3))
    store.add("b", np.ones(2))
    with GradTape() as tape:
        p = tape.watch(store)
        loss = ng.sum_(ng.mul(p["a"], 2.0))
    grads = ng.backward(tape, loss)
    assert list(grads) == ["a", "b"]
    assert np.array_equal(grads["a"], np.full(3, 2.0))
    assert np.array_equal(grads["b"], np.zeros(2))


def test_backward_rejects_non_scalar():
    store = ParamStore()
    store.add("a", np.ones(3))
    with GradTape() as tape:
        p = tape.watch(store)
        out = ng.mul(p["a"], 2.0)
    with pytest.raises(ng.NumgradError):
        ng.backward(tape, out)


def test_frozen_parameters_get_no_gradient_entry():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("frozen", np.ones(2), trainable=False)
    with GradTape() as tape:
        p = tape.watch(store)
        loss = ng.sum_(ng.mul(p["a"], p["frozen"]))
    assert set(ng.backward(tape, loss)) == {"a"}


def test_no_tape_means_untracked():
    out = ng.sin(Tensor(np.ones(2)))
    assert not out.tracked


def test_finite_diff_check_rejects_non_finite():
    store = ParamStore()
    store.add("a", np.array([-1.0]))
    with pytest.raises(ng.NumgradError):
        ng.finite_diff_check(lambda p: ng.sum_(ng.log(p["a"])), store)


@given(st.lists(st.floats(-2, 2), min_size=1, max_size=6), st.floats(-3, 3))
def test_property_square_sum_gradient(xs, shift):
    store = ParamStore()
    store.add("x", np.array(xs))
    err = ng.finite_diff_check(lambda p: ng.sum_(ng.square(ng.add(p["x"], shift))), store)
    assert err < 1e-6


# -- optimizer -------------------------------------------------------------------


def adam_oracle(x, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adam_first_step_moves_by_lr():
    store = ParamStore()
    store.add("a", np.array([1.0, -1.0]))
    state = ng.AdamState.fresh(store, lr=0.1)
    ng.adam_step(state, store, {"a": np.array([3.0, -0.5])})
    np.testing.assert_allclose(store["a"], [0.9, -0.9], atol=1e-7)
    assert state.step == 1


def test_adam_matches_scalar_oracle():
    grads = np.random.default_rng(0).normal(size=(20, 3))
    store = ParamStore()
    store.add("a", np.zeros(3))
    state = ng.AdamState.fresh(store, lr=1e-2)
    for g in grads:
        ng.adam_step(state, store, {"a": g})
    for j in range(3):
        assert store["a"][j] == pytest.approx(adam_oracle(0.0, grads[:, j], 1e-2, 0.9, 0.999, 1e-8), abs=1e-14)


def test_adam_errors_name_parameter():
    store = ParamStore()
    store.add("alpha", np.zeros(2))
    state = ng.AdamState.fresh(store)
    with pytest.raises(ng.NumgradError, match="alpha"):
        ng.adam_step(state, store, {})
    with pytest.raises(ng.NumgradError, match="alpha"):
        ng.adam_step(state, store, {"alpha": np.zeros(3)})


def test_adam_leaves_frozen_parameters():
    store = ParamStore()
    store.add("a", np.zeros(2))
    store.add("f", np.ones(2), trainable=False)
    state = ng.AdamState.fresh(store, lr=0.5)
    ng.adam_step(state, store, {"a": np.ones(2)})
    assert np.array_equal(store["f"], np.ones(2))


def test_adam_state_json_round_trip():
    store = ParamStore()
    store.add("a", np.zeros(2))
    state = ng.AdamState.fresh(store)
    ng.adam_step(state, store, {"a": np.array([0.3, -0.2])})
    back = ng.AdamState.from_json(json.loads(json.dumps(state.to_json())))
    assert back.step == 1 and np.array_equal(back.m["a"], state.m["a"]) and np.array_equal(back.v["a"], state.v["a"])


# -- parameters and checkpoints -----------------------------------------------------


def test_param_store_rejects_shape_change_and_duplicates():
    store = ParamStore()
    store.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))
    with pytest.raises(ng.NumgradError):
        store["a"] = np.zeros(3)


def test_checkpoint_round_trip_is_exact(tmp_path):
    store = ParamStore()
    store.add("enc.w", rand((3, 2), 1) * 1e-3)
    store.add("dec.b", np.array([np.pi, -1e-300, 1e300]))
    store.add("frozen", np.ones(1), trainable=False)
    path = tmp_path / "ck.json"
    ng.save_checkpoint(path, store, {"note": "x"})
    back, meta = ng.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert back.names() == store.names()
    for name, arr in store.items():
        assert np.array_equal(back[name], arr)
    assert not back.is_trainable("frozen")


@pytest.mark.parametrize(
    "op,arg",
    [(ng.log, np.array([1.0, 0.0])), (ng.sqrt, np.array([-1.0])), (lambda x: ng.div(1.0, x), np.array([0.0]))],
)
def test_domain_errors_instead_of_non_finite_values(op, arg):
    with pytest.raises(ng.NumgradError):
        op(arg)


def test_small_documented_values():
    assert ng.softplus(np.array([0.0])).value[0] == pytest.approx(0.6931471805599453, abs=1e-16)
    assert ng.reduce("logsumexp", np.zeros(2)).value == pytest.approx(np.log(2.0), abs=1e-16)
    assert ng.reduce("sum", np.array([1.0, 2.0, 3.0])).value == 6.0
    assert np.array_equal(ng.relu(np.array([-1.0, 2.0])).value, [0.0, 2.0])


def test_product_gradient_example():
    store = ParamStore()
    store.add("x", np.array(2.0))
    store.add("y", np.array(3.0))
    _, grads = ng.value_and_grad(lambda p: ng.mul(p["x"], p["y"]), store)
    assert grads["x"] == 3.0 and grads["y"] == 2.0


def test_scalar_adam_example():
    store = ParamStore()
    store.add("a", np.array(0.0))
    state = ng.AdamState.fresh(store, lr=0.1)
    ng.adam_step(state, store, {"a": np.array(1.0)})
    assert store["a"] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradients_is_identity():
    store = ParamStore()
    store.add("a", rand((2, 2), 3))
    before = store["a"].copy()
    state = ng.AdamState.fresh(store)
    for _ in range(5):
        ng.adam_step(state, store, {"a": np.zeros((2, 2))})
    assert np.array_equal(store["a"], before)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_property_logsumexp_matches_naive(xs):
    x = np.array(xs)
    assert ng.reduce("logsumexp", x).value == pytest.approx(np.log(np.sum(np.exp(x))), abs=1e-12)


def test_backward_is_repeatable_bitwise():
    store = ParamStore()
    store.add("w", rand((3, 3), 4))
    x = rand((5, 3), 5)

    def run():
        return ng.value_and_grad(lambda p: ng.sum_(ng.softplus(ng.linear(x, p["w"]))), store)

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2 and np.array_equal(g1["w"], g2["w"])
