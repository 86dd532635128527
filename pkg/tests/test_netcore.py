import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specrl import netcore as nc


def spec(hid=(4,), heads=((2, "identity"),), **kw):
    return nc.NetSpec(hid_layers=list(hid), out_heads=[list(h) for h in heads], **kw)


def test_init_shapes_and_zero_biases():
    params = nc.init_params(spec(), 3, np.random.default_rng(0))
    assert params.shapes == [(4, 3), (4,), (2, 4), (2,)]
    assert np.all(params[1] == 0.0) and np.all(params[3] == 0.0)


def test_init_is_seed_deterministic():
    a = nc.init_params(spec(hid=(8, 8)), 5, np.random.default_rng(7))
    b = nc.init_params(spec(hid=(8, 8)), 5, np.random.default_rng(7))
    np.testing.assert_array_equal(a.flat, b.flat)


def test_init_fan_in_bound():
    params = nc.init_params(spec(hid=(32,)), 16, np.random.default_rng(1))
    assert np.max(np.abs(params[0])) <= 1.0 / np.sqrt(16)
    assert np.max(np.abs(params[2])) <= 1.0 / np.sqrt(32)


def test_zero_params_give_zero_output():
    s = spec(hid=(5, 5), heads=((3, "identity"), (1, "tanh")))
    params = nc.init_params(s, 4, np.random.default_rng(0)).zeros_like()
    outs = nc.forward(params, s, np.random.default_rng(1).normal(size=(6, 4)))
    assert all(np.all(o == 0.0) for o in outs)


def test_identity_linear_layer():
    s = spec(hid=(), heads=((3, "identity"),))
    params = nc.init_params(s, 3, np.random.default_rng(0))
    params[0][...] = np.eye(3)
    x = np.random.default_rng(2).normal(size=(5, 3))
    np.testing.assert_array_equal(nc.forward(params, s, x)[0], x)


def test_identical_rows_give_identical_outputs():
    s = spec(hid=(6, 6), heads=((2, "identity"),), activation="tanh")
    params = nc.init_params(s, 3, np.random.default_rng(3))
    row = np.random.default_rng(4).normal(size=3)
    out = nc.forward(params, s, np.stack([row, row]))[0]
    np.testing.assert_array_equal(out[0], out[1])


def test_forward_shape_mismatch_names_both_shapes():
    s = spec()
    params = nc.init_params(s, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match=r"\(2, 5\).*3|3.*\(2, 5\)"):
        nc.forward(params, s, np.zeros((2, 5)))


def test_zero_upstream_grads_give_zero_grads():
    s = spec(hid=(4, 4))
    params = nc.init_params(s, 3, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 3))
    grads, gx = nc.backward(params, s, x, [np.zeros((7, 2))])
    assert np.all(grads.flat == 0.0) and np.all(gx == 0.0)


def test_single_linear_layer_analytic_grads():
    s = spec(hid=(), heads=((2, "identity"),))
    params = nc.init_params(s, 3, np.random.default_rng(0))
    x = np.array([[1.0, -2.0, 0.5]])
    g = np.array([[0.3, -1.5]])
    grads, gx = nc.backward(params, s, x, [g])
    np.testing.assert_allclose(grads[0], g.T @ x)
    np.testing.assert_allclose(grads[1], g[0])
    np.testing.assert_allclose(gx, g @ params[0])


def test_backward_rejects_wrong_head_grad_shape():
    s = spec()
    params = nc.init_params(s, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="shape"):
        nc.backward(params, s, np.zeros((2, 3)), [np.zeros((2, 3))])


@pytest.mark.parametrize("activation,hid,tol", [
    ("tanh", (), 1e-9),       # linear net
    ("tanh", (6, 5), 1e-7),
    ("relu", (6, 5), 1e-6),
])
def test_grad_check_oracle(activation, hid, tol):
    rng = np.random.default_rng(11)
    s = spec(hid=hid, heads=((3, "identity"), (2, "tanh")), activation=activation)
    params = nc.init_params(s, 4, rng)
    x = rng.normal(size=(5, 4))
    if activation == "relu":
        # finite differences are only valid away from the kink at zero
        acts = nc.forward_with_cache(params, s, x)[1][0]
        for i in range(len(hid)):
            pre = acts[i] @ params[2 * i].T + params[2 * i + 1]
            assert np.min(np.abs(pre)) > 1e-4
    probe = [rng.normal(size=(5, 3)), rng.normal(size=(5, 2))]
    assert nc.grad_check(s, params, x, probe) < tol


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    s = spec(hid=(5, 4), activation="tanh")
    params = nc.init_params(s, 3, rng)
    x = rng.normal(size=(1, 3))
    g = rng.normal(size=(1, 2))
    _, gx = nc.backward(params, s, x, [g])
    h = 1e-6
    num = np.zeros(3)
    for i in range(3):
        e = np.zeros((1, 3))
        e[0, i] = h
        num[i] = (np.sum(nc.forward(params, s, x + e)[0] * g) - np.sum(nc.forward(params, s, x - e)[0] * g)) / (2 * h)
    np.testing.assert_allclose(gx[0], num, atol=1e-8)


def _grads_with_norm(norm):
    g = nc.Params([(2, 2), (2,)], np.array([3.0, 4.0, 0.0, 0.0, 0.0, 0.0]))
    g.flat *= norm / 5.0
    return g


def test_clip_below_threshold_unchanged():
    g = _grads_with_norm(0.5)
    np.testing.assert_array_equal(nc.clip_grad_norm(g, 1.0).flat, g.flat)


def test_clip_scales_to_max_norm():
    g = _grads_with_norm(10.0)
    c = nc.clip_grad_norm(g, 1.0)
    assert nc.grad_norm(c) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(c.flat / nc.grad_norm(c), g.flat / nc.grad_norm(g))


def test_clip_zero_grads():
    g = _grads_with_norm(0.0)
    assert np.all(nc.clip_grad_norm(g, 1.0).flat == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_clip_norm_never_exceeds_max(values, max_norm):
    g = nc.Params([(len(values),)], np.array(values, dtype=np.float64))
    assert nc.grad_norm(nc.clip_grad_norm(g, max_norm)) <= max_norm + 1e-12 * max(1.0, max_norm)


def test_sgd_step_definition():
    s = nc.NetSpec(optimizer="sgd", lr=0.1)
    p = nc.Params([(1,)], np.array([1.0]))
    g = nc.Params([(1,)], np.array([2.0]))
    new, _ = nc.optimizer_step(p, g, nc.init_opt_state(p), s)
    assert new.flat[0] == pytest.approx(0.8)
    assert p.flat[0] == 1.0  # non-inplace leaves the input alone


def test_adam_first_step_identity():
    s = nc.NetSpec(optimizer="adam", lr=0.01)
    p = nc.Params([(3,)], np.zeros(3))
    g = nc.Params([(3,)], np.array([0.5, -2.0, 1e-3]))
    new, state = nc.optimizer_step(p, g, nc.init_opt_state(p), s)
    expected = s.lr * np.abs(g.flat) / (np.abs(g.flat) + s.adam_eps)
    np.testing.assert_allclose(np.abs(new.flat), expected, rtol=1e-9)
    assert state.t == 1


def test_adam_minimizes_quadratic():
    s = nc.NetSpec(optimizer="adam", lr=0.01)
    p = nc.Params([(1,)], np.array([5.0]))
    state = nc.init_opt_state(p)
    for _ in range(2000):
        g = nc.Params([(1,)], 2.0 * p.flat)
        p, state = nc.optimizer_step(p, g, state, s)
    assert abs(p.flat[0]) < 0.1


@pytest.mark.parametrize("tau,expected", [(1.0, 2.0), (0.0, 0.0), (0.5, 1.0)])
def test_polyak_update(tau, expected):
    s = nc.NetSpec(update="polyak", polyak_tau=tau)
    target = nc.Params([(1,)], np.array([0.0]))
    online = nc.Params([(1,)], np.array([2.0]))
    assert nc.update_target(target, online, s).flat[0] == expected


def test_replace_update_copies():
    s = nc.NetSpec(update="replace")
    online = nc.Params([(2,)], np.array([1.0, 2.0]))
    t = nc.update_target(online.zeros_like(), online, s)
    np.testing.assert_array_equal(t.flat, online.flat)
    online.flat[0] = 9.0
    assert t.flat[0] == 1.0


def test_update_target_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        nc.update_target(nc.Params([(2,)]), nc.Params([(3,)]), nc.NetSpec())


def test_huber_matches_mse_inside_delta():
    pred, target = np.array([0.1, -0.2]), np.zeros(2)
    h, hg = nc.huber_loss(pred, target, delta=1.0)
    m, mg = nc.mse_loss(pred, target)
    assert h == pytest.approx(m / 2)
    np.testing.assert_allclose(hg, mg / 2)


def test_save_load_roundtrip(tmp_path):
    s = spec(hid=(3,))
    p = nc.init_params(s, 2, np.random.default_rng(0))
    nc.save_params(tmp_path / "net", p, s, version="x")
    q, s2 = nc.load_params(tmp_path / "net")
    np.testing.assert_array_equal(p.flat, q.flat)
    assert s2 == s


def test_netspec_violations():
    bad = nc.NetSpec(activation="gelu", lr=0.0, polyak_tau=2.0)
    v = " ".join(bad.violations())
    assert "activation" in v and "lr" in v and "polyak_tau" in v
    assert nc.NetSpec().violations() == []
