import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affinegs import affine, physics, scenes
from affinegs.autodiff import tape as T
from affinegs.dynamics import DynamicsModel
from affinegs.physics import CollocationBatch, EmptyBatchError

from conftest import randomize, tiny_config


def _w(rot=(0, 0, 0), stretch=(0, 0, 0), shear=(0, 0, 0), trans=(0, 0, 0)):
    return np.concatenate([trans, rot, stretch, shear]).astype(float)


def _batch_from(x, w, dwdt, a_w):
    """A CollocationBatch whose Var fields hold given weight arrays."""
    tape = T.Tape()
    x = np.atleast_2d(x)
    n = len(x)
    w, dwdt, a_w = (tape.constant(np.broadcast_to(np.asarray(a, float), (n, 12)).copy()) for a in (w, dwdt, a_w))
    b = CollocationBatch(x=x, t=np.zeros(n))
    b.w, b.dwdt, b.a_w = w, dwdt, a_w
    b.velocity = affine.affine_apply(x, w)
    b.dvdt = affine.affine_apply(x, dwdt)
    b.convective = affine.convective_apply(x, w)
    b.div = w[:, 6] + w[:, 7] + w[:, 8]
    b.a_pred = affine.affine_apply(x, a_w)
    return b


# --------------------------------------------------------------- sampling


def test_degenerate_box_returns_the_point():
    p = np.array([0.3, -1.0, 2.0])
    b = physics.sample_collocation(1, (p, p), (0.5, 0.5), np.random.default_rng(0))
    np.testing.assert_array_equal(b.x[0], p)
    assert b.t[0] == 0.5


def test_sampling_deterministic():
    bbox, tr = (np.zeros(3), np.ones(3)), (0.0, 1.0)
    a = physics.sample_collocation(50, bbox, tr, np.random.default_rng(9))
    b = physics.sample_collocation(50, bbox, tr, np.random.default_rng(9))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.t, b.t)


@pytest.mark.parametrize("n_times", [None, 32])
def test_sampling_uniform_mean(n_times):
    b = physics.sample_collocation(10000, (np.zeros(3), np.ones(3)), (0.0, 1.0), np.random.default_rng(1), n_times)
    assert np.all(np.abs(b.x.mean(axis=0) - 0.5) < 0.02)
    assert np.all((b.x >= 0) & (b.x <= 1)) and np.all((b.t >= 0) & (b.t <= 1))


def test_shared_times_count():
    b = physics.sample_collocation(256, (np.zeros(3), np.ones(3)), (0.0, 2.0), np.random.default_rng(2), 32)
    assert len(np.unique(b.t)) == 32


def test_sampling_rejects_empty():
    with pytest.raises(EmptyBatchError):
        physics.sample_collocation(0, (np.zeros(3), np.ones(3)), (0, 1), np.random.default_rng(0))


def test_collocation_domain_inflates_box_and_time():
    pos = np.array([[0.0, 0, 0], [1.0, 2.0, 4.0]])
    (lo, hi), (t0, t1) = physics.collocation_domain(pos, 0.8)
    np.testing.assert_allclose(lo, [-0.1, -0.2, -0.4])
    np.testing.assert_allclose(hi, [1.1, 2.2, 4.4])
    assert (t0, t1) == (0.0, pytest.approx(1.0))


# ---------------------------------------------------------- residual examples


def test_static_scene_zero_residual():
    b = _batch_from(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(12), np.zeros(12), np.zeros(12))
    np.testing.assert_array_equal(physics.transport_residual(b).value, 0.0)


def test_steady_rotation_balanced_by_acceleration():
    # A(Ax) for pure rotation is -|w|^2 x_perp + (w.x) w: symmetric, so it is a stretch+shear field
    om = np.array([0.3, -0.5, 1.0])
    A = affine.jacobian(_w(rot=om))
    a_w = affine.weights_from_affine(A @ A, np.zeros(3))
    x = np.random.default_rng(1).normal(size=(20, 3))
    b = _batch_from(x, _w(rot=om), np.zeros(12), a_w)
    assert np.abs(physics.transport_residual(b).value).max() < 1e-12


def test_zero_acceleration_residual_is_convective():
    x = np.random.default_rng(2).normal(size=(6, 3))
    w = np.random.default_rng(3).normal(size=12)
    b = _batch_from(x, w, np.zeros(12), np.zeros(12))
    np.testing.assert_array_equal(physics.transport_residual(b).value, affine.convective_term(x, w))


def test_divergence_examples():
    x = np.zeros((1, 3))
    for w, d in ((_w(rot=(1, 2, 3), shear=(4, 5, 6), trans=(7, 8, 9)), 0.0),
                 (_w(stretch=(0.1, -0.1, 0)), 0.0), (_w(stretch=(1, 1, 1)), 3.0)):
        b = _batch_from(x, w, np.zeros(12), np.zeros(12))
        assert physics.divergence_residual(b).value[0] == d


def test_constraint_loss_examples():
    assert physics.losses_from_residuals([[1.0, 0, 0]], [2.0]) == physics.ConstraintLosses(1.0, 4.0)
    assert physics.losses_from_residuals(np.zeros((2, 3)), [1.0, 3.0]).divergence == 5.0
    with pytest.raises(EmptyBatchError):
        physics.losses_from_residuals(np.zeros((0, 3)), [])
    with pytest.raises(EmptyBatchError):
        physics.constraint_loss(None)


def test_all_zero_networks_give_zero_losses():
    m = DynamicsModel(tiny_config(), seed=0)  # zero last layers
    tape = T.Tape()
    b = physics.sample_collocation(16, (np.zeros(3), np.ones(3)), (0, 1), np.random.default_rng(0))
    physics.evaluate_collocation(m, m.bind(tape), b, 1e-3)
    lt, ld = physics.constraint_loss(b)
    assert lt.value == 0.0 and ld.value == 0.0


# ------------------------------------------------------------- invariants


@given(arrays(np.float64, 12, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, 12, elements=st.floats(-3, 3)))
def test_transport_residual_shift_equivariant_in_acceleration(w, x, aw):
    delta_w = np.zeros(12)
    delta_w[:3] = [0.5, -1.0, 2.0]
    r0 = physics.transport_residual(_batch_from(x, w, np.zeros(12), aw)).value
    r1 = physics.transport_residual(_batch_from(x, w, np.zeros(12), aw + delta_w)).value
    np.testing.assert_allclose(r1, r0 - delta_w[:3], atol=1e-12 * (1 + np.abs(r0).max()))


# values whose squares would underflow to zero are flushed to exact zeros
@given(arrays(np.float64, (5, 12), elements=st.floats(-3, 3).map(lambda v: 0.0 if abs(v) < 1e-100 else v)))
def test_divergence_loss_zero_iff_traceless(ws):
    x = np.zeros((5, 3))
    tape = T.Tape()
    b = CollocationBatch(x=x, t=np.zeros(5))
    w = tape.constant(ws)
    b.div = w[:, 6] + w[:, 7] + w[:, 8]
    ld = T.mean(T.square(physics.divergence_residual(b))).value
    assert (ld == 0.0) == bool(np.all(ws[:, 6] + ws[:, 7] + ws[:, 8] == 0.0))
    ws2 = ws.copy()
    ws2[:, 8] = -(ws2[:, 6] + ws2[:, 7])
    b.div = tape.constant(ws2)[:, 6] + tape.constant(ws2)[:, 7] + tape.constant(ws2)[:, 8]
    assert np.abs(b.div.value).max() < 1e-14


@pytest.mark.parametrize("use_pds", [True, False])
def test_constraint_losses_gradient_check(use_pds):
    m = randomize(DynamicsModel(tiny_config(use_pds=use_pds), seed=0), 4, scale=0.5)
    batch = physics.sample_collocation(6, (-np.ones(3), np.ones(3)), (0, 1), np.random.default_rng(5))

    def loss():
        tape = T.Tape()
        b = CollocationBatch(batch.x, batch.t)
        physics.evaluate_collocation(m, m.bind(tape), b, 1e-3)
        lt, ld = physics.constraint_loss(b)
        return tape, lt + 3.0 * ld

    tape, L = loss()
    assert L.value >= 0
    g = tape.backward(L, names=m.params.keys())
    h = 1e-5
    worst = 0.0
    for name in m.params.keys():
        if name.startswith("adf."):
            continue
        arr = m.params[name]
        for i in list(np.ndindex(arr.shape))[:40]:
            old = arr[i]
            arr[i] = old + h
            lp = loss()[1].value
            arr[i] = old - h
            lm = loss()[1].value
            arr[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[name][i]) / max(abs(fd), abs(g[name][i]), 1e-6))
    assert worst < 1e-4, worst


def test_shared_times_match_unshared_evaluation(tiny_model):
    rng = np.random.default_rng(6)
    b1 = physics.sample_collocation(24, (-np.ones(3), np.ones(3)), (0, 1), rng, 4)
    b2 = CollocationBatch(b1.x, b1.t + 0.0)
    tape = T.Tape()
    P = tiny_model.bind(tape)
    physics.evaluate_collocation(tiny_model, P, b1, 1e-3)
    code = tiny_model.encode(P, b2.x)
    w = tiny_model.coefficients_pointwise(P, code.weights, b2.t).value
    dw = tiny_model.coefficients_time_derivative(P, code.weights, b2.t, 1e-3).value
    np.testing.assert_allclose(b1.w.value, w, atol=1e-14)
    np.testing.assert_allclose(b1.dwdt.value, dw, atol=1e-10)


# ------------------------------------------------------ oracle trajectories


@pytest.mark.parametrize("law", [
    scenes.MotionLaw("rotation", {"omega": [0.2, -0.4, 1.1], "pivot": [0.5, 0, -0.3]}),
    scenes.MotionLaw("translation", {"b": [0.3, 0.1, -0.2]}),
    scenes.MotionLaw("stretch", {"rates": [0.4, -0.1, 0.2]}),
    scenes.MotionLaw("shear", {"rates": [0.3, 0.2, -0.1]}),
    scenes.MotionLaw("affine", {"A": [[0.1, -0.5, 0.2], [0.4, 0.0, 0.3], [-0.2, 0.1, -0.3]], "b": [0.1, 0.2, 0.3]}),
])
def test_ground_truth_affine_trajectories_satisfy_transport(law):
    M, c = law.generator()
    w = affine.weights_from_affine(M, c)
    a_w = affine.weights_from_affine(M @ M, M @ c)  # a = A(Ax + b)
    x0 = np.random.default_rng(7).normal(size=(30, 3))
    xs = np.concatenate([scenes.affine_flow(M, c, x0, t) for t in (0.0, 0.3, 0.9)])
    r = physics.transport_residual_values(xs, w, np.zeros(12), a_w)
    assert np.abs(r).max() < 1e-9
    d = affine.divergence(w)
    assert d == w[6] + w[7] + w[8]
    if law.kind in ("rotation", "translation", "shear"):
        assert d == 0.0
