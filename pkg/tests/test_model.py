import numpy as np
import numpy.testing as npt
import pytest

from modules.error_handler import DimensionMismatch, SchemaMismatch, ValidationError
from modules.json_helpers import read_json, write_json
from modules.linalg import bce_with_logits, sigmoid
from modules.model import (
    PARAM_KEYS, Dimensions, DropoutMasks, ModelParams, backward, batch_losses,
    discriminator_gradients, discriminator_loss, forward, predict_language, predict_score, task_gradients,
    task_loss,
)


def _random_setup(seed, rows=None):
    rng = np.random.default_rng(seed)
    dims = Dimensions(
        d_emb=int(rng.integers(1, 5)), n_phi=int(rng.integers(0, 4)), n_h=int(rng.integers(1, 6)),
        n_f=int(rng.integers(1, 6)), n_hl=int(rng.integers(1, 5)),
    )
    params = ModelParams.initialize(dims, seed)
    n = rows or int(rng.integers(1, 5))
    z_q, z_r = rng.normal(size=(n, dims.d_emb)), rng.normal(size=(n, dims.d_emb))
    phi = rng.normal(size=(n, dims.n_phi))
    keep = 0.75
    masks = DropoutMasks(
        (rng.random((n, dims.n_h)) < keep) / keep,
        (rng.random((n, dims.n_f)) < keep) / keep,
    )
    c = rng.integers(0, 2, size=n).astype(float)
    l = rng.integers(0, 2, size=n).astype(float)
    return rng, params, z_q, z_r, phi, masks, c, l


def _numeric_grad(params, key, loss_fn, eps=1e-6):
    base = params.as_dict()[key]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (loss_fn(params.replace(**{key: plus})) - loss_fn(params.replace(**{key: minus}))) / (2 * eps)
    return grad


@pytest.mark.parametrize("seed", range(20))
def test_task_and_discriminator_gradients_match_finite_differences(seed):
    _, params, z_q, z_r, phi, masks, c, l = _random_setup(seed)

    def task(p):
        return float(np.sum(bce_with_logits(forward(p, z_q, z_r, phi, masks).logit, c)))

    def disc(p):
        trace = forward(p, z_q, z_r, phi, masks, with_discriminator=True)
        return float(np.sum(bce_with_logits(trace.discriminator.logit, l)))

    trace = forward(params, z_q, z_r, phi, masks, with_discriminator=True)
    g_task = task_gradients(params, trace, c).as_dict()
    g_disc = discriminator_gradients(params, trace, l).as_dict()
    for key in PARAM_KEYS:
        npt.assert_allclose(g_task[key], _numeric_grad(params, key, task), rtol=1e-4, atol=1e-6)
        npt.assert_allclose(g_disc[key], _numeric_grad(params, key, disc), rtol=1e-4, atol=1e-6)


def test_reversal_identity():
    _, params, z_q, z_r, phi, masks, c, l = _random_setup(11, rows=100)
    trace = forward(params, z_q, z_r, phi, masks, with_discriminator=True)
    task = task_gradients(params, trace, c)
    disc = discriminator_gradients(params, trace, l)
    lam = 0.37
    combined = backward(params, trace, c, l, lam)
    npt.assert_allclose(combined.U, task.U - lam * disc.U)
    npt.assert_allclose(combined.V, task.V - lam * disc.V)
    npt.assert_array_equal(combined.w, task.w)
    npt.assert_array_equal(combined.U_l, disc.U_l)
    npt.assert_array_equal(combined.w_l, disc.w_l)
    npt.assert_array_equal(disc.w, np.zeros_like(params.w))

    scaled = backward(params, trace, c, l, lam, scale=0.5, discriminator_weight=lam)
    npt.assert_allclose(scaled.w_l, 0.5 * lam * disc.w_l)


def test_zero_lambda_leaves_task_gradient_untouched():
    _, params, z_q, z_r, phi, masks, c, l = _random_setup(5, rows=8)
    trace = forward(params, z_q, z_r, phi, masks, with_discriminator=True)
    with_disc = backward(params, trace, c, l, 0.0)
    without = backward(params, trace, c, None, 0.0)
    for key in ('U', 'V', 'w'):
        npt.assert_array_equal(with_disc.as_dict()[key], without.as_dict()[key])
    with pytest.raises(ValidationError):
        backward(params, trace, c, l, -0.1)


def test_unlabeled_rows_contribute_nothing_to_task_gradient():
    _, params, z_q, z_r, phi, masks, c, _ = _random_setup(7, rows=6)
    trace = forward(params, z_q, z_r, phi, masks)
    partial = c.copy()
    partial[3:] = np.nan
    head = forward(params, z_q[:3], z_r[:3], phi[:3], DropoutMasks(masks.h[:3], masks.f[:3]))
    full = task_gradients(params, trace, partial)
    ref = task_gradients(params, head, c[:3])
    for key in ('U', 'V', 'w'):
        npt.assert_allclose(full.as_dict()[key], ref.as_dict()[key], atol=1e-14)
    lc, _, n_labeled = batch_losses(trace, partial, None)
    assert n_labeled == 3
    assert np.isfinite(lc)


def _hand_params():
    dims = Dimensions(d_emb=1, n_phi=1, n_h=1, n_f=1, n_hl=1)
    return ModelParams(dims, U=np.array([[1.0, -1.0]]), V=np.array([[2.0, 1.0]]),
                       w=np.array([1.0, 0.5]), U_l=np.array([[0.5]]), w_l=np.array([-1.0]))


def test_forward_by_hand():
    params = _hand_params()
    trace = forward(params, np.array([3.0]), np.array([1.0]), np.array([2.0]), with_discriminator=True)
    npt.assert_array_equal(trace.h, [[2.0]])
    npt.assert_array_equal(trace.f, [[6.0]])
    npt.assert_array_equal(trace.logit, [7.0])
    assert trace.c_hat[0] == pytest.approx(sigmoid(7.0))
    npt.assert_array_equal(trace.discriminator.h_l, [[3.0]])
    assert trace.l_hat[0] == pytest.approx(sigmoid(-3.0))

    assert predict_score(params, np.array([3.0]), np.array([1.0]), np.array([2.0])) == pytest.approx(sigmoid(7.0))
    # relu clamps h to zero, leaving f = relu(V_phi * phi)
    assert predict_score(params, np.array([1.0]), np.array([3.0]), np.array([2.0])) == pytest.approx(sigmoid(2.0 + 1.0))
    npt.assert_allclose(predict_language(params, np.array([[3.0]]), np.array([[1.0]]), np.array([[2.0]])),
                        [sigmoid(-3.0)])


def test_dropout_masks_scale_activations():
    params = _hand_params()
    masks = DropoutMasks(np.array([[2.0]]), np.array([[0.0]]))
    trace = forward(params, np.array([3.0]), np.array([1.0]), np.array([2.0]), masks)
    npt.assert_array_equal(trace.x_f, [[4.0, 2.0]])
    npt.assert_array_equal(trace.out, [[0.0, 2.0]])
    assert trace.logit[0] == 1.0


def test_forward_rejects_wrong_widths():
    params = _hand_params()
    with pytest.raises(DimensionMismatch):
        forward(params, np.zeros(2), np.zeros(2), np.zeros(1))
    with pytest.raises(DimensionMismatch):
        forward(params, np.zeros(1), np.zeros(1), np.zeros(3))


def test_initialisation_is_seeded_per_block():
    a = ModelParams.initialize(Dimensions(3, 2, 4, 5, 2), 9)
    b = ModelParams.initialize(Dimensions(3, 2, 4, 5, 7), 9)
    npt.assert_array_equal(a.U, b.U)
    npt.assert_array_equal(a.V, b.V)
    assert a.U_l.shape != b.U_l.shape


def test_params_json_reload_is_bit_identical(tmp_path):
    params = ModelParams.initialize(Dimensions(3, 2, 4, 5, 2), 1)
    path = tmp_path / "params.json"
    write_json(str(path), params.to_dict())
    loaded = ModelParams.from_dict(read_json(str(path)))
    for key in PARAM_KEYS:
        npt.assert_array_equal(loaded.as_dict()[key], params.as_dict()[key])

    broken = params.to_dict()
    del broken['weights']['w_l']
    with pytest.raises(SchemaMismatch):
        ModelParams.from_dict(broken)


def test_loss_values_at_known_probabilities():
    assert task_loss(0.0, 1.0) == pytest.approx(np.log(2.0), rel=1e-12)
    assert task_loss(0.0, 0.0) == pytest.approx(np.log(2.0), rel=1e-12)
    # sigmoid(ln 3) = 0.75, sigmoid(ln 9) = 0.9
    assert discriminator_loss(np.log(3.0), 1.0) == pytest.approx(-np.log(0.75), rel=1e-12)
    assert discriminator_loss(-np.log(3.0), 0.0) == pytest.approx(-np.log(0.75), rel=1e-12)
    assert discriminator_loss(np.log(9.0), 1.0) == pytest.approx(-np.log(0.9), rel=1e-12)
    npt.assert_allclose(task_loss(np.array([np.log(9.0), 0.0]), np.array([1.0, 0.0])),
                        [-np.log(0.9), np.log(2.0)], rtol=1e-12)
