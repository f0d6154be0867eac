import numpy as np
import pytest
from hypothesis import given, strategies as st

from headpose6d.bbox import BBoxInfo
from headpose6d.errors import IndexOutOfRange, ShapeMismatch
from headpose6d.geometry import CameraIntrinsics, matrix_to_rot6d, random_rotation, rot_z
from headpose6d.losses import (
    CropContext, GroundTruth, IterationOutputs, LossWeights, edge_length_loss, edge_pairs, image_grad_backward,
    iteration_weight, landmark_coordinate_losses, rotation_loss, sparse_landmark_loss, stage_loss_grad, total_loss,
)
from headpose6d.nn import finite_difference_check

K = CameraIntrinsics(800.0, 640.0, 480.0, 1280, 960)
BOX = BBoxInfo(10.0, -20.0, 300.0, 800.0)
CTX = CropContext.of(K, BOX)


def _gt(V, R=np.eye(3), T=np.array([0.0, 0.0, 0.6]), tri=np.zeros((0, 3), dtype=int)):
    Vc = R @ V + T[:, None]
    return GroundTruth(V, R, T, Vc, CTX.project(Vc), np.zeros((2, 68)), tri)


def _outs(Vs, Rs=None, Ts=None):
    n = len(Vs)
    return IterationOutputs(Vs, Rs or [np.eye(3)] * n, Ts or [np.array([0.0, 0.0, 0.6])] * n, CTX)


def test_iteration_weights():
    assert [iteration_weight(t) for t in (1, 2, 3)] == [0.25, 0.5, 1.0]
    assert iteration_weight(1, 1) == 1.0


def test_landmark_losses_examples():
    V = np.array([[0.01], [0.02], [0.0]])
    gt = _gt(V)
    assert landmark_coordinate_losses(_outs([V, V, V]), gt) == (0.0, 0.0, 0.0)
    off = V + np.array([[0.003], [0], [0]])
    assert landmark_coordinate_losses(_outs([V, V, off]), gt)[0] == pytest.approx(0.003, abs=1e-15)
    assert landmark_coordinate_losses(_outs([off, V, V]), gt)[0] == pytest.approx(0.00075, abs=1e-15)


def test_landmark_losses_shape_mismatch():
    V = np.zeros((3, 2))
    with pytest.raises(ShapeMismatch):
        landmark_coordinate_losses(_outs([np.zeros((3, 3))]), _gt(V))


def test_rotation_loss_examples():
    V = np.zeros((3, 1))
    gt = _gt(V)
    Rz = rot_z(np.pi)
    assert rotation_loss(_outs([V] * 3, [np.eye(3)] * 3), gt) == 0.0
    assert rotation_loss(_outs([V] * 3, [np.eye(3), np.eye(3), Rz]), gt) == pytest.approx(np.sqrt(8), abs=1e-12)
    assert rotation_loss(_outs([V] * 3, [Rz] * 3), gt) == pytest.approx(4.9497474683, abs=1e-9)
    with pytest.raises(ShapeMismatch):
        rotation_loss(_outs([V], [np.eye(2)]), gt)


def test_edge_loss_examples(rng):
    tri = np.array([[0, 1, 2]])
    Vg = np.array([[0, 1.0, 0.5], [0, 0, 1.0], [0, 0, 0]])
    gt = _gt(Vg, tri=tri)
    assert edge_length_loss(Vg, gt) == 0.0
    R = random_rotation(rng)
    assert edge_length_loss(R @ Vg + rng.normal(size=(3, 1)), gt) < 1e-12
    Vs = np.array([[0, 1.5, 0.75], [0, 0, np.sqrt(0.6875)], [0, 0, 0]])
    assert edge_length_loss(Vs, gt) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(IndexOutOfRange):
        _gt(Vg, tri=np.array([[0, 1, 3]]))


def test_sparse_loss_examples():
    assert sparse_landmark_loss(np.zeros((2, 68)), np.zeros((2, 68))) == 0.0
    assert sparse_landmark_loss(np.array([[3.0], [4.0]]), np.zeros((2, 1))) == 7.0
    assert sparse_landmark_loss(np.vstack([np.ones(68), np.zeros(68)]), np.zeros((2, 68))) == 1.0
    with pytest.raises(ShapeMismatch):
        sparse_landmark_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def test_total_loss_examples():
    assert total_loss({}) == 0.0
    assert total_loss({"head": 1.0}) == 20.0
    assert total_loss({"sparse": 2.0}) == 2.5
    with pytest.raises(ValueError):
        LossWeights(head=-1)


@given(st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear(a, b):
    assert total_loss({"cam": a + b}) == pytest.approx(total_loss({"cam": a}) + total_loss({"cam": b}))


def _random_state(rng, n=40):
    V = rng.normal(size=(3, n)) * 0.05
    r6 = matrix_to_rot6d(random_rotation(rng)) + rng.normal(size=6) * 0.1
    c = np.array([1.0 + rng.normal() * 0.05, rng.normal() * 0.05, rng.normal() * 0.05])
    return r6, c, V


def _gt_dict(rng, V):
    R = random_rotation(rng)
    T = np.array([0.02, -0.01, 0.6])
    Vc = R @ V + T[:, None]
    return {"V": V, "R": R, "T": T, "V_cam": Vc, "V_img": CTX.project(Vc)}


def test_stage_loss_matches_scalar_functions(rng):
    r6, c, V = _random_state(rng)
    Vg = V + rng.normal(size=V.shape) * 0.01
    g = _gt_dict(rng, Vg)
    tri = np.array([[0, 1, 2], [2, 3, 4], [5, 6, 7]])
    edges = edge_pairs(tri)
    sg = stage_loss_grad(r6, c, V, CTX, g, 1.0, LossWeights(), edges=edges)
    from headpose6d.geometry import rot6d_to_matrix
    from headpose6d.bbox import translation_from_correction_array
    T = translation_from_correction_array(c, CTX.tau, CTX.b, CTX.f)
    gt = GroundTruth(g["V"], g["R"], g["T"], g["V_cam"], g["V_img"], np.zeros((2, 68)), tri)
    out = IterationOutputs([V], [rot6d_to_matrix(r6)], [T], CTX)
    h, cm, im = landmark_coordinate_losses(out, gt)
    parts = {"head": h, "cam": cm, "img": im, "rot": rotation_loss(out, gt), "edge": edge_length_loss(V, gt)}
    assert sg.loss == pytest.approx(total_loss(parts), rel=1e-12)


@pytest.mark.parametrize("direct", [False, True])
def test_stage_loss_gradient(rng, direct):
    r6, c, V = _random_state(rng)
    g = _gt_dict(rng, V + rng.normal(size=V.shape) * 0.01)
    edges = edge_pairs(np.array([[0, 1, 2], [3, 4, 5]]))
    trans = np.array([0.01, 0.02, 0.55]) if direct else c
    n6, n3 = 6, 3

    def f(v):
        a, b, Vv = v[:n6], v[n6:n6 + n3], v[n6 + n3:].reshape(V.shape)
        sg = stage_loss_grad(a, b, Vv, CTX, g, 0.5, LossWeights(), edges=edges, direct=direct)
        return float(sg.loss), np.concatenate([sg.d_rot6d, sg.d_trans, sg.d_V.ravel()])

    def kinks(v):
        a, b, Vv = v[:n6], v[n6:n6 + n3], v[n6 + n3:].reshape(V.shape)
        return stage_loss_grad(a, b, Vv, CTX, g, 0.5, LossWeights(), edges=edges, direct=direct).kinks

    res = finite_difference_check(f, np.concatenate([r6, trans, V.ravel()]), 1e-6, kinks=kinks)
    assert res.passed(1e-5), res


def test_image_grad_backward(rng):
    r6, c, V = _random_state(rng)
    W = rng.normal(size=(2, V.shape[1]))
    from headpose6d.geometry import rot6d_to_matrix
    from headpose6d.bbox import translation_from_correction_array

    def f(v):
        a, b, Vv = v[:6], v[6:9], v[9:].reshape(V.shape)
        T = translation_from_correction_array(b, CTX.tau, CTX.b, CTX.f)
        val = float(np.sum(W * CTX.project(rot6d_to_matrix(a) @ Vv + T[:, None])))
        d6, d3, dV = image_grad_backward(a, b, Vv, CTX, W)
        return val, np.concatenate([d6, d3, dV.ravel()])

    assert finite_difference_check(f, np.concatenate([r6, c, V.ravel()]), 1e-6).passed(1e-5)
