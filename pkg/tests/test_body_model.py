import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from meshletemp.body_model import (
    NUM_PARAMS,
    PARENTS,
    BodyParams,
    build_default_body,
    forward,
    rodrigues,
)


def rodrigues_oracle(w):
    """Closed-form cos/sin Rodrigues formula in numpy."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle == 0:
        return np.eye(3)
    k = w / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * np.outer(k, k)


def test_rodrigues_zero_is_identity():
    assert torch.equal(rodrigues(torch.zeros(3, dtype=torch.float64)), torch.eye(3, dtype=torch.float64))


def test_rodrigues_quarter_turn_about_z():
    r = rodrigues(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64)).numpy()
    np.testing.assert_allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(r, rodrigues_oracle([0, 0, np.pi / 2]), atol=1e-12)


def test_rodrigues_half_turn_about_x():
    r = rodrigues(torch.tensor([np.pi, 0.0, 0.0], dtype=torch.float64)).numpy()
    np.testing.assert_allclose(r, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_rodrigues_is_proper_rotation(w):
    r = rodrigues(torch.tensor(w, dtype=torch.float64)).numpy()
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1) < 1e-9
    np.testing.assert_allclose(r, rodrigues_oracle(w), atol=1e-10)


def test_rodrigues_gradient_finite_at_zero():
    w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rodrigues(w).sum().backward()
    assert torch.isfinite(w.grad).all()
    # dR/dw at zero is the skew generator: d(sum R)/dw = 0 by antisymmetry
    np.testing.assert_allclose(w.grad.numpy(), 0.0, atol=1e-15)


def test_rodrigues_small_angle_matches_oracle():
    for w in ([1e-9, 0, 0], [3e-9, -2e-9, 1e-9], [1e-7, 0, 0]):
        r = rodrigues(torch.tensor(w, dtype=torch.float64)).numpy()
        np.testing.assert_allclose(r, rodrigues_oracle(w), atol=1e-15)


def test_rest_body_invariants(desk_body, full_body):
    for body in (desk_body, full_body):
        w = body.skinning_weights
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)
        tree = body.kinematic_tree
        assert (tree == -1).sum() == 1
        assert all(p < i for i, p in enumerate(tree) if p >= 0)  # parents precede children: acyclic
        height = np.ptp(body.template_vertices[:, 1])
        assert 1.6 < height < 1.8
        assert body.faces.min() >= 0 and body.faces.max() < body.num_vertices
        assert body.shape_basis.shape == (body.num_vertices, 3, 10)
        assert tuple(tree) == PARENTS


def test_presets_vertex_budget(desk_body, full_body):
    assert desk_body.num_vertices == 800
    assert full_body.num_vertices == 6890


def test_build_is_deterministic():
    a = build_default_body("desk")
    b = build_default_body("desk")
    assert a.digest() == b.digest()
    for k, v in a.tensors().items():
        assert v.tobytes() == b.tensors()[k].tobytes()


def test_unknown_preset_rejected():
    with pytest.raises(ValueError, match="unknown body preset"):
        build_default_body("giant")


def test_zero_theta_gives_template_exactly(desk_body):
    verts, joints = forward(desk_body, np.zeros(NUM_PARAMS))
    assert np.array_equal(verts.numpy(), desk_body.template_vertices)
    assert np.array_equal(joints.numpy(), desk_body.rest_joint_positions)


def test_shape_response_is_linear(desk_body, rng):
    beta = rng.uniform(-2, 2, 10)
    t1 = np.concatenate([np.zeros(72), beta])
    t2 = np.concatenate([np.zeros(72), 2 * beta])
    d1 = forward(desk_body, t1)[0].numpy() - desk_body.template_vertices
    d2 = forward(desk_body, t2)[0].numpy() - desk_body.template_vertices
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-12)
    assert np.abs(d1).max() > 1e-3


def test_root_rotation_is_rigid(desk_body, rng):
    for _ in range(5):
        w = rng.normal(size=3)
        theta = np.zeros(NUM_PARAMS)
        theta[:3] = w
        verts = forward(desk_body, theta)[0].numpy()
        root = desk_body.rest_joint_positions[0]
        expected = Rotation.from_rotvec(w).apply(desk_body.template_vertices - root) + root
        np.testing.assert_allclose(verts, expected, atol=1e-12)


def test_translation_consistency(desk_body, rng):
    t = rng.normal(size=3)
    shape_only = np.concatenate([np.zeros(72), rng.uniform(-2, 2, 10)])
    base = forward(desk_body, shape_only)[0].numpy()
    moved = forward(desk_body.translated(t), shape_only)[0].numpy()
    np.testing.assert_allclose(moved, base + t, atol=1e-12)


def test_batched_matches_single(desk_body, rng):
    thetas = rng.normal(scale=0.5, size=(3, NUM_PARAMS))
    batch = forward(desk_body, thetas)[0].numpy()
    for i in range(3):
        np.testing.assert_allclose(batch[i], forward(desk_body, thetas[i])[0].numpy(), atol=1e-13)


def test_forward_dimension_mismatch(desk_body):
    with pytest.raises(ValueError):
        forward(desk_body, np.zeros(81))


def test_body_params_contract():
    with pytest.raises(ValueError):
        BodyParams(np.zeros(71), np.zeros(10))
    with pytest.raises(ValueError):
        BodyParams(np.full(72, np.nan), np.zeros(10))
    v = np.arange(82.0)
    assert np.array_equal(BodyParams.from_vector(v).to_vector(), v)


def test_forward_gradient_matches_central_differences(desk_body, rng):
    theta0 = rng.normal(scale=0.4, size=NUM_PARAMS)
    probe = torch.from_numpy(rng.normal(size=(desk_body.num_vertices, 3)))

    def readout(theta):
        return float((forward(desk_body, theta)[0] * probe).sum())

    theta = torch.tensor(theta0, requires_grad=True)
    (forward(desk_body, theta)[0] * probe).sum().backward()
    grad = theta.grad.numpy()
    h = 1e-5
    for i in rng.choice(NUM_PARAMS, size=20, replace=False):
        e = np.zeros(NUM_PARAMS)
        e[i] = h
        fd = (readout(theta0 + e) - readout(theta0 - e)) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-8), (i, fd, grad[i])
