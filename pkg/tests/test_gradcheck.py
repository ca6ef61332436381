import numpy as np
import pytest

from omnixfer import numerics as nx
from omnixfer.attention import ProjectionSet
from omnixfer.gradcheck import (
    attention_forward,
    attn_backward,
    check_attention_path,
    finite_diff,
    verify,
)
from omnixfer.invariants import random_branch_instance
from omnixfer.rope import RopeConfig, rope_angles, rotate_pairs


def test_requires_f64(rng):
    proj = ProjectionSet.random(4, 1, rng)
    with pytest.raises(ValueError, match="64-bit"):
        attention_forward(np.zeros((1, 4), np.float32), np.zeros((1, 3), int), [(np.zeros((1, 4)), np.zeros((1, 3), int))], proj, RopeConfig(4))


def test_zero_upstream_gives_zero_grads(f64, rng):
    proj, cfg, x_ref, x_tgt, tc, rc = random_branch_instance(rng, 2, 3, 2, 4)
    out, tape = attention_forward(x_tgt, tc, [(x_tgt, tc), (x_ref, rc)], proj, cfg)
    grads = attn_backward(tape, np.zeros_like(out))
    for key in ("Q", "K", "V", "W_Q", "W_K", "W_V", "W_O", "X_q"):
        assert not np.any(grads[key])


def test_single_token_value_grad(f64, rng):
    # one key: P = 1, so dV = dOut W_O^T (per head)
    proj = ProjectionSet.random(4, 1, rng)
    x = rng.child("x").normal((1, 4))
    c = np.zeros((1, 3), dtype=int)
    out, tape = attention_forward(x, c, [(x, c)], proj, RopeConfig(4))
    d_out = rng.child("g").normal(out.shape)
    grads = attn_backward(tape, d_out)
    assert np.allclose(grads["V"][:, 0], d_out @ proj.wo.T, atol=1e-12)


def test_finite_diff_polynomials():
    assert abs(finite_diff(lambda p: float(p[0] ** 2), np.array([3.0]))[0] - 6.0) < 1e-9
    g = finite_diff(lambda p: float(np.dot([2.0, -1.0, 0.5], p)), np.zeros(3))
    assert np.allclose(g, [2.0, -1.0, 0.5], atol=1e-9)
    with pytest.raises(ValueError):
        finite_diff(lambda p: 0.0, np.zeros(1), h=0.0)


def test_verify_reports():
    g = np.array([1.0, -2.0, 3.0])
    assert verify(g, g.copy()).passed and verify(g, g.copy()).max_rel_err == 0.0
    bad = verify(g, g * 1.1)
    assert not bad.passed and abs(bad.max_rel_err - 0.1 / 1.1) < 1e-12
    tiny = verify(np.array([1e-12]), np.array([-1e-12]))
    assert tiny.passed and tiny.checked == 0
    with pytest.raises(ValueError):
        verify(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("branch", ["target", "reference"])
def test_full_path_against_central_differences(f64, rng, branch):
    proj, cfg, x_ref, x_tgt, tc, rc = random_branch_instance(rng, 2, 3, 2, 4)
    if branch == "target":
        reports = check_attention_path(x_tgt, tc, [(x_tgt, tc), (x_ref, rc)], proj, cfg)
    else:
        reports = check_attention_path(x_ref, rc, [(x_ref, rc)], proj, cfg)
    assert {r.name for r in reports} == {"W_Q", "W_K", "W_V", "W_O", "Q", "K", "V"}
    for r in reports:
        assert r.passed, r.to_dict()


def test_input_grads_against_central_differences(f64, rng):
    proj, cfg, x_ref, x_tgt, tc, rc = random_branch_instance(rng, 3, 2, 1, 4)
    out, tape = attention_forward(x_tgt, tc, [(x_tgt, tc), (x_ref, rc)], proj, cfg)
    grads = attn_backward(tape, np.ones_like(out))
    fd_ref = finite_diff(lambda x: float(attention_forward(x_tgt, tc, [(x_tgt, tc), (x, rc)], proj, cfg)[0].sum()), x_ref)
    assert verify(grads["X_segments"][1], fd_ref).passed
    # x_tgt feeds both queries and the first key/value segment
    full = grads["X_q"] + grads["X_segments"][0]
    fd_tgt = finite_diff(lambda x: float(attention_forward(x, tc, [(x, tc), (x_ref, rc)], proj, cfg)[0].sum()), x_tgt)
    assert verify(full, fd_tgt).passed


def test_rotation_transpose_identity(f64, rng):
    cfg = RopeConfig(8)
    coords = np.array([[3, -1, 7]])
    angles = rope_angles(coords, cfg)
    jac = np.zeros((8, 8))
    for i in range(8):
        e = np.zeros((1, 1, 8))
        e[0, 0, i] = 1.0
        jac[:, i] = rotate_pairs(e, angles)[0, 0]
    g = rng.normal((1, 1, 8))
    assert np.allclose(rotate_pairs(g, -angles)[0, 0], jac.T @ g[0, 0], atol=1e-10)


def test_backward_without_tape_raises():
    with pytest.raises(ValueError, match="tape"):
        attn_backward(None, np.zeros((1, 4)))


def test_backward_rejects_wrong_upstream_shape(f64, rng):
    proj = ProjectionSet.random(4, 1, rng)
    x, c = rng.normal((2, 4)), np.zeros((2, 3), dtype=int)
    _, tape = attention_forward(x, c, [(x, c)], proj, RopeConfig(4))
    with pytest.raises(ValueError, match="shape"):
        attn_backward(tape, np.zeros((3, 4)))
