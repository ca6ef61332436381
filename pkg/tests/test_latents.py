import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnixfer import numerics as nx
from omnixfer.latents import (
    LatentBlock,
    TaskKind,
    TaskSpec,
    add_noise,
    build_reference_latent,
    build_target_latent,
    encode_stub,
    latent_from_bytes,
    latent_to_bytes,
    load_latent,
    save_latent,
)


@pytest.mark.parametrize(
    "kind, flag, category",
    [("id", -2, "appearance"), ("style", -3, "appearance"), ("effect", -1, "temporal"),
     ("camera", -1, "temporal"), ("motion", -1, "temporal")],
)
def test_task_flags(kind, flag, category):
    spec = TaskSpec.parse(kind)
    assert spec.mask_flag == flag
    assert spec.category == category


def test_task_parse_rejects_unknown():
    with pytest.raises(ValueError, match="unknown task"):
        TaskSpec.parse("zoom")


def test_encode_constant_clip_is_spatially_constant():
    clip = np.full((8, 64, 64, 3), 0.7)
    z = encode_stub(clip)
    assert z.shape == (2, 8, 8, 16)
    assert np.allclose(z, z[0, 0, 0], atol=1e-6)


def test_encode_shape_arithmetic():
    assert encode_stub(np.zeros((8, 64, 64, 3)), factors=(4, 8)).shape == (2, 8, 8, 16)


def test_encode_pads_ragged_axes():
    assert encode_stub(np.zeros((5, 60, 70, 3)), factors=(4, 8)).shape == (2, 8, 9, 16)


def test_encode_single_block_by_hand(f64):
    clip = np.arange(4 * 8 * 8 * 3, dtype=np.float64).reshape(4, 8, 8, 3) / 100.0
    z = encode_stub(clip, factors=(4, 8), n=5, seed=3)
    pooled = np.array([clip[..., c].sum() / (4 * 8 * 8) for c in range(3)])
    lift = nx.Rng(3, "encode_stub/lift").normal((3, 5), scale=1.0 / np.sqrt(3.0))
    expected = sum(pooled[c] * lift[c] for c in range(3))
    assert z.shape == (1, 1, 1, 5)
    assert np.allclose(z[0, 0, 0], expected, atol=1e-12)


def test_encode_rejects_empty():
    with pytest.raises(ValueError):
        encode_stub(np.zeros((0, 8, 8, 3)))


def test_add_noise_boundaries(rng):
    z0 = rng.child("z").normal((2, 3))
    eps = rng.child("e").normal((2, 3))
    assert np.array_equal(add_noise(z0, 0.0, eps), z0)
    assert np.array_equal(add_noise(z0, 1.0, eps), eps)
    assert add_noise(np.array([2.0]), 0.5, np.array([0.0]))[0] == 1.0


def test_add_noise_rejects_out_of_range():
    with pytest.raises(ValueError):
        add_noise(np.zeros(2), 1.5, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(-4, 4), st.integers(0, 2**32))
def test_add_noise_homogeneous(t, a, seed):
    with nx.precision("f64"):
        r = nx.Rng(seed)
        z0, eps = r.normal((3, 4)), r.normal((3, 4))
        assert np.allclose(add_noise(a * z0, t, a * eps), a * add_noise(z0, t, eps), atol=1e-7)


def test_target_latent_layout(rng):
    n, f = 16, 2
    cond = rng.child("c").normal((1, 3, 4, n))
    z = rng.child("z").normal((f, 3, 4, n))
    block = build_target_latent(cond, z)
    assert block.channels == 2 * n + 4 == 36
    assert np.all(block.mask[0] == 1) and np.all(block.mask[1] == 0)
    c, m, zz = (block.data[..., :n], block.data[..., n:n + 4], block.data[..., n + 4:])
    assert np.array_equal(c[0], cond[0]) and np.all(c[1:] == 0)
    assert np.array_equal(zz, z)
    assert np.array_equal(m, block.mask)


def test_target_zero_condition(rng):
    z = rng.normal((2, 3, 4, 16))
    block = build_target_latent(np.zeros((1, 3, 4, 16)), z)
    assert np.all(block.condition == 0)
    assert np.array_equal(block.content, z)


def test_target_t2v_has_no_preserved_frames(rng):
    block = build_target_latent(None, rng.normal((2, 3, 4, 16)))
    assert np.all(block.mask == 0) and np.all(block.condition == 0)


def test_target_rejects_grid_mismatch(rng):
    with pytest.raises(ValueError):
        build_target_latent(rng.normal((1, 3, 5, 16)), rng.normal((2, 3, 4, 16)))


@pytest.mark.parametrize("kind", list(TaskKind))
def test_reference_latent(kind, rng):
    task = TaskSpec(kind)
    ref = rng.normal((2, 5, 3, 16))
    block = build_reference_latent(ref, task)
    c, m, z = block.parts()
    assert block.channels == 36
    assert np.all(m == task.mask_flag)
    assert np.array_equal(c, z) and np.array_equal(z, ref)
    again = build_reference_latent(ref, task)
    assert np.array_equal(block.data, again.data)


def test_latent_block_validates():
    with pytest.raises(ValueError):
        LatentBlock(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        LatentBlock(np.zeros((0, 3, 4, 36)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_binary_roundtrip(tmp_path, rng, dtype):
    data = rng.normal((2, 3, 4, 36)).astype(dtype)
    save_latent(tmp_path / "x.oxl", data)
    back = load_latent(tmp_path / "x.oxl")
    assert back.dtype == dtype and np.array_equal(back, data)


def test_binary_header_is_little_endian():
    raw = latent_to_bytes(np.zeros((1, 2, 3, 4), dtype=np.float32))
    assert raw[:4] == b"OXLT"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert [int.from_bytes(raw[6 + 4 * i:10 + 4 * i], "little") for i in range(4)] == [1, 2, 3, 4]
    assert raw[22] == 1
    assert len(raw) == 23 + 24 * 4


def test_binary_rejects_corruption():
    raw = latent_to_bytes(np.zeros((1, 1, 1, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="magic"):
        latent_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="payload"):
        latent_from_bytes(raw[:-1])
