import numpy as np
import pytest

from omnixfer import numerics as nx
from omnixfer.attention import KVLayer
from omnixfer.dit import (
    DitConfig,
    DitModel,
    build_ref_cache,
    gelu,
    layer_norm,
    load_checkpoint,
    sample,
    save_checkpoint,
    sinusoidal_features,
)
from omnixfer.latents import TaskSpec, build_reference_latent, build_target_latent
from omnixfer.rope import position_grid

SMALL = dict(layers=2, model_dim=16, heads=2, ffn_dim=32, n=4, time_embed_dim=8)


def small_model(seed=0, **kw):
    return DitModel(DitConfig(seed=seed, **{**SMALL, **kw}))


def scene(rng, model, kind="camera", tgt=(2, 2, 3), ref=(1, 2, 2)):
    n = model.config.n
    task = TaskSpec.parse(kind)
    l_ref = build_reference_latent(rng.child("ref").normal(ref + (n,)), task)
    cond = rng.child("cond").normal((1,) + tgt[1:] + (n,))
    z = rng.child("z").normal(tgt + (n,))
    return task, l_ref, cond, z


def test_config_validation():
    with pytest.raises(ValueError):
        DitConfig(model_dim=10, heads=4)
    with pytest.raises(ValueError):
        DitConfig(model_dim=12, heads=4)
    assert DitConfig().in_channels == 36 and DitConfig().head_dim == 32


def test_time_embedding_at_zero():
    s = sinusoidal_features(0.0, 8)
    assert np.all(s[:4] == 0) and np.all(s[4:] == 1)


def test_time_embedding_rejects_out_of_range():
    with pytest.raises(ValueError):
        small_model().time_embed(1.5)


def test_layer_norm_and_gelu(f64):
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y = layer_norm(x)
    assert abs(y.mean()) < 1e-12 and abs(y.var() - 1.0) < 1e-5
    assert gelu(np.array([0.0]))[0] == 0.0
    assert abs(gelu(np.array([10.0]))[0] - 10.0) < 1e-9


def test_patch_embed_is_linear(f64, rng):
    model = small_model()
    task, l_ref, _, _ = scene(rng, model)
    x = model.patch_embed(l_ref)
    expected = l_ref.data.reshape(-1, 12) @ model.params["patch.w"]
    assert x.shape == (4, 16) and np.allclose(x, expected, atol=1e-12)


def test_patch_embed_rejects_channel_mismatch(rng):
    model = small_model()
    with pytest.raises(ValueError, match="2n\\+4"):
        model.patch_embed(build_reference_latent(rng.normal((1, 2, 2, 5)), TaskSpec.parse("id")))


def test_zeroed_outputs_make_block_identity(f64, rng):
    model = small_model()
    zeros = {}
    for l in range(2):
        zeros[f"blocks.{l}.self.wo"] = np.zeros((16, 16))
        zeros[f"blocks.{l}.ffn.w2"] = np.zeros((32, 16))
    model = model.with_params(**zeros)
    x = rng.normal((6, 16))
    out = model.block_forward(0, x, position_grid(1, 2, 3), KVLayer.empty(2, 8), model.time_embed(0.3))
    assert np.array_equal(out, x)


def test_single_token_block_by_hand(f64, rng):
    # one target token, one cached reference token: explicit two-way softmax
    model = small_model()
    x = rng.normal((1, 16))
    kv = KVLayer(rng.child("k").normal((1, 2, 8)), rng.child("v").normal((1, 2, 8)))
    temb = model.time_embed(0.4)
    out = model.block_forward(0, x, np.zeros((1, 3), dtype=int), kv, temb)

    p = model.params
    sil = temb.vector / (1 + np.exp(-temb.vector))
    mod = sil @ p["blocks.0.mod.w"] + p["blocks.0.mod.b"]
    sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6)
    ln = lambda a: (a - a.mean()) / np.sqrt(a.var() + 1e-6)
    h = ln(x[0]) * (1 + sc1) + sh1
    q = (h @ p["blocks.0.self.wq"]).reshape(2, 8)
    k = (h @ p["blocks.0.self.wk"]).reshape(2, 8)
    v = (h @ p["blocks.0.self.wv"]).reshape(2, 8)
    mixed = []
    for hh in range(2):
        s = np.array([q[hh] @ k[hh], q[hh] @ kv.keys[0, hh]]) / np.sqrt(8)
        w = np.exp(s - s.max())
        w /= w.sum()
        mixed.append(w[0] * v[hh] + w[1] * kv.values[0, hh])
    y = x[0] + g1 * (np.concatenate(mixed) @ p["blocks.0.self.wo"])
    hid = gelu(((ln(y) * (1 + sc2) + sh2) @ p["blocks.0.ffn.w1"]) + p["blocks.0.ffn.b1"])
    y = y + g2 * (hid @ p["blocks.0.ffn.w2"] + p["blocks.0.ffn.b2"])
    assert np.allclose(out[0], y, atol=1e-9)


def test_cache_shape_and_wiring(rng):
    model = small_model()
    task, l_ref, _, _ = scene(rng, model)
    cache = build_ref_cache(model, l_ref, task, (2, 3))
    assert len(cache.layers) == 2 and cache.tokens == 4
    assert cache.layers[0].keys.shape == (4, 2, 8)
    assert cache.parts[0]["bias"] == [0, 3, 0]
    again = build_ref_cache(model, l_ref, task, (2, 3))
    assert again.digest() == cache.digest()


def test_reference_branch_ignores_timestep_and_target(rng):
    model = small_model()
    task, l_ref, cond, z = scene(rng, model)
    cache = model.ref_branch_forward(l_ref, task, (2, 3))
    before = cache.digest()
    for t in (1.0, 0.5, 0.1):
        model.model_forward(build_target_latent(cond, z * t), cache, t)
    assert cache.digest() == before


def test_counters_and_recompute_identity(rng):
    model = small_model()
    task, l_ref, cond, z = scene(rng, model)
    model.counters.clear()
    cache = model.ref_branch_forward(l_ref, task, (2, 3))
    out = sample(model, cond, cache, 4, z_init=z)
    assert model.counters["reference_forward"] == 1 and model.counters["target_forward"] == 4
    rec = sample(model, cond, None, 4, z_init=z, topology="recompute", references=[(l_ref, task)])
    assert np.array_equal(out, rec)


def test_decoupled_sampling_matches_joint(f64, rng):
    model = small_model()
    task, l_ref, cond, z = scene(rng, model, "id")
    cache = model.ref_branch_forward(l_ref, task, (2, 3))
    dec = sample(model, cond, cache, 3, z_init=z)
    joint = sample(model, cond, None, 3, z_init=z, topology="joint", references=[(l_ref, task)])
    assert np.max(np.abs(dec - joint)) < 1e-12


def test_single_step_is_one_euler_update(f64, rng):
    model = small_model()
    task, l_ref, cond, z = scene(rng, model)
    cache = model.ref_branch_forward(l_ref, task, (2, 3))
    v = model.model_forward(build_target_latent(cond, z), cache, 1.0)
    assert np.array_equal(sample(model, cond, cache, 1, z_init=z), z - v)


def test_sample_argument_checks(rng):
    model = small_model()
    task, l_ref, cond, z = scene(rng, model)
    with pytest.raises(ValueError):
        sample(model, cond, None, 2, z_init=z)
    with pytest.raises(ValueError):
        sample(model, cond, None, 0, z_init=z)
    with pytest.raises(ValueError):
        sample(model, cond, None, 2)


def test_sample_from_rng_is_deterministic(rng):
    model = small_model()
    task, l_ref, cond, _ = scene(rng, model)
    cache = model.ref_branch_forward(l_ref, task, (2, 3))
    a = sample(model, cond, cache, 2, rng=nx.Rng(5), grid=(2, 2, 3))
    b = sample(model, cond, cache, 2, rng=nx.Rng(5), grid=(2, 2, 3))
    assert np.array_equal(a, b)


def test_fingerprint_mismatch(rng):
    model = small_model()
    other = small_model(seed=1)
    task, l_ref, cond, z = scene(rng, model)
    cache = other.ref_branch_forward(l_ref, task, (2, 3))
    with pytest.raises(ValueError, match="fingerprint mismatch"):
        model.model_forward(build_target_latent(cond, z), cache, 0.5)
    wrong_extent = model.ref_branch_forward(l_ref, task, (4, 3))
    with pytest.raises(ValueError, match="fingerprint mismatch"):
        model.model_forward(build_target_latent(cond, z), wrong_extent, 0.5)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = small_model(seed=3)
    save_checkpoint(model, tmp_path / "m.oxck")
    back = load_checkpoint(tmp_path / "m.oxck")
    assert back.fingerprint == model.fingerprint
    assert back.config == model.config
    task, l_ref, _, _ = scene(rng, model)
    assert back.ref_branch_forward(l_ref, task, (2, 3)).digest() == model.ref_branch_forward(l_ref, task, (2, 3)).digest()


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_reference_cross_attention_flag(rng):
    model = small_model(ref_cross_attention=True)
    task, l_ref, _, _ = scene(rng, model)
    with pytest.raises(ValueError, match="reference context"):
        model.ref_branch_forward(l_ref, task, (2, 3))
    ctx = rng.child("ctx").normal((3, 16))
    with_ctx = model.ref_branch_forward(l_ref, task, (2, 3), ref_context=ctx)
    plain = small_model().ref_branch_forward(l_ref, task, (2, 3))
    # first-layer keys precede any cross-attention; later hidden states do not
    assert np.array_equal(with_ctx.layers[0].keys, plain.layers[0].keys)
    assert not np.array_equal(with_ctx.hidden[-1], plain.hidden[-1])


def test_with_params_rejects_unknown():
    with pytest.raises(KeyError):
        small_model().with_params(nope=np.zeros(1))
