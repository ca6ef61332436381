import numpy as np
import pytest

from omnixfer import numerics as nx
from omnixfer.dit import DitConfig, DitModel, gelu
from omnixfer.latents import TaskKind, TaskSpec, build_reference_latent, build_target_latent
from omnixfer.tma import (
    Connector,
    ProviderInputs,
    QueryBank,
    StubProvider,
    compose_tasks,
    make_query_banks,
    select_bank,
    stub_provider,
    validate_provider,
)

CFG = DitConfig(layers=2, model_dim=16, heads=2, ffn_dim=32, n=4, time_embed_dim=8)


def inputs(rng, s=4):
    return ProviderInputs(rng.child("ff").normal((3, s)), rng.child("ref").normal((5, s)), rng.child("p").normal((s,)))


def test_banks_per_kind():
    banks = make_query_banks(0)
    assert set(banks) == set(TaskKind)
    assert banks[TaskKind.ID].tokens.shape == (64, 256)
    assert select_bank(banks, "style") is banks[TaskKind.STYLE]
    assert not np.array_equal(banks[TaskKind.ID].tokens, banks[TaskKind.STYLE].tokens)


def test_stub_provider_shape_and_determinism(rng):
    banks = make_query_banks(0, queries=8, provider_dim=12)
    inp = inputs(rng)
    a = stub_provider(inp, banks[TaskKind.MOTION])
    b = stub_provider(inp, banks[TaskKind.MOTION])
    assert a.shape == (8, 12) and np.array_equal(a, b)


def test_stub_provider_depends_on_task_template(rng):
    banks = make_query_banks(0, queries=2, provider_dim=6)
    shared = QueryBank(TaskKind.ID, banks[TaskKind.ID].tokens)
    other = QueryBank(TaskKind.STYLE, banks[TaskKind.ID].tokens)
    p = StubProvider(4, 6)
    assert not np.array_equal(p(inputs(rng), shared), p(inputs(rng), other))


def test_stub_provider_rejects_bad_summary(rng):
    with pytest.raises(ValueError):
        StubProvider(5, 6)(inputs(rng), make_query_banks(0, 2, 6)[TaskKind.ID])


def test_validate_provider(rng):
    banks = make_query_banks(0, queries=4, provider_dim=6)
    good = StubProvider(4, 6)
    assert validate_provider(good, inputs(rng), banks[TaskKind.ID]) == []

    class Flaky(StubProvider):
        calls = 0

        def __call__(self, inp, bank):
            self.calls += 1
            return super().__call__(inp, bank)[: 4 - self.calls % 2]

    problems = validate_provider(Flaky(4, 6), inputs(rng), banks[TaskKind.ID])
    assert any("shape" in p for p in problems) and any("deterministic" in p for p in problems)
    assert validate_provider(object(), inputs(rng), banks[TaskKind.ID]) != []


def test_connector_structure():
    c = Connector(12, 16, hidden_dim=8)
    params = c.parameters()
    assert [k for k in params if k.startswith("w")] == ["w1", "w2", "w3"]
    assert params["w1"] == (12, 8) and params["w3"] == (8, 16)


def test_connector_zero_input_gives_zero_kv(f64):
    model = DitModel(CFG)
    c = Connector(12, 16, hidden_dim=8)
    k, v = c(np.zeros((3, 12)), model.proj(0, "cross"))
    assert np.array_equal(k, np.zeros((3, 16))) and np.array_equal(v, np.zeros((3, 16)))


def test_connector_by_hand(f64, rng):
    c = Connector(6, 4, hidden_dim=5, seed=2)
    for i in (1, 2, 3):
        c.weights[f"b{i}"] = rng.child("b", i).normal(c.weights[f"b{i}"].shape)
    x = rng.normal((3, 6))
    w = c.weights
    expected = gelu(gelu(x @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]) @ w["w3"] + w["b3"]
    assert np.allclose(c.align(x), expected, atol=1e-9)
    with pytest.raises(ValueError):
        c.align(np.zeros((3, 5)))


def _spec(rng, model, kind, provider, banks, connector_dim=8):
    task = TaskSpec.parse(kind)
    raw = rng.child(kind).normal((1, 2, 2, 4))
    feats = provider(ProviderInputs(np.zeros(4), raw, np.zeros(4)), banks[task.kind])
    return task, build_reference_latent(raw, task), feats


@pytest.fixture
def kit(rng):
    model = DitModel(CFG)
    banks = make_query_banks(0, queries=3, provider_dim=8)
    provider = StubProvider(4, 8)
    connector = Connector(8, 16, hidden_dim=8)
    return model, banks, provider, connector


def test_single_task_matches_direct_path(f64, rng, kit):
    model, banks, provider, connector = kit
    task, l_ref, feats = _spec(rng, model, "camera", provider, banks)
    ctx = compose_tasks(model, [(task, l_ref, feats)], (1, 3), connector)
    direct = model.ref_branch_forward(l_ref, task, (1, 3))
    assert ctx.cache.digest() == direct.digest()
    assert np.array_equal(ctx.context, connector.align(feats))


def test_composed_sizes_and_slices(f64, rng, kit):
    model, banks, provider, connector = kit
    specs = [_spec(rng, model, k, provider, banks) for k in ("camera", "id")]
    ctx = compose_tasks(model, specs, (1, 3), connector)
    singles = [model.ref_branch_forward(l, t, (1, 3)) for t, l, _ in specs]
    assert ctx.cache.tokens == sum(c.tokens for c in singles) == 8
    assert ctx.context.shape[0] == 6 and ctx.context_sizes == (3, 3)
    for layer in range(2):
        assert np.array_equal(ctx.cache.layers[layer].keys[:4], singles[0].layers[layer].keys)
        assert np.array_equal(ctx.cache.layers[layer].keys[4:], singles[1].layers[layer].keys)
    summary = ctx.summary()
    assert summary["biases"] == [[0, 3, 0], [1, 0, 0]]
    assert summary["reference_kv_tokens"] == 8 and summary["semantic_kv_tokens"] == 6


def test_composition_is_order_free(f64, rng, kit):
    model, banks, provider, connector = kit
    specs = [_spec(rng, model, k, provider, banks) for k in ("motion", "style")]
    l_tgt = build_target_latent(rng.child("c").normal((1, 2, 3, 4)), rng.child("z").normal((1, 2, 3, 4)))
    outs = []
    for order in (specs, specs[::-1]):
        ctx = compose_tasks(model, order, (1, 3), connector)
        outs.append(model.model_forward(l_tgt, ctx.cache, 0.6, ctx.context))
    assert np.max(np.abs(outs[0] - outs[1])) < 1e-12


def test_composition_rejections(rng, kit):
    model, banks, provider, connector = kit
    cam = _spec(rng, model, "camera", provider, banks)
    with pytest.raises(ValueError, match="duplicate"):
        compose_tasks(model, [cam, cam], (1, 3), connector)
    two_app = [_spec(rng, model, k, provider, banks) for k in ("id", "style")]
    with pytest.raises(ValueError, match="appearance"):
        compose_tasks(model, two_app, (1, 3), connector)
    assert compose_tasks(model, two_app, (1, 3), connector, max_appearance=None).cache.tokens == 8
    with pytest.raises(ValueError):
        compose_tasks(model, [], (1, 3), connector)


def test_semantic_tokens_never_reach_reference_branch(f64, rng, kit):
    model, banks, provider, connector = kit
    task, l_ref, feats = _spec(rng, model, "effect", provider, banks)
    a = compose_tasks(model, [(task, l_ref, feats)], (1, 3), connector)
    b = compose_tasks(model, [(task, l_ref, feats * 3.0 + 1.0)], (1, 3), connector)
    assert a.cache.digest() == b.cache.digest()
    assert not np.array_equal(a.context, b.context)
