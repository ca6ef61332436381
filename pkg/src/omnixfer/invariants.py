"""Named invariant checks run by ``omnixfer verify``.

Every check takes a seed and size knobs and returns an :class:`InvariantResult`.
Ids are stable; the report lists them in :data:`INVARIANT_IDS` order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    ProjectionSet,
    block_causal_mask,
    joint_baseline,
    ref_self_attn,
    tgt_causal_attn,
)
from .dit import DitConfig, DitModel, sample
from .gradcheck import check_attention_path
from .latents import MASK_CHANNELS, TaskKind, TaskSpec, build_reference_latent, build_target_latent
from .rope import (
    RopeConfig,
    apply_rope,
    placement_canvas_coords,
    position_grid,
    task_bias,
)
from .tma import Connector, ProviderInputs, StubProvider, compose_tasks, make_query_banks

INVARIANT_IDS = (
    "latent_construction",
    "rope_shift_invariance",
    "bias_placement",
    "decoupling_equivalence",
    "causality",
    "cache_consistency",
    "gradient_check",
    "composition_permutation",
)


@dataclass
class InvariantResult:
    id: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "passed": bool(self.passed), "detail": self.detail}


def random_branch_instance(rng: nx.Rng, n_ref: int, n_tgt: int, heads: int, d: int):
    """Random projections plus reference/target tokens on small grids (reference biased)."""
    dim = heads * d
    proj = ProjectionSet.random(dim, heads, rng.child("proj"))
    cfg = RopeConfig(d)
    x_ref = rng.child("x_ref").normal((n_ref, dim))
    x_tgt = rng.child("x_tgt").normal((n_tgt, dim))
    task = TaskSpec(list(TaskKind)[int(rng.integers(0, len(TaskKind)))])
    # 1 x 1 x N grids keep every token count reachable
    tgt_coords = position_grid(1, 1, n_tgt)
    ref_coords = position_grid(1, 1, n_ref, task_bias(task, 1, n_tgt))
    return proj, cfg, x_ref, x_tgt, tgt_coords, ref_coords


def decoupled_vs_joint(proj, cfg, x_ref, x_tgt, tgt_coords, ref_coords, fault_swap_kv=None):
    """Max relative deviation between the two-branch path and the masked joint oracle."""
    out_ref, kv = ref_self_attn(x_ref, ref_coords, proj, cfg, return_kv=True)
    out_tgt = tgt_causal_attn(x_tgt, kv, proj, tgt_coords, cfg)
    n_tgt = x_tgt.shape[0]
    x_all = nx.concat(0, x_tgt, x_ref)
    coords_all = np.concatenate([tgt_coords, ref_coords])
    mask = block_causal_mask(n_tgt, x_ref.shape[0])
    joint = joint_baseline(x_all, coords_all, mask, proj, cfg, fault_swap_kv=fault_swap_kv)
    split = nx.concat(0, out_tgt, out_ref)
    return float(np.max(np.abs(split - joint)) / max(1.0, float(np.max(np.abs(joint)))))


def check_latent_construction(seed: int = 0, n: int = 4) -> InvariantResult:
    rng = nx.Rng(seed, "inv/latent")
    bad = []
    for kind in TaskKind:
        task = TaskSpec(kind)
        ref = rng.child(kind.value).normal((2, 3, 5, n))
        block = build_reference_latent(ref, task)
        c, m, z = block.parts()
        ok = (
            block.channels == 2 * n + MASK_CHANNELS
            and np.all(m == task.mask_flag)
            and np.array_equal(c, z)
            and np.array_equal(z, ref)
            and np.array_equal(nx.concat(-1, c, m, z), block.data)
        )
        if not ok:
            bad.append(kind.value)
    tgt = build_target_latent(rng.normal((1, 3, 5, n)), rng.normal((2, 3, 5, n)))
    if tgt.channels != 2 * n + MASK_CHANNELS or not (np.all(tgt.mask[0] == 1) and np.all(tgt.mask[1:] == 0)):
        bad.append("target")
    return InvariantResult("latent_construction", not bad, {"failed": bad})


def check_rope_shift(seed: int = 0, draws: int = 200, d: int = 12, tol: float = 1e-8) -> InvariantResult:
    rng = nx.Rng(seed, "inv/rope")
    cfg = RopeConfig(d, (2, 2, 2))
    with nx.precision("f64"):
        worst = _max_shift_error(rng, cfg, d, draws)
    return InvariantResult("rope_shift_invariance", worst < tol, {"max_abs_diff": worst, "tol": tol})


def _max_shift_error(rng, cfg, d, draws):
    worst = 0.0
    for axis in range(3):
        for i in range(draws):
            r = rng.child(axis, i)
            q = r.child("q").normal((1, 1, d))
            k = r.child("k").normal((1, 1, d))
            p = r.integers(-50, 50, size=(2, 3))
            shift = np.zeros(3, dtype=int)
            shift[axis] = int(r.integers(-100, 100))
            base = np.sum(apply_rope(q, p[:1], cfg) * apply_rope(k, p[1:], cfg))
            moved = np.sum(apply_rope(q, p[:1] + shift, cfg) * apply_rope(k, p[1:] + shift, cfg))
            worst = max(worst, abs(float(base - moved)))
    return worst


def check_bias_placement(seed: int = 0) -> InvariantResult:
    rng = nx.Rng(seed, "inv/bias")
    cfg = RopeConfig(12)
    tgt_grid, ref_grid = (3, 4, 5), (2, 3, 6)
    mismatched = []
    for kind in TaskKind:
        task = TaskSpec(kind)
        biased = position_grid(*ref_grid, task_bias(task, tgt_grid[0], tgt_grid[2]))
        placed = placement_canvas_coords(task, tgt_grid, ref_grid)
        x = rng.child(kind.value).normal((biased.shape[0], 2, 12))
        if not (np.array_equal(biased, placed) and np.array_equal(apply_rope(x, biased, cfg), apply_rope(x, placed, cfg))):
            mismatched.append(kind.value)
    return InvariantResult("bias_placement", not mismatched, {"mismatched": mismatched})


def check_decoupling(seed: int = 0, instances: int = 10, max_tokens: int = 16, tol: float = 1e-8,
                     fault: str | None = None) -> InvariantResult:
    rng = nx.Rng(seed, "inv/decouple")
    worst = 0.0
    with nx.precision("f64"):
        for i in range(instances):
            r = rng.child(i)
            n_ref = int(r.integers(1, max_tokens + 1))
            n_tgt = int(r.integers(1, max_tokens + 1))
            heads = int(r.integers(1, 3))
            d = [4, 8][int(r.integers(0, 2))]
            inst = random_branch_instance(r, n_ref, n_tgt, heads, d)
            swap = n_tgt if fault == "kv-order" else None
            worst = max(worst, decoupled_vs_joint(*inst, fault_swap_kv=swap))
    return InvariantResult("decoupling_equivalence", worst < tol, {"max_rel_diff": worst, "tol": tol, "fault": fault})


def check_causality(seed: int = 0, perturbations: int = 5) -> InvariantResult:
    """Reference outputs and caches must not move when target tokens do."""
    model = DitModel(DitConfig(layers=2, model_dim=16, heads=2, ffn_dim=32, n=4, time_embed_dim=8, seed=seed))
    rng = nx.Rng(seed, "inv/causal")
    task = TaskSpec(TaskKind.MOTION)
    l_ref = build_reference_latent(rng.child("ref").normal((1, 2, 3, 4)), task)
    digest = model.ref_branch_forward(l_ref, task, (1, 3)).digest()
    proj, cfg, x_ref, x_tgt, tgt_coords, ref_coords = random_branch_instance(rng.child("attn"), 5, 4, 2, 4)
    n_tgt = x_tgt.shape[0]
    coords_all = np.concatenate([tgt_coords, ref_coords])
    mask = block_causal_mask(n_tgt, x_ref.shape[0])
    joint_ref = joint_baseline(nx.concat(0, x_tgt, x_ref), coords_all, mask, proj, cfg)[n_tgt:]
    changed = 0
    for i in range(perturbations):
        cond = rng.child("cond", i).normal((1, 2, 3, 4))
        z = rng.child("z", i).normal((1, 2, 3, 4))
        cache = model.ref_branch_forward(l_ref, task, (1, 3))
        model.model_forward(build_target_latent(cond, z), cache, 0.5)
        changed += cache.digest() != digest
        x_pert = x_tgt + rng.child("dx", i).normal(x_tgt.shape)
        out = joint_baseline(nx.concat(0, x_pert, x_ref), coords_all, mask, proj, cfg)
        changed += not np.array_equal(out[n_tgt:], joint_ref)
    return InvariantResult("causality", changed == 0, {"changed": int(changed)})


def check_cache_consistency(seed: int = 0, steps=(1, 3)) -> InvariantResult:
    model = DitModel(DitConfig(layers=2, model_dim=32, heads=2, ffn_dim=64, n=4, time_embed_dim=16, seed=seed))
    rng = nx.Rng(seed, "inv/cache")
    task = TaskSpec(TaskKind.CAMERA)
    l_ref = build_reference_latent(rng.child("ref").normal((1, 2, 3, 4)), task)
    cond = rng.child("cond").normal((1, 2, 3, 4))
    z0 = rng.child("z").normal((1, 2, 3, 4))
    detail = {}
    ok = True
    for s in steps:
        model.counters.clear()
        cache = model.ref_branch_forward(l_ref, task, (1, 3))
        cached = sample(model, cond, cache, s, z_init=z0)
        counts = dict(model.counters)
        recomputed = sample(model, cond, None, s, z_init=z0, topology="recompute", references=[(l_ref, task)])
        same = bool(np.array_equal(cached, recomputed))
        counted = counts.get("reference_forward") == 1 and counts.get("target_forward") == s
        ok &= same and counted
        detail[f"S={s}"] = {"bit_identical": same, "counters": counts}
    return InvariantResult("cache_consistency", ok, detail)


def check_gradients(seed: int = 0, tol: float = 1e-4) -> InvariantResult:
    with nx.precision("f64"):
        rng = nx.Rng(seed, "inv/grad")
        proj, cfg, x_ref, x_tgt, tgt_coords, ref_coords = random_branch_instance(rng, 2, 3, 2, 4)
        reports = check_attention_path(x_tgt, tgt_coords, [(x_tgt, tgt_coords), (x_ref, ref_coords)], proj, cfg, tol=tol)
        reports += check_attention_path(x_ref, ref_coords, [(x_ref, ref_coords)], proj, cfg, tol=tol)
    worst = max(r.max_rel_err for r in reports)
    return InvariantResult("gradient_check", all(r.passed for r in reports), {"max_rel_err": worst, "tol": tol})


def check_composition(seed: int = 0, tol: float = 1e-8) -> InvariantResult:
    with nx.precision("f64"):
        cfg = DitConfig(layers=2, model_dim=32, heads=2, ffn_dim=64, n=4, time_embed_dim=16, seed=seed)
        model = DitModel(cfg)
        rng = nx.Rng(seed, "inv/compose")
        banks = make_query_banks(seed, queries=4, provider_dim=16)
        provider = StubProvider(summary_dim=4, provider_dim=16, seed=seed)
        connector = Connector(16, cfg.model_dim, hidden_dim=16, seed=seed)
        specs = []
        for kind in (TaskKind.CAMERA, TaskKind.ID):
            task = TaskSpec(kind)
            raw = rng.child(kind.value).normal((1, 2, 2, 4))
            feats = provider(ProviderInputs(np.zeros(4), raw, np.zeros(4)), banks[kind])
            specs.append((task, build_reference_latent(raw, task), feats))
        l_tgt = build_target_latent(rng.child("cond").normal((1, 2, 3, 4)), rng.child("z").normal((1, 2, 3, 4)))
        outs = []
        for order in (specs, specs[::-1]):
            ctx = compose_tasks(model, order, (1, 3), connector)
            outs.append(model.model_forward(l_tgt, ctx.cache, 0.7, ctx.context))
        diff = float(np.max(np.abs(outs[0] - outs[1])))
    return InvariantResult("composition_permutation", diff < tol, {"max_abs_diff": diff, "tol": tol})


def run_all(seed: int = 0, fault: str | None = None) -> list[InvariantResult]:
    checks = {
        "latent_construction": lambda: check_latent_construction(seed),
        "rope_shift_invariance": lambda: check_rope_shift(seed),
        "bias_placement": lambda: check_bias_placement(seed),
        "decoupling_equivalence": lambda: check_decoupling(seed, fault=fault),
        "causality": lambda: check_causality(seed),
        "cache_consistency": lambda: check_cache_consistency(seed),
        "gradient_check": lambda: check_gradients(seed),
        "composition_permutation": lambda: check_composition(seed),
    }
    return [checks[i]() for i in INVARIANT_IDS]
