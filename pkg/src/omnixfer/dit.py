"""Toy diffusion transformer with a decoupled, time-invariant reference branch.

Each block is: self-attention (target over ``[target; reference]`` keys),
cross-attention to an external context (target only, by default), and a
GELU feed-forward, with adaLN-style shift/scale/gate modulation from the
time embedding. The reference branch always runs at ``t = 0`` and is run once
per sample; its rotated keys/values are reused at every sampling step.

``joint_forward`` is the conventional alternative: both branches go through
one masked full attention every step. It exists as the benchmark baseline
and produces the same target outputs.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import (
    KVLayer,
    ProjectionSet,
    RefCache,
    block_causal_mask,
    cache_fingerprint,
    cross_attn,
    joint_baseline,
    ref_self_attn,
    tgt_causal_attn,
)
from .latents import MASK_CHANNELS, LatentBlock, TaskSpec, build_target_latent
from .rope import RopeConfig, position_grid, task_bias


@dataclass(frozen=True)
class DitConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    n: int = 16
    time_embed_dim: int = 128
    seed: int = 0
    ref_cross_attention: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "ffn_dim", "n", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if (self.model_dim // self.heads) % 2:
            raise ValueError("head_dim must be even for rotary embedding")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def in_channels(self) -> int:
        return 2 * self.n + MASK_CHANNELS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TimeEmbedding:
    t: float
    sinusoid: np.ndarray
    vector: np.ndarray


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def silu(x):
    return x / (1.0 + np.exp(-x))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def sinusoidal_features(t: float, dim: int) -> np.ndarray:
    """``[sin(1000 t w_i), cos(1000 t w_i)]`` with log-spaced ``w_i``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(nx.get_dtype())


def init_params(cfg: DitConfig) -> dict[str, np.ndarray]:
    rng = nx.Rng(cfg.seed, "dit")
    D, F, E = cfg.model_dim, cfg.ffn_dim, cfg.time_embed_dim

    def lin(name, fan_in, fan_out, scale=1.0):
        return rng.child(name).normal((fan_in, fan_out), scale / np.sqrt(fan_in))

    dt = nx.get_dtype()
    p = {
        "patch.w": lin("patch.w", cfg.in_channels, D),
        "time.w1": lin("time.w1", E, D),
        "time.b1": np.zeros(D, dtype=dt),
        "time.w2": lin("time.w2", D, D),
        "time.b2": np.zeros(D, dtype=dt),
        "head.w": lin("head.w", D, cfg.n, 0.5),
    }
    gate_bias = np.zeros(6 * D, dtype=dt)
    gate_bias[2 * D : 3 * D] = 1.0
    gate_bias[5 * D : 6 * D] = 1.0
    for l in range(cfg.layers):
        pre = f"blocks.{l}"
        p[f"{pre}.mod.w"] = lin(f"{pre}.mod.w", D, 6 * D, 0.2)
        p[f"{pre}.mod.b"] = gate_bias.copy()
        for branch in ("self", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.{branch}.{w}"] = lin(f"{pre}.{branch}.{w}", D, D)
        p[f"{pre}.ffn.w1"] = lin(f"{pre}.ffn.w1", D, F)
        p[f"{pre}.ffn.b1"] = np.zeros(F, dtype=dt)
        p[f"{pre}.ffn.w2"] = lin(f"{pre}.ffn.w2", F, D)
        p[f"{pre}.ffn.b2"] = np.zeros(D, dtype=dt)
    return p


class DitModel:
    """Weights plus forward passes. Weights are never mutated after construction.

    ``counters`` tallies branch forward passes: ``reference_forward`` (one
    full reference-branch pass), ``target_forward`` (one target pass over a
    cache) and ``joint_forward`` (one pass of the joint baseline).
    """

    def __init__(self, config: DitConfig | None = None, params: dict | None = None):
        self.config = config or DitConfig()
        self.params = init_params(self.config) if params is None else dict(params)
        self.rope = RopeConfig(self.config.head_dim, base=self.config.rope_base)
        self.counters: Counter = Counter()
        self._proj: dict = {}

    @functools.cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]

    def proj(self, layer: int, branch: str) -> ProjectionSet:
        key = (layer, branch)
        if key not in self._proj:
            pre = f"blocks.{layer}.{branch}"
            self._proj[key] = ProjectionSet(
                *(self.params[f"{pre}.{w}"] for w in ("wq", "wk", "wv", "wo")), heads=self.config.heads
            )
        return self._proj[key]

    def with_params(self, **updates) -> "DitModel":
        """Copy of the model with some tensors replaced (names use '.' as usual)."""
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            params[name] = np.asarray(value, dtype=params[name].dtype)
        return DitModel(self.config, params)

    # -- embeddings ---------------------------------------------------------

    def time_embed(self, t: float) -> TimeEmbedding:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"timestep must lie in [0, 1], got {t}")
        p = self.params
        s = sinusoidal_features(t, self.config.time_embed_dim)
        hidden = silu(nx.matmul(s[None], p["time.w1"])[0] + p["time.b1"])
        vec = nx.matmul(hidden[None], p["time.w2"])[0] + p["time.b2"]
        return TimeEmbedding(float(t), s, vec)

    def patch_embed(self, block: LatentBlock) -> np.ndarray:
        if block.channels != self.config.in_channels:
            raise ValueError(
                f"latent has {block.channels} channels, model expects 2n+4 = {self.config.in_channels}"
            )
        f, h, w, c = block.data.shape
        return nx.matmul(block.data.reshape(f * h * w, c), self.params["patch.w"])

    def modulation(self, layer: int, temb: TimeEmbedding):
        p = self.params
        mod = nx.matmul(silu(temb.vector)[None], p[f"blocks.{layer}.mod.w"])[0] + p[f"blocks.{layer}.mod.b"]
        return np.split(mod, 6)

    def ffn(self, layer: int, x: np.ndarray) -> np.ndarray:
        p = self.params
        pre = f"blocks.{layer}.ffn"
        hidden = gelu(nx.matmul(x, p[f"{pre}.w1"]) + p[f"{pre}.b1"])
        return nx.matmul(hidden, p[f"{pre}.w2"]) + p[f"{pre}.b2"]

    def external_kv(self, layer: int, context: np.ndarray):
        cp = self.proj(layer, "cross")
        return nx.matmul(context, cp.wk), nx.matmul(context, cp.wv)

    def _cross(self, layer, x, context):
        k, v = self.external_kv(layer, context)
        return cross_attn(layer_norm(x), k, v, self.proj(layer, "cross"))

    # -- branches -----------------------------------------------------------

    def block_forward(self, layer: int, x, coords, cache_layer: KVLayer, temb: TimeEmbedding, context=None):
        """One target block: causal self-attention, cross-attention, modulated FFN."""
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(layer, temb)
        sp = self.proj(layer, "self")
        h = layer_norm(x) * (1.0 + sc1) + sh1
        x = x + g1 * tgt_causal_attn(h, cache_layer, sp, coords, self.rope)
        if context is not None:
            x = x + self._cross(layer, x, context)
        h = layer_norm(x) * (1.0 + sc2) + sh2
        return x + g2 * self.ffn(layer, h)

    def ref_branch_forward(self, l_ref: LatentBlock, task, target_extent, ref_context=None) -> RefCache:
        """Single t=0 pass of the reference branch, recording rotated K/V per layer.

        ``target_extent`` is ``(f_tgt, w_tgt)`` of the target grid, which fixes
        the positional offset of the reference tokens.
        """
        task = TaskSpec.parse(task)
        cfg = self.config
        if cfg.ref_cross_attention and ref_context is None:
            raise ValueError("ref_cross_attention is on but no reference context was given")
        f_tgt, w_tgt = (int(x) for x in target_extent)
        bias = task_bias(task, f_tgt, w_tgt)
        coords = position_grid(*l_ref.grid, bias)
        temb = self.time_embed(0.0)
        x = self.patch_embed(l_ref)
        layers, hidden = [], []
        for l in range(cfg.layers):
            sh1, sc1, g1, sh2, sc2, g2 = self.modulation(l, temb)
            sp = self.proj(l, "self")
            h = layer_norm(x) * (1.0 + sc1) + sh1
            a, kv = ref_self_attn(h, coords, sp, self.rope, return_kv=True)
            layers.append(kv)
            x = x + g1 * a
            if cfg.ref_cross_attention:
                x = x + self._cross(l, x, ref_context)
            h = layer_norm(x) * (1.0 + sc2) + sh2
            x = x + g2 * self.ffn(l, h)
            hidden.append(x)
        self.counters["reference_forward"] += 1
        fp = cache_fingerprint(self.fingerprint, task, bias, l_ref.data.shape, (f_tgt, w_tgt))
        part = {"task": task.kind.value, "bias": bias.as_list(), "tokens": int(x.shape[0]), "fingerprint": fp}
        return RefCache(tuple(layers), tuple(hidden), fp, self.fingerprint, (f_tgt, w_tgt), (part,))

    def check_cache(self, cache: RefCache, l_tgt: LatentBlock) -> None:
        if cache.model_fingerprint != self.fingerprint:
            raise ValueError(
                f"reference cache fingerprint mismatch: built by model {cache.model_fingerprint}, "
                f"used with {self.fingerprint}"
            )
        if cache.target_extent != (l_tgt.frames, l_tgt.width):
            raise ValueError(
                f"reference cache fingerprint mismatch: biases built for target extent "
                f"{cache.target_extent}, target is {(l_tgt.frames, l_tgt.width)}"
            )
        if len(cache.layers) != self.config.layers:
            raise ValueError(f"cache has {len(cache.layers)} layers, model has {self.config.layers}")

    def head(self, x: np.ndarray, grid) -> np.ndarray:
        out = nx.matmul(layer_norm(x), self.params["head.w"])
        return out.reshape(*grid, self.config.n)

    def model_forward(self, l_tgt: LatentBlock, cache: RefCache, t: float, context=None) -> np.ndarray:
        """Velocity prediction ``[f, h, w, n]`` for the target latent at timestep ``t``."""
        self.check_cache(cache, l_tgt)
        temb = self.time_embed(t)
        coords = position_grid(*l_tgt.grid)
        x = self.patch_embed(l_tgt)
        for l in range(self.config.layers):
            x = self.block_forward(l, x, coords, cache.layers[l], temb, context)
        self.counters["target_forward"] += 1
        return self.head(x, l_tgt.grid)

    def joint_forward(self, l_tgt: LatentBlock, references, t: float, context=None, ref_context=None) -> np.ndarray:
        """Baseline topology: one block-masked full attention over ``[target; references]``.

        ``references`` is a list of ``(l_ref, task)``. The reference tokens are
        recomputed here at t=0 on every call.
        """
        cfg = self.config
        temb_t = self.time_embed(t)
        temb_0 = self.time_embed(0.0)
        f_tgt, w_tgt = l_tgt.frames, l_tgt.width
        coords = [position_grid(*l_tgt.grid)]
        xs = [self.patch_embed(l_tgt)]
        for l_ref, task in references:
            coords.append(position_grid(*l_ref.grid, task_bias(task, f_tgt, w_tgt)))
            xs.append(self.patch_embed(l_ref))
        n_tgt = xs[0].shape[0]
        x_t = xs[0]
        x_r = nx.concat(0, *xs[1:]) if len(xs) > 1 else np.zeros((0, cfg.model_dim), dtype=x_t.dtype)
        coords_all = np.concatenate(coords, axis=0)
        mask = block_causal_mask(n_tgt, x_r.shape[0])
        for l in range(cfg.layers):
            mt = self.modulation(l, temb_t)
            mr = self.modulation(l, temb_0)
            h_all = nx.concat(
                0, layer_norm(x_t) * (1.0 + mt[1]) + mt[0], layer_norm(x_r) * (1.0 + mr[1]) + mr[0]
            )
            a_all = joint_baseline(h_all, coords_all, mask, self.proj(l, "self"), self.rope)
            x_t = x_t + mt[2] * a_all[:n_tgt]
            x_r = x_r + mr[2] * a_all[n_tgt:]
            if context is not None:
                x_t = x_t + self._cross(l, x_t, context)
            if cfg.ref_cross_attention:
                x_r = x_r + self._cross(l, x_r, ref_context)
            h_all = nx.concat(
                0, layer_norm(x_t) * (1.0 + mt[4]) + mt[3], layer_norm(x_r) * (1.0 + mr[4]) + mr[3]
            )
            f_all = self.ffn(l, h_all)
            x_t = x_t + mt[5] * f_all[:n_tgt]
            x_r = x_r + mr[5] * f_all[n_tgt:]
        self.counters["joint_forward"] += 1
        return self.head(x_t, l_tgt.grid)


def build_ref_cache(model: DitModel, l_ref: LatentBlock, task, target_extent, ref_context=None) -> RefCache:
    return model.ref_branch_forward(l_ref, task, target_extent, ref_context)


def sample(
    model: DitModel,
    cond_latent,
    cache: RefCache | None,
    steps: int,
    *,
    z_init=None,
    rng: nx.Rng | None = None,
    grid=None,
    context=None,
    topology: str = "decoupled",
    references=None,
    ref_context=None,
) -> np.ndarray:
    """Euler integration of the rectified-flow ODE from t=1 to t=0.

    ``topology``:
      * ``"decoupled"`` reuses ``cache`` at every step (one reference pass total);
      * ``"recompute"`` rebuilds the reference cache from ``references`` every step;
      * ``"joint"`` runs the masked full-attention baseline over ``references``.
    Initial noise is ``z_init`` or, failing that, drawn from ``rng`` with shape ``grid + (n,)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if z_init is None:
        if rng is None or grid is None:
            raise ValueError("pass z_init, or rng together with grid")
        z_init = nx.seeded_normal(tuple(grid) + (model.config.n,), rng)
    z = nx.asarray(z_init).copy()
    if topology == "decoupled" and cache is None:
        raise ValueError("decoupled sampling needs a reference cache")
    if topology in ("recompute", "joint") and not references:
        raise ValueError(f"{topology} sampling needs the reference latents")
    if topology not in ("decoupled", "recompute", "joint"):
        raise ValueError(f"unknown topology {topology!r}")
    dt = 1.0 / steps
    extent = (z.shape[0], z.shape[2])
    for k in range(steps, 0, -1):
        t = k / steps
        l_tgt = build_target_latent(cond_latent, z)
        if topology == "joint":
            v = model.joint_forward(l_tgt, references, t, context, ref_context)
        else:
            if topology == "recompute":
                cache = RefCache.concat(
                    model.ref_branch_forward(l_ref, task, extent, ref_context) for l_ref, task in references
                )
            v = model.model_forward(l_tgt, cache, t, context)
        z = z - dt * v
    return z


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"OXCK"
_LEN = struct.Struct("<Q")


def save_checkpoint(model: DitModel, path) -> dict:
    """Flat named-tensor container: magic, manifest length, JSON manifest, payload."""
    entries, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "omnixfer-checkpoint", "version": 1, "config": model.config.to_dict(), "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True).encode()
    Path(path).write_bytes(_CKPT_MAGIC + _LEN.pack(len(blob)) + blob + b"".join(chunks))
    return manifest


def load_checkpoint(path) -> DitModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = _LEN.unpack_from(raw, 4)
    start = 4 + _LEN.size
    manifest = json.loads(raw[start : start + mlen])
    payload = raw[start + mlen :]
    params = {}
    for e in manifest["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        dt = np.dtype(e["dtype"])
        params[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return DitModel(DitConfig(**manifest["config"]), params)
