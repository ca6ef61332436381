"""Attention primitives for the reference-decoupled topology.

Token layout conventions used throughout:

* activations are ``[tokens, model_dim]`` row vectors, projections are
  ``x @ W`` with ``W`` of shape ``[model_dim, model_dim]``;
* per-head tensors are ``[tokens, heads, head_dim]``;
* whenever target and reference keys share one softmax, keys are ordered
  ``[target; reference]``.

The reference branch only ever sees reference tokens. The target branch
attends over its own keys plus the cached, already-rotated reference keys.
:func:`joint_baseline` computes the same thing as one masked full attention
and exists purely as an oracle / benchmark baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .rope import RopeConfig, apply_rope


@dataclass(frozen=True)
class ProjectionSet:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        dim = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (dim, dim):
                raise ValueError(f"{name} has shape {w.shape}, expected ({dim}, {dim})")
        if self.heads < 1 or dim % self.heads:
            raise ValueError(f"model_dim {dim} is not divisible by heads={self.heads}")

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @classmethod
    def random(cls, model_dim: int, heads: int, rng: nx.Rng, scale: float | None = None) -> "ProjectionSet":
        scale = 1.0 / np.sqrt(model_dim) if scale is None else scale
        ws = [rng.child(name).normal((model_dim, model_dim), scale) for name in ("q", "k", "v", "o")]
        return cls(*ws, heads=heads)

    def astype(self, dtype) -> "ProjectionSet":
        return ProjectionSet(*(w.astype(dtype) for w in (self.wq, self.wk, self.wv, self.wo)), heads=self.heads)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, dim = x.shape
    return x.reshape(n, heads, dim // heads)


def merge_heads(x: np.ndarray) -> np.ndarray:
    n, h, d = x.shape
    return x.reshape(n, h * d)


def project(x: np.ndarray, w: np.ndarray, heads: int) -> np.ndarray:
    return split_heads(nx.matmul(x, w), heads)


def scaled_dot_attention(q, k, v, mask=None, return_weights: bool = False):
    """Per-head ``softmax(q k^T / sqrt(d)) v`` on ``[tokens, heads, d]`` tensors."""
    if q.shape[-1] != k.shape[-1] or q.shape[1] != k.shape[1]:
        raise ValueError(f"query {q.shape} and key {k.shape} head layouts disagree")
    if k.shape[0] != v.shape[0] or k.shape[1] != v.shape[1]:
        raise ValueError(f"key {k.shape} and value {v.shape} token/head counts disagree")
    d = q.shape[-1]
    qh = q.transpose(1, 0, 2)
    kt = k.transpose(1, 2, 0)
    vh = v.transpose(1, 0, 2)
    scores = nx.matmul(qh, kt) / np.sqrt(d).astype(q.dtype)
    weights = nx.softmax_rows(scores, None if mask is None else np.asarray(mask)[None])
    out = nx.matmul(weights, vh).transpose(1, 0, 2)
    if return_weights:
        return out, weights
    return out


def attn(qr, kr, v, wo, mask=None) -> np.ndarray:
    """Attention on rotated queries/keys, then head merge and output projection."""
    return nx.matmul(merge_heads(scaled_dot_attention(qr, kr, v, mask)), wo)


@dataclass(frozen=True)
class KVLayer:
    keys: np.ndarray    # [N_ref, heads, d], rotated
    values: np.ndarray  # [N_ref, heads, d]

    @property
    def tokens(self) -> int:
        return self.keys.shape[0]

    @classmethod
    def empty(cls, heads: int, head_dim: int, dtype=None) -> "KVLayer":
        dtype = dtype or nx.get_dtype()
        z = np.zeros((0, heads, head_dim), dtype=dtype)
        return cls(z, z.copy())


def qkv(x, coords, proj: ProjectionSet, cfg: RopeConfig):
    """Rotated queries, rotated keys and values for one branch."""
    q = apply_rope(project(x, proj.wq, proj.heads), coords, cfg)
    k = apply_rope(project(x, proj.wk, proj.heads), coords, cfg)
    v = project(x, proj.wv, proj.heads)
    return q, k, v


def ref_self_attn(x_ref, ref_coords, proj: ProjectionSet, cfg: RopeConfig, return_kv: bool = False):
    """Reference-only self-attention with biased coordinates.

    ``ref_coords`` already include the task offset (see ``rope.position_grid``).
    With ``return_kv`` the rotated keys and values are returned for caching.
    """
    q, k, v = qkv(x_ref, ref_coords, proj, cfg)
    out = attn(q, k, v, proj.wo)
    if return_kv:
        return out, KVLayer(k, v)
    return out


def tgt_causal_attn(x_tgt, cache_layer: KVLayer, proj: ProjectionSet, tgt_coords, cfg: RopeConfig) -> np.ndarray:
    """Target queries over ``[target keys; cached reference keys]``."""
    q, k, v = qkv(x_tgt, tgt_coords, proj, cfg)
    if cache_layer.keys.shape[1:] != k.shape[1:]:
        raise ValueError(f"cached keys {cache_layer.keys.shape} do not match target head layout {k.shape}")
    keys = nx.concat(0, k, cache_layer.keys)
    values = nx.concat(0, v, cache_layer.values)
    return attn(q, keys, values, proj.wo)


def block_causal_mask(n_tgt: int, n_ref: int) -> np.ndarray:
    """Allowed-cell mask over tokens ordered ``[target; reference]``.

    Target rows see everything; reference rows see only reference columns.
    """
    n = n_tgt + n_ref
    mask = np.ones((n, n), dtype=bool)
    mask[n_tgt:, :n_tgt] = False
    return mask


def validate_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise ValueError(f"mask must be boolean, got {mask.dtype}")
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} tokens")
    if not mask.any(axis=1).all():
        raise ValueError("mask has a row with no allowed keys")
    return mask


def joint_baseline(x_all, coords_all, mask, proj: ProjectionSet, cfg: RopeConfig, fault_swap_kv: int | None = None):
    """Masked full attention over a concatenated token set.

    ``coords_all`` carries each token's own (branch-specific, possibly
    biased) coordinates. ``fault_swap_kv`` is a fault-injection hook for the
    verification suite: it rotates the key/value order by that many tokens
    while leaving queries and mask untouched, which must break equivalence.
    """
    mask = validate_mask(mask, np.shape(x_all)[0])
    q, k, v = qkv(x_all, coords_all, proj, cfg)
    if fault_swap_kv:
        k = np.roll(k, -fault_swap_kv, axis=0)
        v = np.roll(v, -fault_swap_kv, axis=0)
    return attn(q, k, v, proj.wo, mask)


def cross_attn(x_tgt, k_ext, v_ext, proj: ProjectionSet) -> np.ndarray:
    """Target queries over an external (prompt / semantic) sequence; no rotation.

    ``k_ext`` / ``v_ext`` are already projected, ``[M, model_dim]`` or
    ``[M, heads, d]``.
    """
    q = project(x_tgt, proj.wq, proj.heads)
    k_ext = np.asarray(k_ext)
    v_ext = np.asarray(v_ext)
    if k_ext.ndim == 2:
        k_ext = split_heads(k_ext, proj.heads)
    if v_ext.ndim == 2:
        v_ext = split_heads(v_ext, proj.heads)
    if k_ext.shape[1:] != q.shape[1:]:
        raise ValueError(f"external keys {k_ext.shape} do not share head layout {q.shape[1:]}")
    return attn(q, k_ext, v_ext, proj.wo)


def cache_fingerprint(model_fingerprint: str, task, bias, ref_shape, target_extent) -> str:
    payload = json.dumps(
        {
            "model": model_fingerprint,
            "task": str(task),
            "bias": [int(x) for x in bias.delta],
            "ref_shape": [int(x) for x in ref_shape],
            "target_extent": [int(x) for x in target_extent],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RefCache:
    """Per-layer rotated reference keys/values plus hidden states, built once at t=0.

    ``parts`` records one entry per contributing task (a composed cache has
    several) so consumers can check provenance and slice the key axis back.
    """

    layers: tuple[KVLayer, ...]
    hidden: tuple[np.ndarray, ...]
    fingerprint: str
    model_fingerprint: str
    target_extent: tuple[int, int]  # (f_tgt, w_tgt) the biases were computed for
    parts: tuple[dict, ...] = field(default=())

    @property
    def tokens(self) -> int:
        return self.layers[0].tokens if self.layers else 0

    def to_bytes(self) -> bytes:
        chunks = [self.fingerprint.encode()]
        for layer in self.layers:
            chunks += [layer.keys.tobytes(), layer.values.tobytes()]
        for h in self.hidden:
            chunks.append(h.tobytes())
        return b"".join(chunks)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def concat(cls, caches) -> "RefCache":
        """Token-wise union of several caches built by the same model, in the given order."""
        caches = list(caches)
        if not caches:
            raise ValueError("nothing to concatenate")
        if len({c.model_fingerprint for c in caches}) != 1:
            raise ValueError("caches were built by different models")
        if len({c.target_extent for c in caches}) != 1:
            raise ValueError("caches were built for different target extents")
        if len({len(c.layers) for c in caches}) != 1:
            raise ValueError("caches have different layer counts")
        if len(caches) == 1:
            return caches[0]
        layers = tuple(
            KVLayer(
                nx.concat(0, *(c.layers[i].keys for c in caches)),
                nx.concat(0, *(c.layers[i].values for c in caches)),
            )
            for i in range(len(caches[0].layers))
        )
        hidden = tuple(
            nx.concat(0, *(c.hidden[i] for c in caches)) for i in range(len(caches[0].hidden))
        )
        fp = hashlib.sha256("+".join(c.fingerprint for c in caches).encode()).hexdigest()[:16]
        parts = tuple(p for c in caches for p in c.parts)
        return cls(layers, hidden, fp, caches[0].model_fingerprint, caches[0].target_extent, parts)
