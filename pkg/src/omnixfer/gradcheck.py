"""Analytic backward for rotary attention, checked against central differences.

The differentiated path is a single attention sublayer whose queries come
from one token set and whose keys/values come from one or more segments,
each with its own coordinates::

    Q = Xq Wq            K_s = X_s Wk            V_s = X_s Wv
    Qr = R(Q)            Kr = [R(K_1); R(K_2); ...]
    P  = softmax(Qr Kr^T / sqrt(d))   (per head)
    out = merge(P V) Wo

With ``Xq = x_tgt`` and segments ``[x_tgt, x_ref]`` this is the target
branch; with ``Xq = x_ref`` and segment ``[x_ref]`` it is the reference
branch. The scalar loss is ``sum(out)``.

Backward through a rotation by angle ``phi`` is the rotation by ``-phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import ProjectionSet, merge_heads, project, split_heads
from .rope import RopeConfig, rope_angles, rotate_pairs

DEFAULT_TOL = 1e-4
DEFAULT_FLOOR = 1e-8
DEFAULT_STEP = 1e-5


@dataclass
class Tape:
    """Forward intermediates needed by :func:`attn_backward`."""

    x_q: np.ndarray
    segments: list          # [(x, coords), ...]
    proj: ProjectionSet
    cfg: RopeConfig
    q_angles: np.ndarray
    k_angles: np.ndarray
    q: np.ndarray           # pre-rotation, [Nq, h, d]
    k: np.ndarray           # pre-rotation, concatenated segments
    v: np.ndarray
    qr: np.ndarray
    kr: np.ndarray
    weights: np.ndarray     # [h, Nq, Nk]
    mixed: np.ndarray       # merged heads before Wo, [Nq, D]
    out: np.ndarray

    REQUIRED = ("q", "k", "v", "qr", "kr", "weights", "mixed")


def _attend(q, k, v, q_angles, k_angles, wo):
    """Forward from pre-rotation Q/K/V; returns every intermediate."""
    d = q.shape[-1]
    qr = rotate_pairs(q, q_angles)
    kr = rotate_pairs(k, k_angles)
    scores = nx.matmul(qr.transpose(1, 0, 2), kr.transpose(1, 2, 0)) / np.sqrt(d)
    weights = nx.softmax_rows(scores)
    mixed = merge_heads(nx.matmul(weights, v.transpose(1, 0, 2)).transpose(1, 0, 2))
    return qr, kr, weights, mixed, nx.matmul(mixed, wo)


def attention_forward(x_q, q_coords, segments, proj: ProjectionSet, cfg: RopeConfig):
    """Run the attention sublayer and keep a :class:`Tape` for the backward pass."""
    if nx.get_dtype() is not np.float64:
        raise ValueError("gradient checks require 64-bit (verification) precision")
    if not segments:
        raise ValueError("need at least one key/value segment")
    q = project(x_q, proj.wq, proj.heads)
    k = nx.concat(0, *(project(x, proj.wk, proj.heads) for x, _ in segments))
    v = nx.concat(0, *(project(x, proj.wv, proj.heads) for x, _ in segments))
    q_angles = rope_angles(q_coords, cfg)
    k_angles = np.concatenate([rope_angles(c, cfg) for _, c in segments], axis=0)
    qr, kr, weights, mixed, out = _attend(q, k, v, q_angles, k_angles, proj.wo)
    tape = Tape(x_q, list(segments), proj, cfg, q_angles, k_angles, q, k, v, qr, kr, weights, mixed, out)
    return out, tape


def attn_backward(tape: Tape | None, d_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_out * out)`` for Q, K, V (pre-rotation), all weights and inputs."""
    if tape is None or any(getattr(tape, name, None) is None for name in Tape.REQUIRED):
        raise ValueError("backward needs a complete forward tape; run attention_forward first")
    proj = tape.proj
    heads, d = proj.heads, proj.head_dim
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != tape.out.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match output {tape.out.shape}")

    d_wo = nx.matmul(tape.mixed.T, d_out)
    d_mixed = nx.matmul(d_out, proj.wo.T)
    d_o = split_heads(d_mixed, heads).transpose(1, 0, 2)            # [h, Nq, d]
    p = tape.weights
    v_h = tape.v.transpose(1, 0, 2)                                  # [h, Nk, d]
    d_v = nx.matmul(p.transpose(0, 2, 1), d_o).transpose(1, 0, 2)    # [Nk, h, d]
    d_p = nx.matmul(d_o, v_h.transpose(0, 2, 1))                     # [h, Nq, Nk]
    d_s = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    d_qr = nx.matmul(d_s, tape.kr.transpose(1, 0, 2)).transpose(1, 0, 2)
    d_kr = nx.matmul(d_s.transpose(0, 2, 1), tape.qr.transpose(1, 0, 2)).transpose(1, 0, 2)
    d_q = rotate_pairs(d_qr, -tape.q_angles)
    d_k = rotate_pairs(d_kr, -tape.k_angles)

    dq_flat = merge_heads(d_q)
    d_wq = nx.matmul(tape.x_q.T, dq_flat)
    d_xq = nx.matmul(dq_flat, proj.wq.T)
    d_wk = np.zeros_like(proj.wk)
    d_wv = np.zeros_like(proj.wv)
    d_segments = []
    start = 0
    for x, _ in tape.segments:
        stop = start + x.shape[0]
        dk_s = merge_heads(d_k[start:stop])
        dv_s = merge_heads(d_v[start:stop])
        d_wk = d_wk + nx.matmul(x.T, dk_s)
        d_wv = d_wv + nx.matmul(x.T, dv_s)
        d_segments.append(nx.matmul(dk_s, proj.wk.T) + nx.matmul(dv_s, proj.wv.T))
        start = stop
    return {
        "Q": d_q,
        "K": d_k,
        "V": d_v,
        "W_Q": d_wq,
        "W_K": d_wk,
        "W_V": d_wv,
        "W_O": d_wo,
        "X_q": d_xq,
        "X_segments": d_segments,
    }


def finite_diff(loss_fn, param, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences ``(L(p + h e_i) - L(p - h e_i)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    param = np.array(param, dtype=np.float64)
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(param.copy())
        flat[i] = orig - h
        down = loss_fn(param.copy())
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return grad


@dataclass
class GradReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    h: float
    tol: float
    passed: bool
    checked: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "h": self.h,
            "tol": self.tol,
            "passed": self.passed,
            "checked": self.checked,
        }


def verify(grads, fd_grads, tol: float = DEFAULT_TOL, name: str = "param", h: float = DEFAULT_STEP,
           floor: float = DEFAULT_FLOOR) -> GradReport:
    """Compare analytic and numeric gradients; relative error only where either exceeds ``floor``."""
    a = np.asarray(grads, dtype=np.float64)
    b = np.asarray(fd_grads, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: analytic {a.shape} vs numeric {b.shape}")
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    sel = scale > floor
    max_abs = float(diff.max()) if diff.size else 0.0
    max_rel = float((diff[sel] / scale[sel]).max()) if sel.any() else 0.0
    return GradReport(name, max_abs, max_rel, h, tol, max_rel < tol, int(sel.sum()))


def check_attention_path(x_q, q_coords, segments, proj: ProjectionSet, cfg: RopeConfig,
                         h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL) -> list[GradReport]:
    """FD-check every parameter of one attention path; loss is ``sum(out)``."""
    out, tape = attention_forward(x_q, q_coords, segments, proj, cfg)
    grads = attn_backward(tape, np.ones_like(out))
    reports = []

    def with_weight(name):
        def loss(w):
            kwargs = {"wq": proj.wq, "wk": proj.wk, "wv": proj.wv, "wo": proj.wo, name: w}
            p = ProjectionSet(kwargs["wq"], kwargs["wk"], kwargs["wv"], kwargs["wo"], heads=proj.heads)
            return float(attention_forward(x_q, q_coords, segments, p, cfg)[0].sum())
        return loss

    for key, attr in (("W_Q", "wq"), ("W_K", "wk"), ("W_V", "wv"), ("W_O", "wo")):
        fd = finite_diff(with_weight(attr), getattr(proj, attr), h)
        reports.append(verify(grads[key], fd, tol, key, h))

    fixed = {"Q": tape.q, "K": tape.k, "V": tape.v}
    for key in ("Q", "K", "V"):
        def loss(value, key=key):
            args = dict(fixed, **{key: value})
            return float(_attend(args["Q"], args["K"], args["V"], tape.q_angles, tape.k_angles, proj.wo)[-1].sum())
        fd = finite_diff(loss, fixed[key], h)
        reports.append(verify(grads[key], fd, tol, key, h))
    return reports
