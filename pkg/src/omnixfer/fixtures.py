"""Seeded synthetic clips and prompt summaries used in place of real media."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .latents import TaskKind, latent_to_bytes, load_latent, save_latent

DEFAULT_CLIP_SHAPE = (8, 64, 64)
DEFAULT_SUMMARY_DIM = 16


def synthetic_clip(seed: int, label: str, shape=DEFAULT_CLIP_SHAPE) -> np.ndarray:
    """Drifting sinusoidal colour pattern plus a little seeded noise, ``[F, H, W, 3]``."""
    rng = nx.Rng(seed, "fixture", label)
    F, H, W = shape
    freq = rng.child("freq").uniform((3, 2), 0.5, 3.0)
    phase = rng.child("phase").uniform((3,), 0.0, 2 * np.pi)
    drift = rng.child("drift").uniform((3,), -0.3, 0.3)
    t, y, x = np.meshgrid(np.arange(F), np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    channels = [
        np.sin(2 * np.pi * (freq[c, 0] * y + freq[c, 1] * x) + phase[c] + drift[c] * t) for c in range(3)
    ]
    clip = np.stack(channels, axis=-1) + rng.child("noise").normal((F, H, W, 3), 0.05)
    return clip.astype(nx.get_dtype())


def synthetic_summary(seed: int, label: str, dim: int = DEFAULT_SUMMARY_DIM) -> np.ndarray:
    return nx.Rng(seed, "fixture", label).normal((dim,))


def generate(out_dir, seed: int, shape=DEFAULT_CLIP_SHAPE, summary_dim: int = DEFAULT_SUMMARY_DIM) -> dict:
    """Write one reference clip per task kind, a first-frame image and a prompt summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(name, data):
        save_latent(out / name, data)
        files[name] = hashlib.sha256(latent_to_bytes(data)).hexdigest()

    for kind in TaskKind:
        put(f"ref_{kind.value}.oxl", synthetic_clip(seed, f"ref/{kind.value}", shape))
    put("first_frame.oxl", synthetic_clip(seed, "first_frame", (1,) + tuple(shape[1:])))
    prompt = {"summary": [float(x) for x in synthetic_summary(seed, "prompt", summary_dim)]}
    text = json.dumps(prompt, indent=2) + "\n"
    (out / "prompt.json").write_text(text)
    files["prompt.json"] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {"seed": seed, "clip_shape": list(shape), "summary_dim": summary_dim, "files": files}
    (out / "fixtures.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_clip(path) -> np.ndarray:
    clip = load_latent(path)
    if clip.shape[-1] != 3:
        raise ValueError(f"{path}: expected a 3-channel clip, got shape {clip.shape}")
    return nx.asarray(clip)


def load_summary(path) -> np.ndarray:
    raw = json.loads(Path(path).read_text())
    if "summary" not in raw or not isinstance(raw["summary"], list):
        raise ValueError(f"{path}: expected an object with a 'summary' list")
    return nx.asarray(raw["summary"])
