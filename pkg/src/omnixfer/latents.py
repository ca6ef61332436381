"""Target and reference latent construction.

An assembled latent block has ``2n + 4`` channels laid out as
``[condition (n) | mask (4) | content (n)]``. For the target the content is
the noised latent and the mask marks preserved frames with 1. For the
reference the content is the clean latent and the mask carries a per-task
flag: -1 for temporal tasks, -2 for ID, -3 for style.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx

MASK_CHANNELS = 4
DEFAULT_FACTORS = (4, 8)
DEFAULT_LATENT_CHANNELS = 16


class TaskKind(str, enum.Enum):
    ID = "id"
    STYLE = "style"
    EFFECT = "effect"
    CAMERA = "camera"
    MOTION = "motion"


APPEARANCE_KINDS = frozenset({TaskKind.ID, TaskKind.STYLE})
_MASK_FLAGS = {
    TaskKind.ID: -2.0,
    TaskKind.STYLE: -3.0,
    TaskKind.EFFECT: -1.0,
    TaskKind.CAMERA: -1.0,
    TaskKind.MOTION: -1.0,
}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))

    @classmethod
    def parse(cls, name: "str | TaskKind | TaskSpec") -> "TaskSpec":
        if isinstance(name, TaskSpec):
            return name
        try:
            return cls(TaskKind(str(getattr(name, "value", name)).lower()))
        except ValueError:
            choices = ", ".join(k.value for k in TaskKind)
            raise ValueError(f"unknown task {name!r}; expected one of: {choices}") from None

    @property
    def category(self) -> str:
        return "appearance" if self.kind in APPEARANCE_KINDS else "temporal"

    @property
    def is_appearance(self) -> bool:
        return self.kind in APPEARANCE_KINDS

    @property
    def mask_flag(self) -> float:
        return _MASK_FLAGS[self.kind]

    @property
    def query_bank(self) -> str:
        return f"metaquery/{self.kind.value}"

    def __str__(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class LatentBlock:
    """A ``[f, h, w, channels]`` latent plus its grid origin ``(frame, width, height)``."""

    data: np.ndarray
    grid_origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"latent data must be 4-D [f,h,w,c], got shape {self.data.shape}")
        if min(self.data.shape[:3]) < 1:
            raise ValueError(f"latent grid extents must be >= 1, got {self.data.shape[:3]}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n(self) -> int:
        if (self.channels - MASK_CHANNELS) % 2 or self.channels < MASK_CHANNELS + 2:
            raise ValueError(f"{self.channels} channels is not an assembled 2n+4 layout")
        return (self.channels - MASK_CHANNELS) // 2

    @property
    def condition(self) -> np.ndarray:
        return self.data[..., : self.n]

    @property
    def mask(self) -> np.ndarray:
        return self.data[..., self.n : self.n + MASK_CHANNELS]

    @property
    def content(self) -> np.ndarray:
        return self.data[..., self.n + MASK_CHANNELS :]

    def parts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        c, m, z = nx.split(-1, self.data, [n, MASK_CHANNELS, n])
        return c, m, z


def _lift_matrix(n: int, seed: int) -> np.ndarray:
    return nx.Rng(seed, "encode_stub/lift").normal((3, n), scale=1.0 / np.sqrt(3.0))


def encode_stub(clip, factors=DEFAULT_FACTORS, n: int = DEFAULT_LATENT_CHANNELS, seed: int = 0) -> np.ndarray:
    """Stand-in video encoder: block mean-pool then a seeded linear lift 3 -> n.

    ``clip`` is ``[F, H, W, 3]``. Axes that do not divide the pooling factors
    are padded by repeating the last frame/row/column.
    """
    clip = nx.asarray(clip)
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ValueError(f"clip must be [F,H,W,3], got shape {clip.shape}")
    if clip.size == 0:
        raise ValueError("cannot encode an empty clip")
    ft, fs = factors
    pads = []
    for size, fac in zip(clip.shape[:3], (ft, fs, fs)):
        pads.append((0, (-size) % fac))
    if any(p[1] for p in pads):
        clip = np.pad(clip, pads + [(0, 0)], mode="edge")
    F, H, W, _ = clip.shape
    pooled = clip.reshape(F // ft, ft, H // fs, fs, W // fs, fs, 3).mean(axis=(1, 3, 5))
    f, h, w = pooled.shape[:3]
    lifted = nx.matmul(pooled.reshape(f * h * w, 3), _lift_matrix(n, seed))
    return lifted.reshape(f, h, w, n)


def add_noise(z0, t: float, eps) -> np.ndarray:
    """Rectified-flow interpolation ``(1 - t) z0 + t eps``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep must lie in [0, 1], got {t}")
    z0 = nx.asarray(z0)
    eps = nx.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return eps.copy()
    return (1.0 - t) * z0 + t * eps


def build_target_latent(cond_image_latent, z_t) -> LatentBlock:
    """Assemble ``[c, m, z_t]`` for the target.

    ``cond_image_latent`` is the ``[1, h, w, n]`` first-frame latent, or
    ``None`` for text-to-video targets (zero condition, nothing preserved).
    """
    z_t = nx.asarray(z_t)
    if z_t.ndim != 4:
        raise ValueError(f"z_t must be [f,h,w,n], got shape {z_t.shape}")
    f, h, w, n = z_t.shape
    c = np.zeros_like(z_t)
    m = np.zeros((f, h, w, MASK_CHANNELS), dtype=z_t.dtype)
    if cond_image_latent is not None:
        cond = nx.asarray(cond_image_latent)
        if cond.ndim == 3:
            cond = cond[None]
        if cond.shape[1:] != (h, w, n) or cond.shape[0] != 1:
            raise ValueError(
                f"condition image latent {cond.shape} does not match target grid (1, {h}, {w}, {n})"
            )
        c[0] = cond[0]
        m[0] = 1.0
    return LatentBlock(nx.concat(-1, c, m, z_t))


def build_reference_latent(ref_latent, task: TaskSpec) -> LatentBlock:
    """Assemble ``[c_ref, m_ref, z0_ref]``; the reference is never noised."""
    task = TaskSpec.parse(task)
    ref = nx.asarray(ref_latent)
    if ref.ndim != 4:
        raise ValueError(f"reference latent must be [f,h,w,n], got shape {ref.shape}")
    m = np.full(ref.shape[:3] + (MASK_CHANNELS,), task.mask_flag, dtype=ref.dtype)
    return LatentBlock(nx.concat(-1, ref, m, ref.copy()))


# little-endian: magic, version, f, h, w, channels, dtype code
_HEADER = struct.Struct("<4sHIIIIB")
_MAGIC = b"OXLT"
_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def latent_to_bytes(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError(f"only 4-D arrays can be serialized, got shape {data.shape}")
    dt = data.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {data.dtype}")
    header = _HEADER.pack(_MAGIC, _VERSION, *data.shape, _DTYPE_CODES[dt])
    return header + np.ascontiguousarray(data, dtype=dt).tobytes()


def latent_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise ValueError("truncated latent file header")
    magic, version, f, h, w, c, code = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported latent file version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    expected = f * h * w * c * dt.itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise ValueError(f"payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(f, h, w, c).astype(dt.newbyteorder("="))


def save_latent(path, data: np.ndarray) -> None:
    Path(path).write_bytes(latent_to_bytes(data))


def load_latent(path) -> np.ndarray:
    return latent_from_bytes(Path(path).read_bytes())
