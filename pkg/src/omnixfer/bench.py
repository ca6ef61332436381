"""FLOP model and wall-clock comparison of joint vs. reference-decoupled sampling.

Analytic cost, per layer, with ``c = 4 * d_model`` FLOPs per (query, key)
pair (``2 d`` for the score, ``2 d`` for the value mix, summed over heads) and
``tok = 8 d_model^2 + 4 d_model ffn_dim`` FLOPs of per-token work (Q/K/V/O
projections and the feed-forward)::

    joint      attention  S * c * (N_ref + N_tgt)^2
               tokens     S * tok * (N_ref + N_tgt)
    decoupled  attention  S * c * N_tgt * (N_tgt + N_ref) + c * N_ref^2
               tokens     S * tok * N_tgt + tok * N_ref

all multiplied by the layer count. Cross-attention and the output head cost
the same under both topologies and are left out.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dit import DitConfig, DitModel, sample
from .latents import TaskSpec, build_reference_latent

CSV_COLUMNS = ("N_ref", "N_tgt", "S", "topology", "analytic_flops", "wall_ms")
TOPOLOGIES = ("joint", "decoupled")
EQUIVALENCE_TOL = 1e-6


class BenchmarkInvalid(RuntimeError):
    """The two topologies disagreed, so timing them would compare different computations."""


@dataclass(frozen=True)
class CostModel:
    n_ref: int
    n_tgt: int
    d_model: int = 128
    layers: int = 4
    steps: int = 20
    ffn_dim: int = 512

    def __post_init__(self):
        if self.n_ref < 0 or self.n_tgt < 1 or self.d_model < 1 or self.layers < 1 or self.steps < 1:
            raise ValueError(f"invalid cost model {self}")

    @property
    def pair_cost(self) -> int:
        return 4 * self.d_model

    @property
    def token_cost(self) -> int:
        return 8 * self.d_model**2 + 4 * self.d_model * self.ffn_dim


def flops(model: CostModel) -> dict:
    S, L, c, tok = model.steps, model.layers, model.pair_cost, model.token_cost
    nr, nt = model.n_ref, model.n_tgt
    joint_attn = S * L * c * (nr + nt) ** 2
    dec_attn = S * L * c * nt * (nt + nr) + L * c * nr**2
    joint_tok = S * L * tok * (nr + nt)
    dec_tok = S * L * tok * nt + L * tok * nr
    out = {
        "joint": {"attention": joint_attn, "token": joint_tok, "total": joint_attn + joint_tok},
        "decoupled": {"attention": dec_attn, "token": dec_tok, "total": dec_attn + dec_tok},
    }
    out["attention_ratio"] = dec_attn / joint_attn
    out["token_ratio"] = dec_tok / joint_tok
    out["total_ratio"] = out["decoupled"]["total"] / out["joint"]["total"]
    return out


@dataclass(frozen=True)
class BenchConfig:
    tgt_grid: tuple[int, int, int] = (2, 8, 8)
    ref_grid: tuple[int, int, int] = (2, 8, 8)
    steps: int = 20
    dit: DitConfig = field(default_factory=DitConfig)
    repeats: int = 3
    warmup: int = 1
    seed: int = 0
    task: str = "motion"
    threads: int = 1

    @property
    def n_tgt(self) -> int:
        return int(np.prod(self.tgt_grid))

    @property
    def n_ref(self) -> int:
        return int(np.prod(self.ref_grid))

    def cost_model(self) -> CostModel:
        d = self.dit
        return CostModel(self.n_ref, self.n_tgt, d.model_dim, d.layers, self.steps, d.ffn_dim)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["tgt_grid"] = list(self.tgt_grid)
        out["ref_grid"] = list(self.ref_grid)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchConfig":
        raw = dict(raw)
        raw["dit"] = DitConfig(**raw.get("dit", {}))
        for key in ("tgt_grid", "ref_grid"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class BenchReport:
    config: dict
    flops: dict
    wall_ms: dict            # topology -> median ms
    samples_ms: dict         # topology -> every timed repeat
    reduction: float         # 1 - decoupled / joint (measured)
    equivalence_max_diff: float
    counters: dict
    machine: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchReport":
        return cls(**raw)

    def rows(self) -> list[dict]:
        c = self.config
        n_ref = int(np.prod(c["ref_grid"]))
        n_tgt = int(np.prod(c["tgt_grid"]))
        return [
            {
                "N_ref": n_ref,
                "N_tgt": n_tgt,
                "S": c["steps"],
                "topology": topo,
                "analytic_flops": self.flops[topo]["total"],
                "wall_ms": self.wall_ms[topo],
            }
            for topo in TOPOLOGIES
        ]


def machine_fingerprint(threads: int = 1) -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "substrate_threads": threads,
    }


def _inputs(config: BenchConfig):
    rng = nx.Rng(config.seed, "bench")
    n = config.dit.n
    task = TaskSpec.parse(config.task)
    l_ref = build_reference_latent(rng.child("ref").normal(tuple(config.ref_grid) + (n,)), task)
    f, h, w = config.tgt_grid
    cond = rng.child("cond").normal((1, h, w, n)) if not task.is_appearance else None
    z_init = rng.child("noise").normal((f, h, w, n))
    return task, l_ref, cond, z_init


def timed_run(config: BenchConfig, repeats: int | None = None) -> BenchReport:
    """Time full sampling runs of both topologies after checking they agree.

    The decoupled timing includes building the reference cache, so both
    numbers are end-to-end per sample. Warm-up runs are discarded; the
    reported figure is the median of ``repeats`` timed runs.
    """
    repeats = config.repeats if repeats is None else repeats
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    prev_threads = os.environ.get("OMNIXFER_THREADS")
    os.environ["OMNIXFER_THREADS"] = str(config.threads)
    try:
        model = DitModel(config.dit)
        task, l_ref, cond, z_init = _inputs(config)
        extent = (config.tgt_grid[0], config.tgt_grid[2])
        refs = [(l_ref, task)]

        def run_decoupled():
            cache = model.ref_branch_forward(l_ref, task, extent)
            return sample(model, cond, cache, config.steps, z_init=z_init)

        def run_joint():
            return sample(model, cond, None, config.steps, z_init=z_init, topology="joint", references=refs)

        runners = {"joint": run_joint, "decoupled": run_decoupled}
        model.counters.clear()
        dec = run_decoupled()
        joint = run_joint()
        counters = dict(model.counters)
        diff = float(np.max(np.abs(dec.astype(np.float64) - joint)))
        scale = max(1.0, float(np.max(np.abs(joint))))
        if not diff <= EQUIVALENCE_TOL * scale:
            raise BenchmarkInvalid(
                f"topologies disagree: max |decoupled - joint| = {diff:.3e} "
                f"(allowed {EQUIVALENCE_TOL * scale:.1e}); refusing to time non-equivalent runs"
            )
        for _ in range(max(0, config.warmup - 1)):
            for fn in runners.values():
                fn()
        samples = {topo: [] for topo in TOPOLOGIES}
        for _ in range(repeats):
            for topo in TOPOLOGIES:
                start = time.perf_counter()
                runners[topo]()
                samples[topo].append((time.perf_counter() - start) * 1e3)
    finally:
        if prev_threads is None:
            os.environ.pop("OMNIXFER_THREADS", None)
        else:
            os.environ["OMNIXFER_THREADS"] = prev_threads
    wall = {topo: statistics.median(v) for topo, v in samples.items()}
    cfg = config.to_dict()
    cfg["repeats"] = repeats
    return BenchReport(
        config=cfg,
        flops=flops(config.cost_model()),
        wall_ms=wall,
        samples_ms=samples,
        reduction=1.0 - wall["decoupled"] / wall["joint"],
        equivalence_max_diff=diff,
        counters=counters,
        machine=machine_fingerprint(config.threads),
    )


def emit_report(reports, path) -> tuple[Path, Path]:
    """Write ``path`` (JSON) and a sibling ``.csv`` with one row per (config, topology)."""
    if isinstance(reports, BenchReport):
        reports = [reports]
    path = Path(path)
    payload = {"reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerows(r.rows())
    return path, csv_path


def load_report(path) -> list[BenchReport]:
    raw = json.loads(Path(path).read_text())
    return [BenchReport.from_dict(r) for r in raw["reports"]]
