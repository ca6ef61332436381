"""Batch driver: ``omnixfer {demo,compose,verify,bench,gen-fixtures}``.

Exit codes: 0 success, 1 invariant failure, 2 configuration error.
Every command writes a deterministic ``manifest.json`` (or report) plus a
``timing.json`` sidecar holding anything clock-dependent.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import fixtures
from . import invariants
from . import numerics as nx
from .dit import DitConfig, DitModel, sample
from .latents import (
    DEFAULT_FACTORS,
    TaskKind,
    TaskSpec,
    build_reference_latent,
    build_target_latent,
    encode_stub,
    latent_to_bytes,
    save_latent,
)
from .rope import task_bias
from .tma import Connector, ProviderInputs, StubProvider, compose_tasks, make_query_banks

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
MODES = ("demo", "verify", "bench", "compose")
TOP_KEYS = {
    "mode", "task", "tasks", "seed", "steps", "model", "out", "precision", "ref_cross_attention",
    "first_frame", "prompt", "clip_shape", "repeats", "warmup", "threads", "sweep_steps", "fault",
}
TASK_KEYS = {"kind", "reference"}
FAULTS = (None, "kv-order")


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InvariantFailure(Exception):
    pass


@dataclass(frozen=True)
class TaskEntry:
    spec: TaskSpec
    reference: Path | None = None


@dataclass
class RunConfig:
    seed: int
    mode: str = "demo"
    tasks: list = field(default_factory=lambda: [TaskEntry(TaskSpec(TaskKind.MOTION))])
    model: DitConfig = field(default_factory=DitConfig)
    steps: int = 8
    out: Path = Path("omnixfer-out")
    precision: str = "f32"
    first_frame: Path | None = None
    prompt: Path | None = None
    clip_shape: tuple = fixtures.DEFAULT_CLIP_SHAPE
    repeats: int = 3
    warmup: int = 1
    threads: int = 1
    sweep_steps: tuple = ()
    fault: str | None = None

    def echo(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "tasks": [
                {"kind": t.spec.kind.value, "reference": None if t.reference is None else t.reference.name}
                for t in self.tasks
            ],
            "model": self.model.to_dict(),
            "steps": self.steps,
            "precision": self.precision,
            "clip_shape": list(self.clip_shape),
        }


def _positive_int(raw, name, errors, minimum=1):
    if isinstance(raw, bool) or not isinstance(raw, int):
        errors.append(f"{name}: expected an integer, got {raw!r}")
        return None
    if raw < minimum:
        errors.append(f"{name}: must be >= {minimum}, got {raw}")
        return None
    return raw


def _existing(raw, name, errors, base: Path) -> Path | None:
    if raw is None:
        return None
    path = Path(raw)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        errors.append(f"{name}: fixture {raw!r} does not exist")
        return None
    return path


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config, apply flag overrides (flags win), validate, fill defaults.

    All problems are collected and raised together as a :class:`ConfigError`.
    """
    raw: dict = {}
    base = Path.cwd()
    errors: list[str] = []
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {str(path)!r} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {str(path)!r} is not valid JSON: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
        base = path.parent
    for key in sorted(set(raw) - TOP_KEYS):
        errors.append(f"unknown config key {key!r}")
    merged = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    if "task" in merged and "tasks" in merged:
        if overrides and overrides.get("tasks") is not None:
            merged.pop("task")
        else:
            errors.append("give either 'task' or 'tasks', not both")

    kw: dict = {}
    if "seed" not in merged:
        errors.append("seed: required (no clock-based seeding)")
    else:
        seed = merged["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            errors.append(f"seed: expected a non-negative integer, got {seed!r}")
        else:
            kw["seed"] = seed

    mode = merged.get("mode", "demo")
    if mode not in MODES:
        errors.append(f"mode: {mode!r} is not one of {list(MODES)}")
    kw["mode"] = mode

    task_items = merged.get("tasks", [merged["task"]] if "task" in merged else None)
    if task_items is not None:
        if not isinstance(task_items, list) or not task_items:
            errors.append("tasks: expected a non-empty list")
        else:
            entries = []
            for i, item in enumerate(task_items):
                if isinstance(item, str):
                    item = {"kind": item}
                if not isinstance(item, dict):
                    errors.append(f"tasks[{i}]: expected a task name or object")
                    continue
                for key in sorted(set(item) - TASK_KEYS):
                    errors.append(f"tasks[{i}]: unknown key {key!r}")
                try:
                    spec = TaskSpec.parse(item.get("kind"))
                except ValueError as exc:
                    errors.append(f"tasks[{i}].kind: {exc}")
                    continue
                entries.append(TaskEntry(spec, _existing(item.get("reference"), f"tasks[{i}].reference", errors, base)))
            kw["tasks"] = entries

    model_raw = merged.get("model", {})
    if not isinstance(model_raw, dict):
        errors.append("model: expected an object")
        model_raw = {}
    known = {f.name for f in dataclasses.fields(DitConfig)}
    for key in sorted(set(model_raw) - known):
        errors.append(f"model: unknown key {key!r}")
    model_kw = {k: v for k, v in model_raw.items() if k in known}
    for key in ("layers", "model_dim", "heads", "ffn_dim", "n", "time_embed_dim"):
        if key in model_kw and _positive_int(model_kw[key], f"model.{key}", errors) is None:
            model_kw.pop(key)
    if "ref_cross_attention" in merged:
        flag = merged["ref_cross_attention"]
        if flag in ("on", "off"):
            flag = flag == "on"
        if not isinstance(flag, bool):
            errors.append(f"ref_cross_attention: expected on/off, got {flag!r}")
        else:
            model_kw["ref_cross_attention"] = flag
    model_kw.setdefault("seed", kw.get("seed", 0))
    try:
        kw["model"] = DitConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        errors.append(f"model: {exc}")

    for key, minimum in (("steps", 1), ("repeats", 1), ("warmup", 0), ("threads", 1)):
        if key in merged:
            value = _positive_int(merged[key], key, errors, minimum)
            if value is not None:
                kw[key] = value
    if "threads" not in kw:
        try:
            kw["threads"] = nx.num_threads()
        except ValueError as exc:
            errors.append(str(exc))
    if "sweep_steps" in merged:
        items = merged["sweep_steps"]
        if not isinstance(items, list) or not all(_positive_int(s, "sweep_steps[]", errors) for s in items):
            errors.append("sweep_steps: expected a list of positive integers")
        else:
            kw["sweep_steps"] = tuple(items)
    precision = merged.get("precision", "f32")
    if precision not in nx.PRECISIONS:
        errors.append(f"precision: {precision!r} is not one of {sorted(nx.PRECISIONS)}")
    kw["precision"] = precision
    if "clip_shape" in merged:
        shape = merged["clip_shape"]
        if not (isinstance(shape, list) and len(shape) == 3 and all(_positive_int(s, "clip_shape[]", errors) for s in shape)):
            errors.append("clip_shape: expected [frames, height, width] of positive integers")
        else:
            kw["clip_shape"] = tuple(shape)
    fault = merged.get("fault")
    if fault not in FAULTS:
        errors.append(f"fault: {fault!r} is not one of {[f for f in FAULTS if f]}")
    kw["fault"] = fault
    kw["first_frame"] = _existing(merged.get("first_frame"), "first_frame", errors, base)
    kw["prompt"] = _existing(merged.get("prompt"), "prompt", errors, base)
    if "out" in merged:
        kw["out"] = Path(merged["out"])
    if errors:
        raise ConfigError(errors)
    return RunConfig(**kw)


# -- shared plumbing ----------------------------------------------------------

def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha(data: np.ndarray) -> str:
    return hashlib.sha256(latent_to_bytes(data)).hexdigest()


def _write_timing(out: Path, command: str, start_wall: float, start: float, extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "started": _dt.datetime.fromtimestamp(start_wall, tz=_dt.timezone.utc).isoformat(),
        "elapsed_s": time.perf_counter() - start,
    }
    payload.update(extra or {})
    _write_json(out / "timing.json", payload)


def _latent_grid(clip_shape) -> tuple[int, int, int]:
    ft, fs = DEFAULT_FACTORS
    F, H, W = clip_shape
    return (-(-F // ft), -(-H // fs), -(-W // fs))


class _Scene:
    """Everything a demo/compose run needs, built deterministically from the config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.model = DitModel(cfg.model)
        n = cfg.model.n
        self.grid = _latent_grid(cfg.clip_shape)
        self.provider = StubProvider(summary_dim=n, seed=cfg.seed)
        self.banks = make_query_banks(cfg.seed, provider_dim=self.provider.provider_dim)
        self.connector = Connector(self.provider.provider_dim, cfg.model.model_dim, seed=cfg.seed)
        self.fixture_digests: dict = {}

        i2v = any(not t.spec.is_appearance for t in cfg.tasks)
        if i2v:
            frame = (fixtures.load_clip(cfg.first_frame) if cfg.first_frame
                     else fixtures.synthetic_clip(cfg.seed, "first_frame", (1,) + tuple(cfg.clip_shape[1:])))
            self._note("first_frame", cfg.first_frame, frame)
            self.cond = encode_stub(frame, n=n, seed=cfg.seed)
            if self.cond.shape[1:3] != self.grid[1:]:
                raise ConfigError([f"first_frame grid {self.cond.shape[1:3]} does not match target {self.grid[1:]}"])
        else:
            self.cond = None
        if cfg.prompt:
            self.prompt = fixtures.load_summary(cfg.prompt)
            self.fixture_digests["prompt"] = {"source": "fixture", "sha256": hashlib.sha256(Path(cfg.prompt).read_bytes()).hexdigest()}
            if self.prompt.shape != (n,):
                raise ConfigError([f"prompt summary has {self.prompt.shape[0]} values, model n = {n}"])
        else:
            self.prompt = fixtures.synthetic_summary(cfg.seed, "prompt", n)
        self.references = []
        for entry in cfg.tasks:
            kind = entry.spec.kind.value
            clip = (fixtures.load_clip(entry.reference) if entry.reference
                    else fixtures.synthetic_clip(cfg.seed, f"ref/{kind}", cfg.clip_shape))
            self._note(f"ref_{kind}", entry.reference, clip)
            raw = encode_stub(clip, n=n, seed=cfg.seed)
            self.references.append((entry.spec, raw, build_reference_latent(raw, entry.spec)))
        self.z_init = nx.Rng(cfg.seed, "run/noise").normal(self.grid + (n,))
        self.ref_context = None
        if cfg.model.ref_cross_attention:
            lift = nx.Rng(cfg.seed, "run/prompt-lift").normal((n, cfg.model.model_dim), 1.0 / np.sqrt(n))
            self.ref_context = nx.matmul(self.prompt[None], lift)

    def _note(self, name, path, data):
        self.fixture_digests[name] = {"source": "fixture" if path else "synthetic", "sha256": _sha(data)}

    @property
    def extent(self):
        return (self.grid[0], self.grid[2])

    def features(self, spec: TaskSpec, raw_ref):
        first = self.cond[0] if self.cond is not None else np.zeros(self.cfg.model.n, dtype=nx.get_dtype())
        inputs = ProviderInputs(first, raw_ref, self.prompt)
        return self.provider(inputs, self.banks[spec.kind])

    def task_record(self, spec: TaskSpec, l_ref) -> dict:
        return {
            "kind": spec.kind.value,
            "category": spec.category,
            "mask_flag": spec.mask_flag,
            "bias": task_bias(spec, *self.extent).as_list(),
            "query_bank": spec.query_bank,
            "reference_grid": list(l_ref.grid),
        }

    def base_manifest(self, command: str) -> dict:
        return {
            "command": command,
            "config": self.cfg.echo(),
            "model_fingerprint": self.model.fingerprint,
            "target": {
                "grid": list(self.grid),
                "condition": "first_frame" if self.cond is not None else "zero",
                "preserved_frames": [0] if self.cond is not None else [],
            },
            "fixtures": self.fixture_digests,
        }


def _sample_with(scene: _Scene, cache, context) -> np.ndarray:
    return sample(scene.model, scene.cond, cache, scene.cfg.steps, z_init=scene.z_init, context=context)


# -- commands -------------------------------------------------------------------

def run_demo(cfg: RunConfig) -> dict:
    if len(cfg.tasks) != 1:
        raise ConfigError([f"demo takes exactly one task, got {len(cfg.tasks)}; use compose for several"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _Scene(cfg)
    spec, raw, l_ref = scene.references[0]
    model = scene.model
    model.counters.clear()
    cache = model.ref_branch_forward(l_ref, spec, scene.extent, scene.ref_context)
    context = scene.connector.align(scene.features(spec, raw))
    result = _sample_with(scene, cache, context)
    save_latent(out / "output.oxl", result)
    manifest = scene.base_manifest("demo")
    manifest.update(
        {
            "tasks": [scene.task_record(spec, l_ref)],
            "reference_cache": {"fingerprint": cache.fingerprint, "digest": cache.digest(),
                                "tokens": cache.tokens, "layers": len(cache.layers)},
            "semantic_tokens": int(context.shape[0]),
            "counters": {"reference_forward": model.counters["reference_forward"],
                         "target_forward": model.counters["target_forward"]},
            "output": {"file": "output.oxl", "shape": list(result.shape), "sha256": _sha(result)},
        }
    )
    _write_json(out / "manifest.json", manifest)
    return manifest


def run_compose(cfg: RunConfig) -> dict:
    if len(cfg.tasks) < 2:
        raise ConfigError(["compose needs at least two tasks; for a single task use the demo command"])
    kinds = [t.spec.kind.value for t in cfg.tasks]
    dupes = sorted({k for k in kinds if kinds.count(k) > 1})
    if dupes:
        raise ConfigError([f"duplicate task kinds in compose: {dupes}"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _Scene(cfg)
    model = scene.model
    specs = [(spec, l_ref, scene.features(spec, raw)) for spec, raw, l_ref in scene.references]
    model.counters.clear()
    try:
        ctx = compose_tasks(model, specs, scene.extent, scene.connector)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    result = _sample_with(scene, ctx.cache, ctx.context)
    counters = {"reference_forward": model.counters["reference_forward"],
                "target_forward": model.counters["target_forward"]}
    permuted = compose_tasks(model, specs[::-1], scene.extent, scene.connector)
    result_perm = _sample_with(scene, permuted.cache, permuted.context)
    diff = float(np.max(np.abs(result.astype(np.float64) - result_perm)))
    tol = 1e-6 * max(1.0, float(np.max(np.abs(result))))
    save_latent(out / "output.oxl", result)
    manifest = scene.base_manifest("compose")
    manifest.update(
        {
            "tasks": [scene.task_record(spec, l_ref) for spec, l_ref, _ in specs],
            "composition": ctx.summary(),
            "reference_cache": {"fingerprint": ctx.cache.fingerprint, "digest": ctx.cache.digest()},
            "counters": counters,
            "permutation": {"max_abs_diff": diff, "tol": tol, "passed": diff <= tol},
            "output": {"file": "output.oxl", "shape": list(result.shape), "sha256": _sha(result)},
        }
    )
    _write_json(out / "manifest.json", manifest)
    if diff > tol:
        raise InvariantFailure(f"composition output changed under task reordering (max diff {diff:.3e})")
    return manifest


def run_verify(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = invariants.run_all(cfg.seed, fault=cfg.fault)
    report = {
        "command": "verify",
        "seed": cfg.seed,
        "fault": cfg.fault,
        "passed": all(r.passed for r in results),
        "invariants": [r.to_dict() for r in results],
    }
    _write_json(out / "verify_report.json", report)
    failed = [r.id for r in results if not r.passed]
    if failed:
        raise InvariantFailure(f"invariants failed: {', '.join(failed)}")
    return report


def run_bench(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _latent_grid(cfg.clip_shape)
    task = cfg.tasks[0].spec.kind.value
    reports = []
    for steps in cfg.sweep_steps or (cfg.steps,):
        bc = benchmod.BenchConfig(
            tgt_grid=grid, ref_grid=grid, steps=steps, dit=cfg.model, repeats=cfg.repeats,
            warmup=cfg.warmup, seed=cfg.seed, task=task, threads=cfg.threads,
        )
        try:
            reports.append(benchmod.timed_run(bc))
        except benchmod.BenchmarkInvalid as exc:
            raise InvariantFailure(str(exc)) from None
    benchmod.emit_report(reports, out / "bench_report.json")
    manifest = {
        "command": "bench",
        "config": cfg.echo(),
        "runs": [
            {
                "N_ref": r.rows()[0]["N_ref"],
                "N_tgt": r.rows()[0]["N_tgt"],
                "S": r.config["steps"],
                "flops": r.flops,
                "counters": r.counters,
                "equivalence_max_diff": r.equivalence_max_diff,
            }
            for r in reports
        ],
        "timing_files": ["bench_report.json", "bench_report.csv"],
    }
    _write_json(out / "manifest.json", manifest)
    return {"manifest": manifest, "reports": reports}


def run_gen_fixtures(out: Path, seed: int, clip_shape) -> dict:
    return fixtures.generate(out, seed, clip_shape)


# -- argument handling ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnixfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int, help="sampler steps S")
    common.add_argument("--task", action="append", choices=[k.value for k in TaskKind],
                        help="task kind; repeat for compose")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--precision", choices=sorted(nx.PRECISIONS))
    common.add_argument("--ref-cross-attention", choices=("on", "off"))
    for name, helptext in (("demo", "sample one reference-conditioned target"),
                           ("compose", "sample with two or more tasks combined"),
                           ("verify", "run the invariant suite"),
                           ("bench", "time joint vs. decoupled sampling")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "verify":
            p.add_argument("--fault", choices=[f for f in FAULTS if f], help="inject a known fault")
        if name == "bench":
            p.add_argument("--repeats", type=int)
            p.add_argument("--threads", type=int, help="substrate threads (default $OMNIXFER_THREADS or 1)")
            p.add_argument("--sweep-steps", type=lambda s: [int(x) for x in s.split(",")],
                           help="comma-separated S values")
    g = sub.add_parser("gen-fixtures", help="write seeded synthetic clips and a prompt summary")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--clip-shape", type=lambda s: tuple(int(x) for x in s.split(",")),
                   default=fixtures.DEFAULT_CLIP_SHAPE, help="F,H,W")
    return parser


RUNNERS = {"demo": run_demo, "compose": run_compose, "verify": run_verify, "bench": run_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start_wall, start = time.time(), time.perf_counter()
    if args.command == "gen-fixtures":
        manifest = run_gen_fixtures(args.out, args.seed, args.clip_shape)
        print(f"wrote {len(manifest['files'])} fixtures to {args.out}")
        return EXIT_OK
    overrides = {
        "mode": args.command,
        "seed": args.seed,
        "steps": args.steps,
        "out": None if args.out is None else str(args.out),
        "precision": args.precision,
        "ref_cross_attention": args.ref_cross_attention,
        "tasks": args.task,
        "fault": getattr(args, "fault", None),
        "repeats": getattr(args, "repeats", None),
        "threads": getattr(args, "threads", None),
        "sweep_steps": getattr(args, "sweep_steps", None),
    }
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with nx.precision(cfg.precision):
            result = RUNNERS[args.command](cfg)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        _write_timing(Path(cfg.out), args.command, start_wall, start)
        return EXIT_INVARIANT
    extra = {}
    if args.command == "bench":
        extra = {"wall_ms": [r.wall_ms for r in result["reports"]],
                 "reduction": [r.reduction for r in result["reports"]]}
        for r in result["reports"]:
            print(f"S={r.config['steps']}: joint {r.wall_ms['joint']:.1f} ms, "
                  f"decoupled {r.wall_ms['decoupled']:.1f} ms, reduction {100 * r.reduction:.1f}%")
    elif args.command == "verify":
        for inv in result["invariants"]:
            print(f"{'PASS' if inv['passed'] else 'FAIL'}  {inv['id']}")
    else:
        print(f"wrote {Path(cfg.out) / 'manifest.json'}")
    _write_timing(Path(cfg.out), args.command, start_wall, start, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
