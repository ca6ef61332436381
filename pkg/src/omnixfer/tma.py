"""Task-adaptive semantic conditioning for the target branch.

Each task kind owns a bank of learnable query tokens. A semantic provider
(stand-in for a multimodal LLM) reads pooled summaries of the target's
first frame, the reference video, a per-task template and the prompt, and
returns one feature row per query token. A three-layer MLP connector maps
those rows into the DiT's model dimension; the result is consumed only by
target-branch cross-attention.

Several tasks compose by concatenating, token-wise, their reference caches
and their aligned semantic tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import numerics as nx
from .attention import RefCache
from .dit import DitModel, gelu
from .latents import LatentBlock, TaskKind, TaskSpec

PROVIDER_API_VERSION = 1
DEFAULT_QUERIES = 64
DEFAULT_PROVIDER_DIM = 256


@dataclass(frozen=True)
class QueryBank:
    kind: TaskKind
    tokens: np.ndarray  # [Q, provider_dim]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def make_query_banks(seed: int, queries: int = DEFAULT_QUERIES, provider_dim: int = DEFAULT_PROVIDER_DIM) -> dict:
    rng = nx.Rng(seed, "tma/banks")
    return {
        kind: QueryBank(kind, rng.child(kind.value).normal((queries, provider_dim), 0.02))
        for kind in TaskKind
    }


def select_bank(banks: dict, task) -> QueryBank:
    return banks[TaskSpec.parse(task).kind]


@dataclass(frozen=True)
class ProviderInputs:
    """Pre-pooled (or poolable ``[tokens, s]``) summaries fed to a provider."""

    first_frame: np.ndarray
    reference: np.ndarray
    prompt: np.ndarray

    @staticmethod
    def pool(x) -> np.ndarray:
        x = nx.asarray(x)
        return x.reshape(-1, x.shape[-1]).mean(axis=0) if x.ndim > 1 else x


@runtime_checkable
class SemanticProvider(Protocol):
    """Plug-in contract: pooled summaries in, ``[Q, provider_dim]`` features out.

    Implementations must be deterministic, must return exactly one row per
    query token of the bank they are given, and must declare
    ``api_version == PROVIDER_API_VERSION``.
    """

    name: str
    api_version: int
    summary_dim: int
    provider_dim: int

    def __call__(self, inputs: ProviderInputs, bank: QueryBank) -> np.ndarray: ...


class StubProvider:
    name = "stub-linear"
    api_version = PROVIDER_API_VERSION

    def __init__(self, summary_dim: int = 16, provider_dim: int = DEFAULT_PROVIDER_DIM, seed: int = 0):
        self.summary_dim = summary_dim
        self.provider_dim = provider_dim
        rng = nx.Rng(seed, "tma/stub")
        self.weight = rng.child("map").normal((4 * summary_dim, provider_dim), 1.0 / np.sqrt(4 * summary_dim))
        # template tokens: a fixed constant summary per task kind
        self.templates = {k: rng.child("template", k.value).normal((summary_dim,)) for k in TaskKind}

    def __call__(self, inputs: ProviderInputs, bank: QueryBank) -> np.ndarray:
        parts = [
            ProviderInputs.pool(inputs.first_frame),
            ProviderInputs.pool(inputs.reference),
            self.templates[bank.kind],
            ProviderInputs.pool(inputs.prompt),
        ]
        for p in parts:
            if p.shape != (self.summary_dim,):
                raise ValueError(f"summary has shape {p.shape}, provider expects ({self.summary_dim},)")
        summary = nx.concat(0, *parts)
        lifted = nx.matmul(summary[None], self.weight)
        return bank.tokens + lifted


def stub_provider(inputs: ProviderInputs, bank: QueryBank, provider: StubProvider | None = None) -> np.ndarray:
    if provider is None:
        s = ProviderInputs.pool(inputs.reference).shape[0]
        provider = StubProvider(summary_dim=s, provider_dim=bank.tokens.shape[1])
    return provider(inputs, bank)


def validate_provider(provider, inputs: ProviderInputs, bank: QueryBank) -> list[str]:
    """Check a provider against the plug-in contract; returns the list of violations."""
    problems = []
    if not isinstance(provider, SemanticProvider):
        return ["object does not implement the SemanticProvider protocol"]
    if provider.api_version != PROVIDER_API_VERSION:
        problems.append(f"api_version {provider.api_version} != {PROVIDER_API_VERSION}")
    first = np.asarray(provider(inputs, bank))
    second = np.asarray(provider(inputs, bank))
    if first.shape != (bank.size, provider.provider_dim):
        problems.append(f"output shape {first.shape} != ({bank.size}, {provider.provider_dim})")
    if not np.all(np.isfinite(first)):
        problems.append("output contains non-finite values")
    if first.shape != second.shape or not np.array_equal(first, second):
        problems.append("output is not deterministic")
    return problems


class Connector:
    """Three affine layers (GELU between) from provider features to model_dim."""

    def __init__(self, provider_dim: int, model_dim: int, hidden_dim: int = 256, seed: int = 0, weights=None):
        if weights is None:
            rng = nx.Rng(seed, "tma/connector")
            dims = [provider_dim, hidden_dim, hidden_dim, model_dim]
            weights = {}
            for i in range(3):
                weights[f"w{i + 1}"] = rng.child(f"w{i + 1}").normal((dims[i], dims[i + 1]), 1.0 / np.sqrt(dims[i]))
                weights[f"b{i + 1}"] = np.zeros(dims[i + 1], dtype=nx.get_dtype())
        self.weights = dict(weights)
        if self.weights["w1"].shape[0] != provider_dim or self.weights["w3"].shape[1] != model_dim:
            raise ValueError("connector weights do not match provider_dim/model_dim")
        self.provider_dim = provider_dim
        self.model_dim = model_dim

    def parameters(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(w.shape) for name, w in sorted(self.weights.items())}

    def align(self, features) -> np.ndarray:
        features = nx.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.provider_dim:
            raise ValueError(f"features {features.shape} do not match provider_dim {self.provider_dim}")
        w = self.weights
        h = gelu(nx.matmul(features, w["w1"]) + w["b1"])
        h = gelu(nx.matmul(h, w["w2"]) + w["b2"])
        return nx.matmul(h, w["w3"]) + w["b3"]

    def __call__(self, features, proj):
        """Aligned tokens pushed through a cross-attention K/V projection pair."""
        tokens = self.align(features)
        return nx.matmul(tokens, proj.wk), nx.matmul(tokens, proj.wv)


@dataclass(frozen=True)
class ComposedContext:
    cache: RefCache
    context: np.ndarray           # aligned semantic tokens [sum Q, model_dim]
    context_sizes: tuple[int, ...]
    tasks: tuple[str, ...]

    def external_kv(self, model: DitModel, layer: int):
        return model.external_kv(layer, self.context)

    def summary(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "biases": [list(p["bias"]) for p in self.cache.parts],
            "reference_tokens": [p["tokens"] for p in self.cache.parts],
            "reference_kv_tokens": self.cache.tokens,
            "semantic_tokens": list(self.context_sizes),
            "semantic_kv_tokens": int(self.context.shape[0]),
        }


def compose_tasks(
    model: DitModel,
    specs,
    target_extent,
    connector: Connector,
    max_appearance: int | None = 1,
) -> ComposedContext:
    """Concatenate reference caches and aligned semantic tokens across tasks.

    ``specs`` is a sequence of ``(task, l_ref, features)`` where ``features``
    are provider outputs for that task. Order is preserved.
    """
    specs = [(TaskSpec.parse(t), l_ref, feats) for t, l_ref, feats in specs]
    if not specs:
        raise ValueError("compose_tasks needs at least one task")
    kinds = [t.kind for t, _, _ in specs]
    dupes = sorted({k.value for k in kinds if kinds.count(k) > 1})
    if dupes:
        raise ValueError(f"duplicate task kinds are ambiguous (shared query bank): {dupes}")
    n_app = sum(t.is_appearance for t, _, _ in specs)
    if max_appearance is not None and n_app > max_appearance:
        raise ValueError(f"{n_app} appearance tasks given, at most {max_appearance} allowed")
    caches, tokens = [], []
    for task, l_ref, feats in specs:
        if not isinstance(l_ref, LatentBlock):
            raise TypeError("reference must be an assembled LatentBlock")
        caches.append(model.ref_branch_forward(l_ref, task, target_extent))
        tokens.append(connector.align(feats))
    return ComposedContext(
        cache=RefCache.concat(caches),
        context=nx.concat(0, *tokens),
        context_sizes=tuple(int(t.shape[0]) for t in tokens),
        tasks=tuple(t.kind.value for t, _, _ in specs),
    )
