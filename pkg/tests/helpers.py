"""Shared random-data builders for the test suite."""

from __future__ import annotations

import numpy as np

from moesig.routing_trace import RoutingTraceSet, build_trace_set
from moesig.signatures import CollaborationMatrix, SpecializationProfile


def random_trace_set(
    rng: np.random.Generator,
    max_queries: int = 50,
    max_experts: int = 8,
    max_domains: int = 4,
    num_layers: int = 1,
    model_id: str = "rand",
) -> RoutingTraceSet:
    """Random trace set with mixed per-query k and possibly empty domains."""
    num_experts = int(rng.integers(2, max_experts + 1))
    num_domains = int(rng.integers(1, max_domains + 1))
    n = int(rng.integers(1, max_queries + 1))
    records = []
    for q in range(n):
        dom = int(rng.integers(1, num_domains + 1))
        for layer in range(num_layers):
            k = int(rng.integers(1, min(num_experts, 4) + 1))
            selected = tuple(int(i) for i in rng.choice(num_experts, size=k, replace=False))
            records.append((f"q{q}", dom, layer, selected))
    return build_trace_set(
        model_id=model_id,
        num_layers=num_layers,
        experts_per_layer=(num_experts,) * num_layers,
        domains=tuple(f"d{j + 1}" for j in range(num_domains)),
        records=records,
    )


def random_profile(rng: np.random.Generator, num_experts: int, num_domains: int) -> SpecializationProfile:
    matrix = rng.random((num_experts, num_domains)) ** 2 + 1e-6
    matrix /= matrix.sum(axis=0, keepdims=True)
    return SpecializationProfile(
        layer=0,
        matrix=matrix,
        kappa_per_domain=np.full(num_domains, 2.0),
        counts=np.full(num_domains, 10, dtype=np.int64),
        domain_labels=tuple(f"d{j + 1}" for j in range(num_domains)),
    )


def random_collab(rng: np.random.Generator, num_experts: int, sparsity: float = 0.5) -> CollaborationMatrix:
    upper = rng.random((num_experts, num_experts)) * (rng.random((num_experts, num_experts)) < sparsity)
    upper = np.triu(upper, 1)
    matrix = upper + upper.T
    if matrix.sum() == 0:
        matrix[0, 1] = matrix[1, 0] = 0.5
    matrix = matrix / matrix.sum()
    return CollaborationMatrix(layer=0, matrix=matrix, pair_normalizer=2.0, zero_mass=False)


def relabel_traces(traces: RoutingTraceSet, mapping: tuple[int, ...]) -> RoutingTraceSet:
    """Apply an expert relabeling i -> mapping[i] to every selection."""
    records = []
    for trace in traces.traces:
        for sel in trace.selections:
            records.append(
                (
                    trace.query_id,
                    trace.domain,
                    sel.layer,
                    tuple(sorted(mapping[i] for i in sel.selected)),
                )
            )
    return build_trace_set(
        model_id=traces.model_id + "-relabel",
        num_layers=traces.num_layers,
        experts_per_layer=traces.experts_per_layer,
        domains=traces.domains,
        records=records,
    )
