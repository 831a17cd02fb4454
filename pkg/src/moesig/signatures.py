"""Expert specialization profiles and expert collaboration matrices.

Both signatures are built from binary top-k activations. Counts are
accumulated in exact integer arithmetic and divided once at the end, so
results are bitwise deterministic regardless of trace order or parallelism.

Specialization: the selection frequency of expert i on domain d, divided by
the mean active-expert count of that domain, so every domain column is a
probability distribution over experts.

Collaboration: the co-activation frequency of expert pairs, divided by the
mean number of ordered active pairs per query, so the off-diagonal sums
to one. When every query activates a single expert there are no pairs; the
matrix is returned all-zero with ``zero_mass`` set, and downstream scoring
falls back to the specialization distance alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from moesig.errors import SignatureError
from moesig.routing_trace import RoutingTraceSet

LayerPolicy = str | int

COLUMN_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SpecializationProfile:
    """Column-stochastic expert-by-domain selection frequency matrix.

    ``matrix[i, d]`` is the normalized frequency with which expert i serves
    the d-th included domain. Domains with zero queries are excluded from
    the domain axis entirely (a zero column could not be normalized).
    """

    layer: int
    matrix: np.ndarray  # (E, D') normalized selection frequencies
    kappa_per_domain: np.ndarray  # (D',) mean active-expert count per domain
    counts: np.ndarray  # (D',) per-domain query counts n_d
    domain_labels: tuple[str, ...]

    def __post_init__(self) -> None:
        e, d = self.matrix.shape
        if d != len(self.domain_labels) or d != len(self.kappa_per_domain) or d != len(self.counts):
            raise SignatureError("profile domain axis is inconsistent")
        if e < 1:
            raise SignatureError("profile needs at least one expert")

    @property
    def num_experts(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_domains(self) -> int:
        return self.matrix.shape[1]

    @property
    def selection_frequency(self) -> np.ndarray:
        """Raw per-domain selection frequencies (before kappa normalization)."""
        return self.matrix * self.kappa_per_domain[None, :]


@dataclass(frozen=True, eq=False)
class CollaborationMatrix:
    """Symmetric zero-diagonal matrix of normalized expert co-activation."""

    layer: int
    matrix: np.ndarray  # (E, E), off-diagonal sums to 1 unless zero_mass
    pair_normalizer: float  # mean of k(k-1) over queries
    zero_mass: bool = False

    def __post_init__(self) -> None:
        e1, e2 = self.matrix.shape
        if e1 != e2:
            raise SignatureError("collaboration matrix must be square")

    @property
    def num_experts(self) -> int:
        return self.matrix.shape[0]


class SignatureBundle(NamedTuple):
    """Specialization and collaboration signatures at one layer."""

    spec: SpecializationProfile
    collab: CollaborationMatrix


def _check_layer(traces: RoutingTraceSet, layer: int) -> None:
    if not 0 <= layer < traces.num_layers:
        raise SignatureError(
            f"layer {layer} out of range (model {traces.model_id!r} has "
            f"{traces.num_layers} layers)"
        )
    for trace in traces.traces:
        if not trace.has_layer(layer):
            raise SignatureError(
                f"query {trace.query_id!r} has no selection at layer {layer}"
            )


def compute_specialization(
    traces: RoutingTraceSet,
    layer: int,
    domains: Sequence[str] | None = None,
) -> SpecializationProfile:
    """Build the specialization profile at ``layer``.

    ``domains`` optionally restricts the profile to the given labels, in the
    given order; a requested domain with no queries is an error. By default
    all declared domains with at least one query are included, in
    declaration order.
    """
    _check_layer(traces, layer)
    if traces.num_queries == 0:
        raise SignatureError("trace set is empty")

    num_experts = traces.experts_per_layer[layer]
    num_declared = len(traces.domains)
    sel_counts = np.zeros((num_experts, num_declared), dtype=np.int64)
    k_totals = np.zeros(num_declared, dtype=np.int64)
    n_d = np.zeros(num_declared, dtype=np.int64)
    for trace in traces.traces:
        sel = trace.selection_at(layer)
        d = trace.domain - 1
        sel_counts[list(sel.selected), d] += 1
        k_totals[d] += sel.k
        n_d[d] += 1

    if domains is not None:
        missing = [lab for lab in domains if lab not in traces.domains]
        if missing:
            raise SignatureError(f"unknown domain label(s) {missing}")
        idx = [traces.domains.index(lab) for lab in domains]
        empty = [traces.domains[i] for i in idx if n_d[i] == 0]
        if empty:
            raise SignatureError(f"domain(s) with no queries: {empty}")
        labels = tuple(domains)
    else:
        idx = [i for i in range(num_declared) if n_d[i] > 0]
        if not idx:
            raise SignatureError("no domain has any queries")
        labels = tuple(traces.domains[i] for i in idx)

    sel_counts = sel_counts[:, idx]
    k_totals = k_totals[idx]
    n_d = n_d[idx]
    # S_bar[i, d] = (count[i, d] / n_d) / (k_total[d] / n_d) = count / k_total
    matrix = sel_counts.astype(np.float64) / k_totals.astype(np.float64)[None, :]
    kappa = k_totals.astype(np.float64) / n_d.astype(np.float64)
    return SpecializationProfile(
        layer=layer,
        matrix=matrix,
        kappa_per_domain=kappa,
        counts=n_d,
        domain_labels=labels,
    )


def compute_collaboration(traces: RoutingTraceSet, layer: int) -> CollaborationMatrix:
    """Build the collaboration matrix at ``layer``.

    If every query selects a single expert there is no co-activation mass;
    the result is all-zero with ``zero_mass=True`` rather than an error.
    """
    _check_layer(traces, layer)
    if traces.num_queries == 0:
        raise SignatureError("trace set is empty")

    num_experts = traces.experts_per_layer[layer]
    pair_counts = np.zeros((num_experts, num_experts), dtype=np.int64)
    pair_total = 0
    for trace in traces.traces:
        sel = trace.selection_at(layer)
        ids = list(sel.selected)
        pair_counts[np.ix_(ids, ids)] += 1
        pair_total += sel.k * (sel.k - 1)
    np.fill_diagonal(pair_counts, 0)

    n = traces.num_queries
    if pair_total == 0:
        return CollaborationMatrix(
            layer=layer,
            matrix=np.zeros((num_experts, num_experts), dtype=np.float64),
            pair_normalizer=0.0,
            zero_mass=True,
        )
    # B_bar = (pair_counts / n) / (pair_total / n) = pair_counts / pair_total
    matrix = pair_counts.astype(np.float64) / float(pair_total)
    return CollaborationMatrix(
        layer=layer,
        matrix=matrix,
        pair_normalizer=pair_total / n,
        zero_mass=False,
    )


def resolve_layer(policy: LayerPolicy, num_layers: int) -> int:
    """Map a layer policy (first/median/last or an explicit index) to an index."""
    if isinstance(policy, int) and not isinstance(policy, bool):
        if not 0 <= policy < num_layers:
            raise SignatureError(f"explicit layer {policy} out of range (0..{num_layers - 1})")
        return policy
    if policy == "first":
        return 0
    if policy == "median":
        return (num_layers - 1) // 2
    if policy == "last":
        return num_layers - 1
    raise SignatureError(f"unknown layer policy {policy!r}")


def signature_bundle(
    traces: RoutingTraceSet,
    layer_policy: LayerPolicy = "last",
    domains: Sequence[str] | None = None,
) -> SignatureBundle:
    """Compute both signatures at the layer chosen by ``layer_policy``.

    The default policy is the last layer, where routing carries the most
    model-specific signal; first and median exist for layer ablations.
    """
    if traces.num_queries == 0:
        raise SignatureError("trace set is empty")
    layer = resolve_layer(layer_policy, traces.num_layers)
    return SignatureBundle(
        spec=compute_specialization(traces, layer, domains=domains),
        collab=compute_collaboration(traces, layer),
    )


def save_bundle(bundle: SignatureBundle, path: str | Path, meta: dict | None = None) -> None:
    """Serialize a signature bundle to a structured JSON file."""
    spec, collab = bundle
    doc = {
        "format": "moesig-signatures",
        "version": 1,
        "layer": spec.layer,
        "num_experts": spec.num_experts,
        "domains": list(spec.domain_labels),
        "specialization": {
            "matrix": spec.matrix.tolist(),
            "kappa_per_domain": spec.kappa_per_domain.tolist(),
            "counts": spec.counts.tolist(),
        },
        "collaboration": {
            "matrix": collab.matrix.tolist(),
            "pair_normalizer": collab.pair_normalizer,
            "zero_mass": collab.zero_mass,
        },
        "meta": meta or {},
    }
    Path(path).write_text(
        json.dumps(doc, separators=(",", ":"), ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_bundle(path: str | Path) -> SignatureBundle:
    """Load a signature bundle written by :func:`save_bundle`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "moesig-signatures" or doc.get("version") != 1:
        raise SignatureError(f"{path}: not a version-1 signature file")
    layer = int(doc["layer"])
    spec = SpecializationProfile(
        layer=layer,
        matrix=np.asarray(doc["specialization"]["matrix"], dtype=np.float64),
        kappa_per_domain=np.asarray(doc["specialization"]["kappa_per_domain"], dtype=np.float64),
        counts=np.asarray(doc["specialization"]["counts"], dtype=np.int64),
        domain_labels=tuple(doc["domains"]),
    )
    collab = CollaborationMatrix(
        layer=layer,
        matrix=np.asarray(doc["collaboration"]["matrix"], dtype=np.float64),
        pair_normalizer=float(doc["collaboration"]["pair_normalizer"]),
        zero_mass=bool(doc["collaboration"]["zero_mass"]),
    )
    return SignatureBundle(spec=spec, collab=collab)


def dump_bundle_csv(bundle: SignatureBundle, path: str | Path, meta_line: str | None = None) -> None:
    """Dump both signatures as a flat CSV for inspection.

    Specialization rows carry (domain, expert, value); collaboration rows
    carry (i, j, value) for off-diagonal entries. Within each domain the
    specialization values sum to 1.
    """
    spec, collab = bundle
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if meta_line is not None:
            fh.write(f"# {meta_line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "layer", "domain", "i", "j", "value"])
        for d, label in enumerate(spec.domain_labels):
            for i in range(spec.num_experts):
                writer.writerow(
                    ["specialization", spec.layer, label, i, "", repr(float(spec.matrix[i, d]))]
                )
        for d, label in enumerate(spec.domain_labels):
            writer.writerow(
                ["kappa", spec.layer, label, "", "", repr(float(spec.kappa_per_domain[d]))]
            )
        for i in range(collab.num_experts):
            for j in range(collab.num_experts):
                if i != j:
                    writer.writerow(
                        ["collaboration", collab.layer, "", i, j, repr(float(collab.matrix[i, j]))]
                    )
