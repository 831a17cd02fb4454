"""Routing-trace data model and line-delimited trace file IO.

A trace file is UTF-8 JSON lines. The first line is a header declaring the
schema version and model shape; every following line is one routing record,
one per (query, layer):

    {"schema_version": 1, "model_id": "m", "num_layers": 2,
     "experts_per_layer": [8, 8], "domains": ["math", "code"]}
    {"query_id": "q0", "domain": "math", "layer": 0, "selected": [1, 5]}
    ...

Records carrying a ``gate_probs`` field are accepted; the field is ignored
because all downstream signatures are built from binary activations only.
Shared (always-active) experts are excluded from traces by convention; only
routed experts appear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from moesig.errors import TraceError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExpertSelection:
    """Top-k expert set chosen at one layer for one query."""

    layer: int
    selected: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.layer < 0:
            raise TraceError(f"layer index must be >= 0, got {self.layer}")
        if len(self.selected) == 0:
            raise TraceError("selected expert set must be nonempty")
        if len(set(self.selected)) != len(self.selected):
            raise TraceError(f"duplicate expert index in selection {self.selected}")
        object.__setattr__(self, "selected", tuple(sorted(int(i) for i in self.selected)))
        if self.selected[0] < 0:
            raise TraceError(f"negative expert index in selection {self.selected}")

    @property
    def k(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class QueryTrace:
    """All per-layer selections recorded for a single query.

    ``domain`` is a dense 1-based index into the owning trace set's domain
    label list.
    """

    query_id: str
    domain: int
    selections: tuple[ExpertSelection, ...]

    def __post_init__(self) -> None:
        if self.domain < 1:
            raise TraceError(f"domain index must be >= 1, got {self.domain}")
        layers = [s.layer for s in self.selections]
        if len(set(layers)) != len(layers):
            raise TraceError(f"query {self.query_id!r} has multiple selections for one layer")
        object.__setattr__(
            self, "selections", tuple(sorted(self.selections, key=lambda s: s.layer))
        )

    def selection_at(self, layer: int) -> ExpertSelection:
        for sel in self.selections:
            if sel.layer == layer:
                return sel
        raise TraceError(f"query {self.query_id!r} has no selection at layer {layer}")

    def has_layer(self, layer: int) -> bool:
        return any(sel.layer == layer for sel in self.selections)


@dataclass(frozen=True)
class RoutingTraceSet:
    """Validated, immutable collection of query traces for one model."""

    model_id: str
    num_layers: int
    experts_per_layer: tuple[int, ...]
    domains: tuple[str, ...]
    traces: tuple[QueryTrace, ...]
    meta: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts_per_layer", tuple(int(e) for e in self.experts_per_layer))
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "traces", tuple(self.traces))
        if self.num_layers < 1:
            raise TraceError(f"num_layers must be >= 1, got {self.num_layers}")
        if len(self.experts_per_layer) != self.num_layers:
            raise TraceError(
                f"experts_per_layer has {len(self.experts_per_layer)} entries "
                f"for {self.num_layers} layers"
            )
        if any(e < 1 for e in self.experts_per_layer):
            raise TraceError("every layer must have at least one expert")
        if len(set(self.domains)) != len(self.domains):
            raise TraceError("domain labels must be unique")
        d_max = len(self.domains)
        for trace in self.traces:
            if trace.domain > d_max:
                raise TraceError(
                    f"query {trace.query_id!r} has domain index {trace.domain} "
                    f"but only {d_max} domains are declared"
                )
            for sel in trace.selections:
                if sel.layer >= self.num_layers:
                    raise TraceError(
                        f"query {trace.query_id!r} selects at layer {sel.layer} "
                        f"but model has {self.num_layers} layers"
                    )
                limit = self.experts_per_layer[sel.layer]
                if sel.selected[-1] >= limit:
                    raise TraceError(
                        f"query {trace.query_id!r} layer {sel.layer}: expert index "
                        f"{sel.selected[-1]} out of range (valid 0..{limit - 1})"
                    )

    @property
    def num_queries(self) -> int:
        return len(self.traces)

    def domain_counts(self) -> list[int]:
        """Per-domain query counts n_d, indexed by domain label order."""
        counts = [0] * len(self.domains)
        for trace in self.traces:
            counts[trace.domain - 1] += 1
        return counts

    def domain_label(self, domain: int) -> str:
        return self.domains[domain - 1]


def binary_activation(trace: QueryTrace, layer: int, expert: int) -> int:
    """1 if ``expert`` is in the query's top-k set at ``layer``, else 0."""
    sel = trace.selection_at(layer)
    return 1 if expert in sel.selected else 0


def _parse_header(line: str, lineno: int) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"line {lineno}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or "schema_version" not in header:
        raise TraceError(f"line {lineno}: first line must be a header with a schema_version field")
    if header["schema_version"] != SCHEMA_VERSION:
        raise TraceError(
            f"line {lineno}: unsupported schema_version {header['schema_version']!r} "
            f"(supported: {SCHEMA_VERSION})"
        )
    for key in ("model_id", "num_layers", "experts_per_layer"):
        if key not in header:
            raise TraceError(f"line {lineno}: header is missing required field {key!r}")
    return header


def _parse_record(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"line {lineno}: malformed record: {exc}") from None
    if not isinstance(rec, dict):
        raise TraceError(f"line {lineno}: record must be a JSON object")
    for key in ("query_id", "domain", "layer", "selected"):
        if key not in rec:
            raise TraceError(f"line {lineno}: record is missing required field {key!r}")
    if not isinstance(rec["query_id"], str) or not isinstance(rec["domain"], str):
        raise TraceError(f"line {lineno}: query_id and domain must be strings")
    if not isinstance(rec["layer"], int) or isinstance(rec["layer"], bool):
        raise TraceError(f"line {lineno}: layer must be an integer")
    sel = rec["selected"]
    if (
        not isinstance(sel, list)
        or len(sel) == 0
        or any(not isinstance(i, int) or isinstance(i, bool) for i in sel)
    ):
        raise TraceError(f"line {lineno}: selected must be a nonempty list of integers")
    return rec


def ingest_traces(path: str | Path, schema: int = SCHEMA_VERSION) -> RoutingTraceSet:
    """Read and validate a trace file into a RoutingTraceSet.

    Records sharing a query_id are merged into one QueryTrace. If the header
    declares ``domains``, labels outside that list are rejected; otherwise
    the label-to-index mapping follows first occurrence order.
    """
    if schema != SCHEMA_VERSION:
        raise TraceError(f"unsupported schema version {schema!r}")
    path = Path(path)
    if not path.exists():
        raise TraceError(f"trace file not found: {path}")

    header: dict | None = None
    declared_domains: list[str] | None = None
    domain_index: dict[str, int] = {}
    # query_id -> (domain index, {layer: selected}, first line)
    queries: dict[str, tuple[int, dict[int, tuple[int, ...]], int]] = {}
    order: list[str] = []

    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if header is None:
                header = _parse_header(line, lineno)
                if "domains" in header and header["domains"] is not None:
                    declared_domains = [str(d) for d in header["domains"]]
                    if len(set(declared_domains)) != len(declared_domains):
                        raise TraceError(f"line {lineno}: header declares duplicate domain labels")
                    domain_index = {lab: i + 1 for i, lab in enumerate(declared_domains)}
                continue

            rec = _parse_record(line, lineno)
            label = rec["domain"]
            if label in domain_index:
                dom = domain_index[label]
            elif declared_domains is None:
                domain_index[label] = dom = len(domain_index) + 1
            else:
                raise TraceError(
                    f"line {lineno}: unknown domain label {label!r} "
                    f"(declared: {declared_domains})"
                )

            layer = rec["layer"]
            num_layers = int(header["num_layers"])
            if not 0 <= layer < num_layers:
                raise TraceError(
                    f"line {lineno}: layer {layer} out of range (model has {num_layers} layers)"
                )
            limit = int(header["experts_per_layer"][layer])
            selected = tuple(sorted(rec["selected"]))
            if len(set(selected)) != len(selected):
                raise TraceError(f"line {lineno}: duplicate expert index in selected")
            if selected[0] < 0 or selected[-1] >= limit:
                bad = selected[0] if selected[0] < 0 else selected[-1]
                raise TraceError(
                    f"line {lineno}: expert index {bad} out of range at layer {layer} "
                    f"(valid 0..{limit - 1})"
                )

            qid = rec["query_id"]
            if qid not in queries:
                queries[qid] = (dom, {}, lineno)
                order.append(qid)
            prev_dom, layers_seen, _first = queries[qid]
            if prev_dom != dom:
                raise TraceError(
                    f"line {lineno}: query {qid!r} re-appears with a different domain label"
                )
            if layer in layers_seen:
                raise TraceError(f"line {lineno}: duplicate (query_id={qid!r}, layer={layer}) record")
            layers_seen[layer] = selected

    if header is None:
        raise TraceError(f"trace file {path} is empty (missing header line)")

    domains = declared_domains if declared_domains is not None else list(domain_index)
    traces = tuple(
        QueryTrace(
            query_id=qid,
            domain=queries[qid][0],
            selections=tuple(
                ExpertSelection(layer=layer, selected=sel)
                for layer, sel in sorted(queries[qid][1].items())
            ),
        )
        for qid in order
    )
    return RoutingTraceSet(
        model_id=str(header["model_id"]),
        num_layers=int(header["num_layers"]),
        experts_per_layer=tuple(int(e) for e in header["experts_per_layer"]),
        domains=tuple(domains),
        traces=traces,
        meta=dict(header.get("meta", {})),
    )


def write_traces(trace_set: RoutingTraceSet, path: str | Path) -> None:
    """Write a trace set in the canonical line-delimited format.

    Output is byte-deterministic: header first, then one record per
    (query, layer) in trace order with layers ascending, sorted expert
    indices, and compact JSON separators.
    """
    path = Path(path)
    header = {
        "schema_version": SCHEMA_VERSION,
        "model_id": trace_set.model_id,
        "num_layers": trace_set.num_layers,
        "experts_per_layer": list(trace_set.experts_per_layer),
        "domains": list(trace_set.domains),
    }
    if trace_set.meta:
        header["meta"] = dict(trace_set.meta)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":"), ensure_ascii=False) + "\n")
        for trace in trace_set.traces:
            label = trace_set.domain_label(trace.domain)
            for sel in trace.selections:
                rec = {
                    "query_id": trace.query_id,
                    "domain": label,
                    "layer": sel.layer,
                    "selected": list(sel.selected),
                }
                fh.write(json.dumps(rec, separators=(",", ":"), ensure_ascii=False) + "\n")


def build_trace_set(
    model_id: str,
    num_layers: int,
    experts_per_layer: Sequence[int],
    domains: Sequence[str],
    records: Iterable[tuple[str, int, int, Sequence[int]]],
    meta: Mapping[str, object] | None = None,
) -> RoutingTraceSet:
    """Assemble a RoutingTraceSet from (query_id, domain, layer, selected) tuples.

    Convenience constructor used by the trace exporters and the synthetic
    generator; applies the same merge-by-query-id rule as ingestion.
    """
    queries: dict[str, tuple[int, dict[int, tuple[int, ...]]]] = {}
    order: list[str] = []
    for qid, dom, layer, selected in records:
        if qid not in queries:
            queries[qid] = (dom, {})
            order.append(qid)
        prev_dom, layers_seen = queries[qid]
        if prev_dom != dom:
            raise TraceError(f"query {qid!r} recorded with two different domains")
        if layer in layers_seen:
            raise TraceError(f"duplicate (query_id={qid!r}, layer={layer}) record")
        layers_seen[layer] = tuple(selected)
    traces = tuple(
        QueryTrace(
            query_id=qid,
            domain=queries[qid][0],
            selections=tuple(
                ExpertSelection(layer=layer, selected=sel)
                for layer, sel in sorted(queries[qid][1].items())
            ),
        )
        for qid in order
    )
    return RoutingTraceSet(
        model_id=model_id,
        num_layers=num_layers,
        experts_per_layer=tuple(experts_per_layer),
        domains=tuple(domains),
        traces=traces,
        meta=dict(meta or {}),
    )
