"""Synthetic teacher/distilled/scratch routing scenarios with known ground truth.

Routing is drawn from domain-conditioned expert preferences: each domain
elevates a contiguous block of experts. The teacher's blocks are laid out
deterministically; the scratch student and the distilled student's own
fallback preferences use independently sampled blocks. The distilled
student copies each teacher (query, layer) decision with probability rho
and otherwise draws from its own preferences, so rho=1 reproduces the
teacher exactly while rho=0 makes the distilled and scratch students
statistically exchangeable. With ``permute_labels`` on, each student's
expert indices are scrambled by an independent hidden relabeling (expert
labels are arbitrary in practice); the distilled one is recorded so tests
can check that the matcher recovers it.

``layer_bias`` scales the domain signal per layer: at bias b the preference
distribution is mixed toward uniform with weight 1-b and the effective copy
probability becomes rho*b. Bias 0 models early layers whose routing
reflects shared surface statistics rather than inherited structure; bias 1
(the default everywhere) is the plain scenario above.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from moesig._meta import artifact_meta, config_digest
from moesig._rng import substream
from moesig.detector import detect_pair
from moesig.errors import ScenarioError
from moesig.routing_trace import RoutingTraceSet, build_trace_set, write_traces
from moesig.signatures import LayerPolicy, signature_bundle
from moesig.transport import Permutation

PREFERRED_WEIGHT = 8.0  # elevated selection weight of a domain's expert block
BASE_WEIGHT = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Shape, relatedness, and seeding of one synthetic scenario."""

    num_experts: int
    num_layers: int
    top_k: int
    num_domains: int
    n_per_domain: int
    relatedness: float
    permute_labels: bool = True
    seed: int = 0
    layer_bias: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_experts < 1 or self.num_layers < 1 or self.num_domains < 1:
            raise ScenarioError("num_experts, num_layers, and num_domains must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ScenarioError(f"need 1 <= top_k <= num_experts, got {self.top_k}")
        if self.n_per_domain < 1:
            raise ScenarioError("n_per_domain must be >= 1")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ScenarioError(f"relatedness must lie in [0, 1], got {self.relatedness}")
        if self.layer_bias is not None:
            bias = tuple(float(b) for b in self.layer_bias)
            if len(bias) != self.num_layers:
                raise ScenarioError(
                    f"layer_bias has {len(bias)} entries for {self.num_layers} layers"
                )
            if any(not 0.0 <= b <= 1.0 for b in bias):
                raise ScenarioError("layer_bias entries must lie in [0, 1]")
            object.__setattr__(self, "layer_bias", bias)

    @property
    def resolved_layer_bias(self) -> tuple[float, ...]:
        return self.layer_bias if self.layer_bias is not None else (1.0,) * self.num_layers

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "num_layers": self.num_layers,
            "top_k": self.top_k,
            "num_domains": self.num_domains,
            "n_per_domain": self.n_per_domain,
            "relatedness": self.relatedness,
            "permute_labels": self.permute_labels,
            "seed": self.seed,
            "layer_bias": list(self.layer_bias) if self.layer_bias is not None else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        if doc.get("layer_bias") is not None:
            doc["layer_bias"] = tuple(doc["layer_bias"])
        elif "layer_bias" in doc:
            doc["layer_bias"] = None
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario config field(s): {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass(frozen=True)
class Scenario:
    """Three aligned trace sets plus the generation ground truth."""

    config: ScenarioConfig
    teacher: RoutingTraceSet
    distilled: RoutingTraceSet
    scratch: RoutingTraceSet
    ground_truth: str  # model id of the distilled member
    hidden_permutation: Permutation | None


def _block_preferences(starts: np.ndarray, num_experts: int, num_domains: int) -> np.ndarray:
    """(D, E) preference rows: elevated weight on a contiguous wrap-around block."""
    block = math.ceil(num_experts / num_domains)
    weights = np.full((num_domains, num_experts), BASE_WEIGHT, dtype=np.float64)
    for d in range(num_domains):
        idx = (int(starts[d]) + np.arange(block)) % num_experts
        weights[d, idx] = PREFERRED_WEIGHT
    return weights / weights.sum(axis=1, keepdims=True)


def _sample_topk(rng: np.random.Generator, weights: np.ndarray, k: int) -> np.ndarray:
    """Weighted sampling without replacement via Gumbel perturbation, row-wise.

    Returns (n, k) expert indices for per-row weight vectors (n, E).
    """
    gumbel = rng.gumbel(size=weights.shape)
    keys = np.log(weights) + gumbel
    return np.argsort(-keys, axis=1, kind="stable")[:, :k]


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Generate teacher, distilled, and scratch trace sets under one seed."""
    e, l, k, d = config.num_experts, config.num_layers, config.top_k, config.num_domains
    n = d * config.n_per_domain
    bias = config.resolved_layer_bias
    seed = config.seed

    teacher_starts = (np.arange(d) * math.ceil(e / d)) % e
    teacher_pref = _block_preferences(teacher_starts, e, d)
    scratch_pref = _block_preferences(substream(seed, "scratch-prefs").integers(0, e, size=d), e, d)
    own_pref = _block_preferences(substream(seed, "distilled-prefs").integers(0, e, size=d), e, d)

    domain_of_query = np.repeat(np.arange(d), config.n_per_domain)
    query_ids = [f"q{i:06d}" for i in range(n)]
    labels = tuple(f"d{j + 1}" for j in range(d))

    rng_teacher = substream(seed, "teacher-draw")
    rng_distilled = substream(seed, "distilled-draw")
    rng_scratch = substream(seed, "scratch-draw")
    rng_copy = substream(seed, "copy-mask")

    # Every candidate's expert indices are arbitrary, so both students get
    # independent hidden relabelings. Relabeling only one would bias the pair:
    # the positional ground metric makes the matched distance sensitive to the
    # student-side labeling except in the relabeled-copy limit.
    sigma: np.ndarray | None = None
    tau: np.ndarray | None = None
    if config.permute_labels:
        sigma = substream(seed, "hidden-permutation").permutation(e)
        tau = substream(seed, "scratch-relabel").permutation(e)

    uniform = np.full(e, 1.0 / e)
    teacher_sel: list[np.ndarray] = []
    distilled_sel: list[np.ndarray] = []
    scratch_sel: list[np.ndarray] = []
    for layer in range(l):
        b = bias[layer]
        t_weights = (1.0 - b) * uniform[None, :] + b * teacher_pref[domain_of_query]
        o_weights = (1.0 - b) * uniform[None, :] + b * own_pref[domain_of_query]
        s_weights = (1.0 - b) * uniform[None, :] + b * scratch_pref[domain_of_query]

        t_sets = _sample_topk(rng_teacher, t_weights, k)
        own_sets = _sample_topk(rng_distilled, o_weights, k)
        copy = rng_copy.random(n) < config.relatedness * b
        d_sets = np.where(copy[:, None], t_sets, own_sets)
        if sigma is not None:
            d_sets = sigma[d_sets]
        s_sets = _sample_topk(rng_scratch, s_weights, k)
        if tau is not None:
            s_sets = tau[s_sets]

        teacher_sel.append(np.sort(t_sets, axis=1))
        distilled_sel.append(np.sort(d_sets, axis=1))
        scratch_sel.append(np.sort(s_sets, axis=1))

    def _build(model_id: str, selections: list[np.ndarray]) -> RoutingTraceSet:
        records = []
        for q in range(n):
            dom = int(domain_of_query[q]) + 1
            for layer in range(l):
                records.append((query_ids[q], dom, layer, tuple(int(i) for i in selections[layer][q])))
        return build_trace_set(
            model_id=model_id,
            num_layers=l,
            experts_per_layer=(e,) * l,
            domains=labels,
            records=records,
            meta={"seed": seed, "config_digest": config.digest()},
        )

    return Scenario(
        config=config,
        teacher=_build("teacher", teacher_sel),
        distilled=_build("distilled", distilled_sel),
        scratch=_build("scratch", scratch_sel),
        ground_truth="distilled",
        hidden_permutation=Permutation(tuple(int(i) for i in sigma)) if sigma is not None else None,
    )


def write_scenario(scenario: Scenario, out_dir: str | Path) -> dict:
    """Write the three trace files plus a ground-truth manifest.

    Candidate files are neutrally named (the scenario seed decides whether
    the distilled member becomes cand1 or cand2); the manifest records which
    one it is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    distilled_first = bool(substream(scenario.config.seed, "pair-order").random() < 0.5)
    cand_map = {
        "cand1": scenario.distilled if distilled_first else scenario.scratch,
        "cand2": scenario.scratch if distilled_first else scenario.distilled,
    }
    write_traces(replace(scenario.teacher, model_id="teacher"), out / "teacher.jsonl")
    for name, traces in cand_map.items():
        write_traces(replace(traces, model_id=name), out / f"{name}.jsonl")
    manifest = {
        "format": "moesig-scenario",
        "version": 1,
        "teacher": "teacher.jsonl",
        "candidates": {"cand1": "cand1.jsonl", "cand2": "cand2.jsonl"},
        "distilled": "cand1" if distilled_first else "cand2",
        "hidden_permutation": (
            list(scenario.hidden_permutation.mapping)
            if scenario.hidden_permutation is not None
            else None
        ),
        "config": scenario.config.to_dict(),
        "meta": artifact_meta(scenario.config.seed, scenario.config.digest()),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def sweep(
    configs: Sequence[ScenarioConfig],
    mode: str = "auto",
    layer_policy: LayerPolicy = "last",
) -> list[dict]:
    """Generate and detect each scenario; one result row per config.

    ``correct`` records whether the distilled member won its pair, and
    ``margin`` is the signed score gap (distilled minus scratch).
    """
    if not configs:
        raise ScenarioError("sweep needs at least one scenario config")
    rows = []
    for config in configs:
        scenario = generate_scenario(config)
        teacher_sig = signature_bundle(scenario.teacher, layer_policy)
        distilled_sig = signature_bundle(scenario.distilled, layer_policy)
        scratch_sig = signature_bundle(scenario.scratch, layer_policy)
        verdict = detect_pair(
            teacher_sig,
            distilled_sig,
            scratch_sig,
            mode=mode,
            candidate_ids=("distilled", "scratch"),
        )
        s_d, s_s = verdict.scores
        rows.append(
            {
                "rho": config.relatedness,
                "num_experts": config.num_experts,
                "num_layers": config.num_layers,
                "top_k": config.top_k,
                "num_domains": config.num_domains,
                "n_per_domain": config.n_per_domain,
                "seed": config.seed,
                "correct": int(verdict.predicted_index == 1),
                "tie": verdict.tie,
                "margin": s_d.score - s_s.score,
                "d_spec_distilled": s_d.d_spec,
                "d_spec_scratch": s_s.d_spec,
                "d_collab_distilled": s_d.d_collab,
                "d_collab_scratch": s_s.d_collab,
                "method": s_d.distance.method if s_d.distance is not None else "",
            }
        )
    return rows


def summarize_sweep(rows: Sequence[dict]) -> list[dict]:
    """Aggregate sweep rows per rho: trial count, accuracy, mean margin."""
    grouped: dict[float, list[dict]] = {}
    for row in rows:
        grouped.setdefault(float(row["rho"]), []).append(row)
    summary = []
    for rho in sorted(grouped):
        group = grouped[rho]
        summary.append(
            {
                "rho": rho,
                "trials": len(group),
                "accuracy": sum(r["correct"] for r in group) / len(group),
                "mean_margin": sum(r["margin"] for r in group) / len(group),
            }
        )
    return summary
