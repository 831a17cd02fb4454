"""Teacher/candidate scoring, paired verdicts, and benchmark aggregation.

A candidate is scored as the negated average of its two signature distances
to the teacher, so higher scores mean stronger routing similarity and
therefore stronger distillation evidence. The paired protocol picks the
higher-scoring member of a candidate pair; a benchmark repeats that per
domain and reports the fraction of domains where the distilled member wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from moesig.errors import DetectorError
from moesig.routing_trace import RoutingTraceSet
from moesig.signatures import LayerPolicy, SignatureBundle, signature_bundle
from moesig.transport import SignatureDistance, signature_distance

TIE_EPSILON = 1e-12


@dataclass(frozen=True)
class DetectionScore:
    """Distillation-evidence score of one candidate against the teacher."""

    score: float
    d_spec: float
    d_collab: float | None
    candidate_id: str = ""
    distance: SignatureDistance | None = field(default=None, compare=False)


@dataclass(frozen=True)
class PairVerdict:
    """Outcome of comparing one candidate pair against the teacher."""

    predicted_index: int  # 1 or 2
    margin: float  # score(chosen) - score(other), >= 0
    tie: bool
    scores: tuple[DetectionScore, DetectionScore]

    def __post_init__(self) -> None:
        if self.predicted_index not in (1, 2):
            raise DetectorError(f"predicted_index must be 1 or 2, got {self.predicted_index}")
        if self.margin < 0:
            raise DetectorError(f"margin must be nonnegative, got {self.margin}")

    @property
    def chosen(self) -> DetectionScore:
        return self.scores[self.predicted_index - 1]


@dataclass(frozen=True)
class BenchmarkRow:
    """Per-domain pair result. ``margin`` is signed: score(kd) - score(scratch)."""

    domain: str
    d_spec_kd: float
    d_spec_scratch: float
    d_collab_kd: float | None
    d_collab_scratch: float | None
    margin: float
    verdict: str  # "kd" or "scratch"
    tie: bool

    @property
    def correct(self) -> bool:
        return self.verdict == "kd"

    @property
    def spec_reduction_pct(self) -> float | None:
        """Relative specialization-distance change of the distilled member, percent.

        Negative when the distilled member sits closer to the teacher, the
        annotation convention used for per-task bar charts. Undefined when
        the scratch distance is zero.
        """
        if self.d_spec_scratch == 0:
            return None
        return 100.0 * (self.d_spec_kd - self.d_spec_scratch) / self.d_spec_scratch

    @property
    def collab_reduction_pct(self) -> float | None:
        if self.d_collab_kd is None or self.d_collab_scratch in (None, 0):
            return None
        return 100.0 * (self.d_collab_kd - self.d_collab_scratch) / self.d_collab_scratch


@dataclass(frozen=True)
class BenchmarkReport:
    """All per-domain verdicts plus the aggregate pairwise accuracy."""

    rows: tuple[BenchmarkRow, ...]
    layer_policy: str
    mode: str

    @property
    def accuracy(self) -> float:
        if not self.rows:
            raise DetectorError("benchmark has no evaluated domains")
        return sum(1 for r in self.rows if r.correct) / len(self.rows)

    @property
    def mean_margin(self) -> float:
        return sum(r.margin for r in self.rows) / len(self.rows)


def score_candidate(
    teacher_sig: SignatureBundle,
    student_sig: SignatureBundle,
    mode: str = "auto",
    candidate_id: str = "",
) -> DetectionScore:
    """Score one candidate: minus the mean of its signature distances.

    Falls back to minus the specialization distance alone when both sides
    carry no co-activation mass (the collaboration signal is undefined).
    """
    dist = signature_distance(teacher_sig, student_sig, mode=mode)
    if dist.d_collab is None:
        score = -dist.d_spec
    else:
        score = -0.5 * (dist.d_spec + dist.d_collab)
    return DetectionScore(
        score=score,
        d_spec=dist.d_spec,
        d_collab=dist.d_collab,
        candidate_id=candidate_id,
        distance=dist,
    )


def detect_pair(
    teacher_sig: SignatureBundle,
    candidate_1_sig: SignatureBundle,
    candidate_2_sig: SignatureBundle,
    mode: str = "auto",
    candidate_ids: tuple[str, str] = ("cand1", "cand2"),
) -> PairVerdict:
    """Pick the candidate whose routing signatures sit closer to the teacher.

    Near-equal scores (within 1e-12) are flagged as a tie and resolved
    deterministically in favor of candidate 1.
    """
    s1 = score_candidate(teacher_sig, candidate_1_sig, mode=mode, candidate_id=candidate_ids[0])
    s2 = score_candidate(teacher_sig, candidate_2_sig, mode=mode, candidate_id=candidate_ids[1])
    gap = s1.score - s2.score
    if abs(gap) < TIE_EPSILON:
        return PairVerdict(predicted_index=1, margin=abs(gap), tie=True, scores=(s1, s2))
    predicted = 1 if gap > 0 else 2
    return PairVerdict(predicted_index=predicted, margin=abs(gap), tie=False, scores=(s1, s2))


def run_benchmark(
    teacher_traces: RoutingTraceSet,
    pairs: Mapping[str, tuple[RoutingTraceSet, RoutingTraceSet]],
    layer_policy: LayerPolicy = "last",
    mode: str = "auto",
) -> BenchmarkReport:
    """Evaluate per-domain candidate pairs against one teacher.

    ``pairs`` maps a domain name to (distilled candidate traces, scratch
    candidate traces). Signatures are computed once per model; each pair
    yields one verdict, and accuracy is the fraction of domains whose
    distilled member was chosen. Shape or co-activation-mass mismatches
    propagate as errors rather than being scored asymmetrically.
    """
    if not pairs:
        raise DetectorError("benchmark needs at least one candidate pair")
    teacher_sig = signature_bundle(teacher_traces, layer_policy)
    rows = []
    for domain, pair in pairs.items():
        if len(pair) != 2:
            raise DetectorError(f"domain {domain!r}: expected (kd, scratch) traces, got {len(pair)}")
        kd_traces, scratch_traces = pair
        kd_sig = signature_bundle(kd_traces, layer_policy)
        scratch_sig = signature_bundle(scratch_traces, layer_policy)
        verdict = detect_pair(
            teacher_sig, kd_sig, scratch_sig, mode=mode, candidate_ids=("kd", "scratch")
        )
        s_kd, s_scratch = verdict.scores
        rows.append(
            BenchmarkRow(
                domain=domain,
                d_spec_kd=s_kd.d_spec,
                d_spec_scratch=s_scratch.d_spec,
                d_collab_kd=s_kd.d_collab,
                d_collab_scratch=s_scratch.d_collab,
                margin=s_kd.score - s_scratch.score,
                verdict="kd" if verdict.predicted_index == 1 else "scratch",
                tie=verdict.tie,
            )
        )
    return BenchmarkReport(rows=tuple(rows), layer_policy=str(layer_policy), mode=mode)
