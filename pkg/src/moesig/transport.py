"""Permutation-invariant Wasserstein-1 distances between routing signatures.

Expert indices are arbitrary labels, so signatures are compared after
minimizing over expert relabelings. Two matching strategies are provided:

* ``exact-brute-force``: enumerate all permutations (feasible for small
  expert counts); this is the ground-truth minimum.
* ``hungarian-heuristic``: solve a linear assignment on a surrogate
  per-expert cost matrix, then evaluate the true objective at the matched
  permutation. The surrogate is needed because the true objective couples
  experts through the positional CDF and is not itself a linear assignment
  problem; the result is an upper bound on the exact minimum.

``auto`` mode picks exact enumeration up to 8 experts (40320 permutations)
and the heuristic above that.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from moesig.errors import TransportError
from moesig.signatures import CollaborationMatrix, SignatureBundle, SpecializationProfile

AUTO_EXACT_MAX_EXPERTS = 8
EXACT_ENUM_CAP = 10
MASS_GUARD = 1e-12
NORMALIZATION_TOL = 1e-9

METHOD_EXACT = "exact-brute-force"
METHOD_HEURISTIC = "hungarian-heuristic"


@dataclass(frozen=True)
class Permutation:
    """Bijective relabeling of expert indices 0..E-1."""

    mapping: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "mapping", tuple(int(i) for i in self.mapping))
        e = len(self.mapping)
        if sorted(self.mapping) != list(range(e)):
            raise TransportError(f"mapping {self.mapping} is not a permutation of 0..{e - 1}")

    @classmethod
    def identity(cls, size: int) -> "Permutation":
        return cls(tuple(range(size)))

    def __len__(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.mapping)
        for i, j in enumerate(self.mapping):
            inv[j] = i
        return Permutation(tuple(inv))

    def apply_rows(self, matrix: np.ndarray) -> np.ndarray:
        """Row i of the result is row mapping[i] of the input."""
        return np.asarray(matrix)[list(self.mapping)]

    def conjugate(self, matrix: np.ndarray) -> np.ndarray:
        """Apply the relabeling to both axes of a square matrix."""
        idx = list(self.mapping)
        return np.asarray(matrix)[np.ix_(idx, idx)]


class TransportResult(NamedTuple):
    """A matched distance: its value, the permutation used, and how it was found."""

    value: float
    permutation: Permutation
    method: str


@dataclass(frozen=True)
class SignatureDistance:
    """Specialization and collaboration distances for one signature pair."""

    d_spec: float
    d_collab: float | None
    spec_permutation: Permutation
    collab_permutation: Permutation | None
    method: str

    def __post_init__(self) -> None:
        if self.d_spec < 0 or (self.d_collab is not None and self.d_collab < 0):
            raise TransportError("signature distances must be nonnegative")


def wasserstein1_discrete(p, q, positions) -> float:
    """W1 between two discrete distributions on a common increasing grid.

    Equals the integral of the absolute CDF difference: the sum over
    consecutive position gaps of |CDF_p - CDF_q| times the gap width.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if p.shape != q.shape or p.shape != positions.shape or p.ndim != 1:
        raise TransportError(
            f"length mismatch: p{p.shape}, q{q.shape}, positions{positions.shape}"
        )
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(positions))):
        raise TransportError("inputs must be finite")
    if p.size > 1 and not np.all(np.diff(positions) > 0):
        raise TransportError("positions must be strictly increasing")
    for name, vec in (("p", p), ("q", q)):
        total = float(vec.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise TransportError(f"{name} sums to {total!r}, not 1 within {NORMALIZATION_TOL}")
    cdf_gap = np.cumsum(p - q)[:-1]
    return float(np.abs(cdf_gap) @ np.diff(positions))


def hungarian(cost: np.ndarray) -> tuple[Permutation, float]:
    """Minimum-cost assignment: permutation minimizing sum_i cost[i, perm(i)].

    Backed by a standard O(E^3) linear-assignment solver; the total cost is
    re-summed in row order so it is reproducible bit-for-bit.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise TransportError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise TransportError("cost matrix contains non-finite entries")
    row_ind, col_ind = linear_sum_assignment(cost)
    sigma = np.empty(cost.shape[0], dtype=np.intp)
    sigma[row_ind] = col_ind
    total = float(cost[np.arange(cost.shape[0]), sigma].sum())
    return Permutation(tuple(sigma)), total


@lru_cache(maxsize=8)
def _all_permutations(size: int) -> np.ndarray:
    """All permutations of 0..size-1 in lexicographic order. Cached for small sizes."""
    return np.array(list(itertools.permutations(range(size))), dtype=np.intp)


def _permutation_chunks(size: int, chunk: int) -> Iterator[np.ndarray]:
    if size <= AUTO_EXACT_MAX_EXPERTS:
        full = _all_permutations(size)
        for start in range(0, len(full), chunk):
            yield full[start : start + chunk]
        return
    it = itertools.permutations(range(size))
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.intp)


def _spec_objectives(perms: np.ndarray, teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
    """Mean-over-domain unit-grid W1 for each row-gather permutation in ``perms``."""
    diff = teacher[perms] - student[None, :, :]  # (C, E, D)
    cdf = np.cumsum(diff, axis=1)[:, :-1, :]
    return np.abs(cdf).sum(axis=1).mean(axis=1)


def _collab_objectives(perms: np.ndarray, teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
    """Row-aligned sparse W1 objective for each conjugating permutation in ``perms``.

    For every row the two matrices are restricted to the union of their
    nonzero columns, renormalized (uniform fallback for an all-zero row),
    and compared by W1 on the reindexed positions 0..m-1 in ascending
    column order. Rows with empty union support contribute zero.
    """
    num = perms.shape[0]
    e = teacher.shape[0]
    bp = teacher[perms[:, :, None], perms[:, None, :]]  # (C, E, E)
    mask = (bp > 0) | (student[None, :, :] > 0)
    diag = np.arange(e)
    mask[:, diag, diag] = False

    t = np.where(mask, bp, 0.0)
    s = np.where(mask, np.broadcast_to(student, (num, e, e)), 0.0)
    cnt = mask.sum(axis=2)
    safe_cnt = np.maximum(cnt, 1)[..., None]
    uniform = mask / safe_cnt

    def _normalize(vec: np.ndarray) -> np.ndarray:
        mass = vec.sum(axis=2, keepdims=True)
        low = mass < MASS_GUARD
        return np.where(low, uniform, vec / np.where(low, 1.0, mass))

    diff = _normalize(t) - _normalize(s)
    cdf = np.cumsum(diff, axis=2)
    abs_cdf = np.abs(cdf)
    totals = (abs_cdf * mask).sum(axis=2)
    # Drop the final support position: W1 integrates over the m-1 unit gaps
    # between the m reindexed positions, not past the last one.
    last = e - 1 - np.argmax(mask[:, :, ::-1], axis=2)
    at_last = np.take_along_axis(abs_cdf, last[..., None], axis=2)[..., 0]
    row_w1 = totals - at_last * (cnt > 0)
    return row_w1.sum(axis=1) / e


def _minimize_over_permutations(objectives, size: int, chunk_rows: int) -> tuple[float, Permutation]:
    """Scan all permutations in lexicographic order; first minimum wins ties."""
    best_value = np.inf
    best_perm: np.ndarray | None = None
    for perms in _permutation_chunks(size, chunk_rows):
        values = objectives(perms)
        idx = int(np.argmin(values))
        if values[idx] < best_value:
            best_value = float(values[idx])
            best_perm = perms[idx]
    assert best_perm is not None
    return best_value, Permutation(tuple(int(i) for i in best_perm))


def _resolve_mode(mode: str, num_experts: int) -> str:
    if mode == "auto":
        return METHOD_EXACT if num_experts <= AUTO_EXACT_MAX_EXPERTS else METHOD_HEURISTIC
    if mode == "exact":
        if num_experts > EXACT_ENUM_CAP:
            raise TransportError(
                f"exact enumeration is capped at {EXACT_ENUM_CAP} experts "
                f"({num_experts}! permutations would be required)"
            )
        return METHOD_EXACT
    if mode == "heuristic":
        return METHOD_HEURISTIC
    raise TransportError(f"unknown mode {mode!r} (expected auto, exact, or heuristic)")


def heuristic_cost_matrix(kind: str, teacher, student) -> np.ndarray:
    """Per-expert surrogate assignment costs for the Hungarian matcher.

    ``spec``: mean absolute difference between expert rows of the two
    profiles. ``collab``: L1 distance between descending-sorted
    collaboration rows, which compares co-activation strength spectra
    without committing to any column labeling.
    """
    t = np.asarray(getattr(teacher, "matrix", teacher), dtype=np.float64)
    s = np.asarray(getattr(student, "matrix", student), dtype=np.float64)
    if t.shape != s.shape:
        raise TransportError(f"signature shapes differ: {t.shape} vs {s.shape}")
    if kind == "spec":
        return np.abs(t[:, None, :] - s[None, :, :]).mean(axis=2)
    if kind == "collab":
        t_sorted = -np.sort(-t, axis=1)
        s_sorted = -np.sort(-s, axis=1)
        return np.abs(t_sorted[:, None, :] - s_sorted[None, :, :]).sum(axis=2)
    raise TransportError(f"unknown cost kind {kind!r} (expected spec or collab)")


def _matched_gather_map(cost: np.ndarray) -> Permutation:
    """Assignment solution converted to a row-gather map.

    The assignment pairs teacher expert i with student expert sigma(i); the
    gather map pi places teacher row pi[j] at student slot j, so pi is the
    inverse of sigma.
    """
    sigma, _ = hungarian(cost)
    return sigma.inverse()


def _check_profiles(teacher: SpecializationProfile, student: SpecializationProfile) -> np.ndarray:
    """Validate a profile pair; returns student matrix with columns aligned to teacher's."""
    if teacher.num_experts != student.num_experts:
        raise TransportError(
            f"expert count mismatch: {teacher.num_experts} vs {student.num_experts}"
        )
    if set(teacher.domain_labels) != set(student.domain_labels):
        raise TransportError(
            f"domain sets differ: {teacher.domain_labels} vs {student.domain_labels}"
        )
    for prof, name in ((teacher, "teacher"), (student, "student")):
        sums = prof.matrix.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
            raise TransportError(f"{name} profile columns are not normalized: sums {sums}")
    if teacher.domain_labels == student.domain_labels:
        return student.matrix
    cols = [student.domain_labels.index(lab) for lab in teacher.domain_labels]
    return student.matrix[:, cols]


def spec_distance(
    teacher: SpecializationProfile,
    student: SpecializationProfile,
    mode: str = "auto",
) -> TransportResult:
    """Permutation-invariant specialization distance between two profiles.

    Minimizes the mean over domains of the unit-grid W1 between the
    relabeled teacher column and the student column. Exact mode scans every
    permutation; heuristic mode evaluates the objective at the Hungarian
    match of :func:`heuristic_cost_matrix`, giving an upper bound.
    """
    s_matrix = _check_profiles(teacher, student)
    t_matrix = teacher.matrix
    e = teacher.num_experts
    method = _resolve_mode(mode, e)
    if method == METHOD_EXACT:
        chunk = max(1, 4_000_000 // max(1, e * teacher.num_domains))
        value, perm = _minimize_over_permutations(
            lambda perms: _spec_objectives(perms, t_matrix, s_matrix), e, chunk
        )
    else:
        perm = _matched_gather_map(heuristic_cost_matrix("spec", t_matrix, s_matrix))
        value = float(
            _spec_objectives(np.asarray([perm.mapping], dtype=np.intp), t_matrix, s_matrix)[0]
        )
    return TransportResult(value=value, permutation=perm, method=method)


def collab_distance(
    teacher: CollaborationMatrix,
    student: CollaborationMatrix,
    mode: str = "auto",
) -> TransportResult:
    """Permutation-invariant collaboration distance between two matrices.

    The teacher matrix is conjugated by the candidate permutation (rows and
    columns relabeled together) and compared row-by-row against the student
    using the sparse union-support W1 described in :func:`_collab_objectives`.
    """
    if teacher.num_experts != student.num_experts:
        raise TransportError(
            f"expert count mismatch: {teacher.num_experts} vs {student.num_experts}"
        )
    if teacher.zero_mass != student.zero_mass:
        raise TransportError(
            "co-activation mass mismatch: one matrix is zero-mass flagged and the other is not"
        )
    e = teacher.num_experts
    method = _resolve_mode(mode, e)
    if teacher.zero_mass:
        return TransportResult(value=0.0, permutation=Permutation.identity(e), method=method)
    if method == METHOD_EXACT:
        chunk = max(1, 2_000_000 // max(1, e * e))
        value, perm = _minimize_over_permutations(
            lambda perms: _collab_objectives(perms, teacher.matrix, student.matrix), e, chunk
        )
    else:
        perm = _matched_gather_map(heuristic_cost_matrix("collab", teacher.matrix, student.matrix))
        value = float(
            _collab_objectives(
                np.asarray([perm.mapping], dtype=np.intp), teacher.matrix, student.matrix
            )[0]
        )
    return TransportResult(value=value, permutation=perm, method=method)


def signature_distance(
    teacher: SignatureBundle,
    student: SignatureBundle,
    mode: str = "auto",
) -> SignatureDistance:
    """Both signature distances for a teacher/student bundle pair.

    When both collaboration matrices are zero-mass flagged the collaboration
    distance is reported absent and scoring falls back to specialization
    alone; a one-sided flag is an error because the scores would not be
    comparable.
    """
    d_spec = spec_distance(teacher.spec, student.spec, mode=mode)
    if teacher.collab.zero_mass and student.collab.zero_mass:
        return SignatureDistance(
            d_spec=d_spec.value,
            d_collab=None,
            spec_permutation=d_spec.permutation,
            collab_permutation=None,
            method=d_spec.method,
        )
    d_collab = collab_distance(teacher.collab, student.collab, mode=mode)
    return SignatureDistance(
        d_spec=d_spec.value,
        d_collab=d_collab.value,
        spec_permutation=d_spec.permutation,
        collab_permutation=d_collab.permutation,
        method=d_spec.method,
    )
