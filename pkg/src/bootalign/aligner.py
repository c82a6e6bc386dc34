"""Global (Needleman-Wunsch) alignment of a test sequence against a reference.

The test sequence indexes the rows of the score matrix F and the reference
indexes the columns. Gap penalties are asymmetric:

* ``F(i-1, j) + gap_in_reference`` -- a test symbol is set against a gap
  inserted into the reference;
* ``F(i, j-1) + gap_in_test`` -- a reference symbol is set against a gap
  inserted into the test.

Base cases are ``F(0, j) = gap_in_test * j`` and ``F(i, 0) = gap_in_reference * i``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numba
import numpy as np

from .syscall_trace import Alphabet, AlphabetError, BootSequence

GAP = None
DEFAULT_CELL_BUDGET = 64_000_000
_INT_LIMIT = 2 ** 62


@dataclass(frozen=True)
class ScoringScheme:
    """Per-column scores: match/mismatch plus the two gap penalties.

    ``pair_scores`` optionally overrides the match/mismatch value for
    specific (symmetric) pairs of syscall names; it is resolved against the
    alphabet of the sequences being aligned.
    """

    match_score: int = 1
    mismatch_score: int = 0
    gap_in_test: int = -2
    gap_in_reference: int = -3
    pair_scores: Mapping[tuple[str, str], int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("match_score", "mismatch_score", "gap_in_test", "gap_in_reference"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        if self.gap_in_test > 0 or self.gap_in_reference > 0:
            raise ValueError("gap penalties must be <= 0")
        if self.match_score <= self.mismatch_score:
            raise ValueError("match_score must exceed mismatch_score")

    def swapped(self) -> "ScoringScheme":
        """The same scheme with the roles of test and reference exchanged."""
        return ScoringScheme(self.match_score, self.mismatch_score,
                             self.gap_in_reference, self.gap_in_test,
                             dict(self.pair_scores))

    def max_abs(self) -> int:
        vals = [self.match_score, self.mismatch_score, self.gap_in_test,
                self.gap_in_reference, *self.pair_scores.values()]
        return max(abs(v) for v in vals)

    def pair(self, a: int, b: int, alphabet: Alphabet | None = None) -> int:
        if self.pair_scores and alphabet is not None:
            na, nb = alphabet.name(a), alphabet.name(b)
            v = self.pair_scores.get((na, nb), self.pair_scores.get((nb, na)))
            if v is not None:
                return v
        return self.match_score if a == b else self.mismatch_score

    def table(self, size: int, alphabet: Alphabet | None = None) -> np.ndarray:
        """Dense ``size x size`` substitution table for the DP kernels."""
        t = np.full((size, size), self.mismatch_score, dtype=np.int64)
        np.fill_diagonal(t, self.match_score)
        if self.pair_scores:
            if alphabet is None:
                raise AlphabetError("scheme has per-pair scores; an alphabet is required")
            for (na, nb), v in self.pair_scores.items():
                ia, ib = alphabet.index.get(na), alphabet.index.get(nb)
                if ia is not None and ib is not None and ia < size and ib < size:
                    t[ia, ib] = t[ib, ia] = v
        return t

    def as_dict(self) -> dict:
        d = {"match_score": self.match_score, "mismatch_score": self.mismatch_score,
             "gap_in_test": self.gap_in_test, "gap_in_reference": self.gap_in_reference}
        if self.pair_scores:
            d["pair_scores"] = [[a, b, v] for (a, b), v in sorted(self.pair_scores.items())]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoringScheme":
        pairs = {(a, b): int(v) for a, b, v in d.get("pair_scores", [])}
        return cls(int(d.get("match_score", 1)), int(d.get("mismatch_score", 0)),
                   int(d.get("gap_in_test", -2)), int(d.get("gap_in_reference", -3)), pairs)


DEFAULT_SCHEME = ScoringScheme()

# Worked six-symbol example: uniform gap -8, mismatch -2, match +6, with the
# pair scores recovered from the published score matrix for symbols A..F.
WORKED_EXAMPLE_SCHEME = ScoringScheme(
    match_score=6, mismatch_score=-2, gap_in_test=-8, gap_in_reference=-8,
    pair_scores={
        ("A", "E"): -1, ("B", "B"): 5, ("B", "C"): -3, ("B", "E"): -1,
        ("B", "F"): 0, ("C", "C"): 15, ("C", "E"): -3, ("C", "F"): -3,
        ("D", "D"): 10, ("D", "E"): 0, ("E", "F"): -3,
    },
)

# Unit-match heuristic: +1 per match, nothing else counts.
UNIT_MATCH_SCHEME = ScoringScheme(1, 0, 0, 0)

PRESETS = {
    "default": DEFAULT_SCHEME,
    "worked-example": WORKED_EXAMPLE_SCHEME,
    "unit-match": UNIT_MATCH_SCHEME,
}


def get_scheme(name_or_scheme) -> ScoringScheme:
    if isinstance(name_or_scheme, ScoringScheme):
        return name_or_scheme
    if isinstance(name_or_scheme, Mapping):
        return ScoringScheme.from_dict(name_or_scheme)
    try:
        return PRESETS[name_or_scheme]
    except KeyError:
        raise ValueError(f"unknown scheme preset {name_or_scheme!r}; "
                         f"choose from {sorted(PRESETS)}") from None


@dataclass
class AlignmentResult:
    score: int
    aligned_test: Optional[list] = None
    aligned_reference: Optional[list] = None
    matrix: Optional[np.ndarray] = field(default=None, repr=False)


class MemoryBudgetError(ValueError):
    def __init__(self, required: int, available: int):
        super().__init__(f"score matrix needs {required} cells, budget is {available}")
        self.required = required
        self.available = available


# -- kernels -------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _last_row(rows, cols, table, up_gap, left_gap, prev, cur):
    n = cols.shape[0]
    for j in range(n + 1):
        prev[j] = left_gap * j
    for i in range(1, rows.shape[0] + 1):
        trow = table[rows[i - 1]]
        left = up_gap * i
        cur[0] = left
        for j in range(1, n + 1):
            best = prev[j - 1] + trow[cols[j - 1]]
            up = prev[j] + up_gap
            if up > best:
                best = up
            left += left_gap
            if left > best:
                best = left
            cur[j] = best
            left = best
        prev, cur = cur, prev
    return prev[n]


@numba.njit(cache=True, nogil=True)
def _full_matrix(rows, cols, table, up_gap, left_gap):
    m = rows.shape[0]
    n = cols.shape[0]
    F = np.empty((m + 1, n + 1), dtype=np.int64)
    for j in range(n + 1):
        F[0, j] = left_gap * j
    for i in range(1, m + 1):
        F[i, 0] = up_gap * i
        trow = table[rows[i - 1]]
        for j in range(1, n + 1):
            best = F[i - 1, j - 1] + trow[cols[j - 1]]
            up = F[i - 1, j] + up_gap
            if up > best:
                best = up
            left = F[i, j - 1] + left_gap
            if left > best:
                best = left
            F[i, j] = best
    return F


# -- helpers -------------------------------------------------------------------

def _prepare(test, reference, scheme: ScoringScheme):
    alphabet = None
    if isinstance(test, BootSequence) and isinstance(reference, BootSequence):
        ta, ra = test.alphabet, reference.alphabet
        if ta is not None and ra is not None and ta != ra:
            raise AlphabetError("test and reference use different alphabets "
                                f"({ta.fingerprint} vs {ra.fingerprint})")
        alphabet = ta or ra
    elif isinstance(test, BootSequence):
        alphabet = test.alphabet
    elif isinstance(reference, BootSequence):
        alphabet = reference.alphabet
    a = test.array if isinstance(test, BootSequence) else np.asarray(test, dtype=np.int64)
    b = reference.array if isinstance(reference, BootSequence) else np.asarray(reference, dtype=np.int64)
    if alphabet is not None:
        size = alphabet.size
    else:
        size = int(max(a.max(initial=0), b.max(initial=0))) + 1
    if (a.size and a.min() < 0) or (b.size and b.min() < 0):
        raise ValueError("symbols must be non-negative integers")
    if (len(a) + len(b) + 1) * scheme.max_abs() >= _INT_LIMIT:
        raise OverflowError("alignment score could overflow 64-bit integers")
    return a, b, scheme.table(size, alphabet), alphabet


def score_matrix(test, reference, scheme: ScoringScheme = DEFAULT_SCHEME,
                 cell_budget: int = DEFAULT_CELL_BUDGET) -> np.ndarray:
    """The full ``(m+1) x (n+1)`` matrix F."""
    a, b, table, _ = _prepare(test, reference, scheme)
    cells = (len(a) + 1) * (len(b) + 1)
    if cells > cell_budget:
        raise MemoryBudgetError(cells, cell_budget)
    return _full_matrix(a, b, table, scheme.gap_in_reference, scheme.gap_in_test)


def align(test, reference, scheme: ScoringScheme = DEFAULT_SCHEME,
          cell_budget: int = DEFAULT_CELL_BUDGET, keep_matrix: bool = False) -> AlignmentResult:
    """Optimal global alignment with traceback from F(m, n).

    Ties in the traceback prefer the diagonal, then the up move (test symbol
    against a gap), then the left move. Gaps are ``None`` in the aligned lists.
    """
    a, b, table, _ = _prepare(test, reference, scheme)
    cells = (len(a) + 1) * (len(b) + 1)
    if cells > cell_budget:
        raise MemoryBudgetError(cells, cell_budget)
    F = _full_matrix(a, b, table, scheme.gap_in_reference, scheme.gap_in_test)

    i, j = len(a), len(b)
    out_t, out_r = [], []
    while i > 0 or j > 0:
        f = F[i, j]
        if i > 0 and j > 0 and f == F[i - 1, j - 1] + table[a[i - 1], b[j - 1]]:
            out_t.append(int(a[i - 1]))
            out_r.append(int(b[j - 1]))
            i -= 1
            j -= 1
        elif i > 0 and f == F[i - 1, j] + scheme.gap_in_reference:
            out_t.append(int(a[i - 1]))
            out_r.append(GAP)
            i -= 1
        else:
            out_t.append(GAP)
            out_r.append(int(b[j - 1]))
            j -= 1
    out_t.reverse()
    out_r.reverse()
    return AlignmentResult(int(F[-1, -1]), out_t, out_r, F if keep_matrix else None)


def score_only(test, reference, scheme: ScoringScheme = DEFAULT_SCHEME) -> int:
    """F(m, n) using two rolling rows sized by the shorter sequence."""
    a, b, table, _ = _prepare(test, reference, scheme)
    if len(b) <= len(a):
        rows, cols, up, left = a, b, scheme.gap_in_reference, scheme.gap_in_test
    else:
        # transpose: the reference walks the rows, gaps swap roles
        rows, cols, up, left = b, a, scheme.gap_in_test, scheme.gap_in_reference
        table = np.ascontiguousarray(table.T)
    prev = np.empty(len(cols) + 1, dtype=np.int64)
    cur = np.empty(len(cols) + 1, dtype=np.int64)
    return int(_last_row(rows, cols, table, up, left, prev, cur))


def score_only_cells(m: int, n: int) -> int:
    """Number of int64 cells the score-only path allocates for an m x n problem."""
    return 2 * (min(m, n) + 1)


def rescore_alignment(aligned_test: Sequence, aligned_reference: Sequence,
                      scheme: ScoringScheme = DEFAULT_SCHEME,
                      alphabet: Alphabet | None = None) -> int:
    """Sum of per-column scores of an explicit alignment (gaps are ``None``)."""
    if len(aligned_test) != len(aligned_reference):
        raise ValueError("aligned sequences differ in length")
    total = 0
    for col, (x, y) in enumerate(zip(aligned_test, aligned_reference)):
        if x is GAP and y is GAP:
            raise ValueError(f"column {col} has a gap in both sequences")
        if x is GAP:
            total += scheme.gap_in_test
        elif y is GAP:
            total += scheme.gap_in_reference
        else:
            total += scheme.pair(x, y, alphabet)
    return total


def matrix_to_csv(F: np.ndarray, test_labels: Sequence[str], reference_labels: Sequence[str]) -> str:
    """CSV dump of F with symbol labels on the header row and first column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["", "", *reference_labels])
    for i, row in enumerate(F):
        w.writerow([test_labels[i - 1] if i else "", *map(int, row)])
    return buf.getvalue()
