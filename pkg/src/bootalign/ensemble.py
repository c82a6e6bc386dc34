"""Reference database of legitimate boots, bagging and score-vector pooling."""

from __future__ import annotations

import json
import math
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .aligner import DEFAULT_SCHEME, ScoringScheme, score_only
from .syscall_trace import Alphabet, BootSequence, read_sequence, write_sequence

DEFAULT_CAPACITY = 150
DEFAULT_BAGS = 25
DEFAULT_BAG_SIZE = 20
DEFAULT_EXHAUSTIVE_CAP = 5000
BASELINE_SCOPES = ("bag", "store")


class UnknownAppError(KeyError):
    pass


class PoisoningError(ValueError):
    """Raised when an unverified or non-legitimate sequence would enter the store."""


@dataclass
class StoredSample:
    sequence: BootSequence
    inserted: int


class ReferenceStore:
    """Capacity-bounded FIFO of verified legitimate boots per application.

    ``inserted`` is a logical clock, so saved stores are reproducible.
    """

    def __init__(self, alphabet: Alphabet, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.alphabet = alphabet
        self.capacity = capacity
        self._apps: dict[str, deque[StoredSample]] = {}
        self._clock = 0

    def apps(self) -> list[str]:
        return sorted(self._apps)

    def __contains__(self, app_id: str) -> bool:
        return bool(self._apps.get(app_id))

    def samples(self, app_id: str) -> list[BootSequence]:
        if app_id not in self:
            raise UnknownAppError(app_id)
        return [s.sequence for s in self._apps[app_id]]

    def entries(self, app_id: str) -> list[StoredSample]:
        return list(self._apps.get(app_id, ()))

    def size(self, app_id: str) -> int:
        return len(self._apps.get(app_id, ()))

    def stats(self) -> dict:
        return {"apps": len(self._apps),
                "samples": {a: len(q) for a, q in sorted(self._apps.items())},
                "capacity": self.capacity}

    def add(self, app_id: str, seq: BootSequence, verified: bool = False) -> None:
        if seq.label != "legitimate":
            raise PoisoningError(f"only legitimate sequences are admitted (got {seq.label!r})")
        if not verified:
            raise PoisoningError("sequence must be verified clean before it can serve as reference")
        if not seq.preprocessed:
            raise ValueError("reference sequences must be preprocessed")
        if seq.alphabet is not None and seq.alphabet != self.alphabet:
            raise ValueError("sequence alphabet differs from the store alphabet")
        q = self._apps.setdefault(app_id, deque())
        q.append(StoredSample(seq, self._clock))
        self._clock += 1
        while len(q) > self.capacity:
            q.popleft()

    # -- persistence -------------------------------------------------------

    def save(self, root: str | Path) -> None:
        """One directory per app with sequence files and an ordering manifest."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        self.alphabet.save(root / "alphabet.txt")
        for app_id, q in sorted(self._apps.items()):
            d = root / app_id
            d.mkdir(exist_ok=True)
            files = []
            for st in q:
                stem = st.sequence.sample_id or f"s{st.inserted:06d}"
                files.append({"file": f"{stem}.seq", "inserted": st.inserted})
                write_sequence(st.sequence, d / f"{stem}.seq")
            manifest = {"app_id": app_id, "capacity": self.capacity, "files": files}
            (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, root: str | Path, capacity: int | None = None) -> "ReferenceStore":
        root = Path(root)
        alphabet = Alphabet.load(root / "alphabet.txt")
        manifests = sorted(root.glob("*/manifest.json"))
        cap = capacity
        if cap is None:
            caps = [json.loads(m.read_text())["capacity"] for m in manifests]
            cap = max(caps) if caps else DEFAULT_CAPACITY
        store = cls(alphabet, cap)
        for m in manifests:
            manifest = json.loads(m.read_text())
            q = store._apps.setdefault(manifest["app_id"], deque())
            for entry in manifest["files"]:
                seq = read_sequence(m.parent / entry["file"], alphabet)
                seq = seq.with_symbols(seq.symbols, preprocessed=True)
                q.append(StoredSample(seq, int(entry["inserted"])))
                store._clock = max(store._clock, int(entry["inserted"]) + 1)
            while len(q) > cap:
                q.popleft()
        return store


def update_reference_store(store: ReferenceStore, app_id: str, new_seq: BootSequence,
                           verified: bool = False) -> ReferenceStore:
    store.add(app_id, new_seq, verified=verified)
    return store


@dataclass(frozen=True)
class ScoreVector:
    values: tuple[float, ...]
    sorted: bool = False

    def __post_init__(self):
        if self.sorted and any(a > b for a, b in zip(self.values, self.values[1:])):
            raise ValueError("vector marked sorted is not non-decreasing")

    def __len__(self) -> int:
        return len(self.values)

    def as_sorted(self) -> "ScoreVector":
        return ScoreVector(tuple(sorted(self.values)), True)


@dataclass(frozen=True)
class BaggingPlan:
    m: int = DEFAULT_BAGS
    n: int = DEFAULT_BAG_SIZE
    seed: int = 0
    mode: str = "bootstrap"
    exhaustive_cap: int = DEFAULT_EXHAUSTIVE_CAP

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("bag count m and bag size n must be >= 1")
        if self.mode not in ("bootstrap", "exhaustive"):
            raise ValueError(f"unknown bagging mode {self.mode!r}")

    def rng(self, app_id: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(app_id.encode())])


def bag_indices(size: int, plan: BaggingPlan, app_id: str = "") -> list[tuple[int, ...]]:
    """Store positions of every bag."""
    if size < 1:
        raise ValueError("no reference samples to bag")
    if plan.mode == "exhaustive":
        if plan.n > size:
            raise ValueError(f"bag size {plan.n} exceeds store size {size}")
        count = math.comb(size, plan.n)
        if count > plan.exhaustive_cap:
            raise ValueError(f"{count} combinations exceed the cap of {plan.exhaustive_cap}; "
                             "use bootstrap mode")
        return list(combinations(range(size), plan.n))
    draws = plan.rng(app_id).integers(0, size, size=(plan.m, plan.n))
    return [tuple(int(v) for v in row) for row in draws]


def bag_reference_sets(store: ReferenceStore, app_id: str,
                       plan: BaggingPlan) -> list[list[BootSequence]]:
    samples = store.samples(app_id)
    return [[samples[i] for i in bag] for bag in bag_indices(len(samples), plan, app_id)]


class PairScorer:
    """Memoised ``score_only`` keyed on sequence content.

    Bags drawn with replacement repeat references; each distinct
    (test, reference) pair is aligned once.
    """

    def __init__(self, scheme: ScoringScheme = DEFAULT_SCHEME, max_workers: int | None = None):
        self.scheme = scheme
        self.max_workers = max_workers
        self._memo: dict[tuple[str, str], int] = {}

    def __call__(self, test: BootSequence, ref: BootSequence) -> int:
        key = (test.fingerprint, ref.fingerprint)
        v = self._memo.get(key)
        if v is None:
            v = self._memo[key] = score_only(test, ref, self.scheme)
        return v

    def prefetch(self, pairs: Iterable[tuple[BootSequence, BootSequence]]) -> None:
        todo = {}
        for t, r in pairs:
            key = (t.fingerprint, r.fingerprint)
            if key not in self._memo:
                todo[key] = (t, r)
        if not todo:
            return
        if self.max_workers and self.max_workers > 1:
            with ThreadPoolExecutor(self.max_workers) as ex:
                scores = list(ex.map(lambda tr: score_only(tr[0], tr[1], self.scheme),
                                     todo.values()))
        else:
            scores = [score_only(t, r, self.scheme) for t, r in todo.values()]
        self._memo.update(zip(todo, scores))


def score_vector(test: BootSequence, subset: Sequence[BootSequence],
                 scheme: ScoringScheme = DEFAULT_SCHEME,
                 scorer: PairScorer | None = None) -> ScoreVector:
    if not subset:
        raise ValueError("reference subset is empty")
    scorer = scorer or PairScorer(scheme)
    return ScoreVector(tuple(float(scorer(test, ref)) for ref in subset))


def aggregate(vectors: Sequence[ScoreVector]) -> ScoreVector:
    """Sort each vector ascending, then average position-wise."""
    if not vectors:
        raise ValueError("no score vectors to aggregate")
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise ValueError("score vectors differ in length")
    mat = np.sort(np.array([v.values for v in vectors], dtype=float), axis=1)
    # fixed summation order keeps results independent of how bags were scheduled
    means = np.sum(mat, axis=0) / len(vectors)
    return ScoreVector(tuple(float(v) for v in means), sorted=True)


def _member_means(members: Sequence[BootSequence], peers_of, scorer: PairScorer) -> ScoreVector:
    out = []
    for k, member in enumerate(members):
        peers = peers_of(k)
        if not peers:
            raise ValueError("bag member has no distinct peer to align against")
        out.append(sum(scorer(member, p) for p in peers) / len(peers))
    return ScoreVector(tuple(out))


def reference_baseline(subsets: Sequence[Sequence[BootSequence]],
                       scheme: ScoringScheme = DEFAULT_SCHEME,
                       scorer: PairScorer | None = None,
                       scope: str = "bag",
                       store_samples: Sequence[BootSequence] | None = None) -> ScoreVector:
    """Legitimate-vs-legitimate vector paired with a test's aggregated scores.

    Each bag member is aligned (as test) against the other members of its
    bag and the mean is kept, giving one length-n vector per bag; bags are
    then pooled like :func:`aggregate`. Repeated draws of the same stored
    entry (bootstrap bags contain them) are not peers of each other; peers
    are told apart by object identity, not content. With
    ``scope="store"`` the peers are every other sample in ``store_samples``.
    """
    if scope not in BASELINE_SCOPES:
        raise ValueError(f"scope must be one of {BASELINE_SCOPES}")
    scorer = scorer or PairScorer(scheme)
    vectors = []
    for bag in subsets:
        if len(bag) < 2:
            raise ValueError("baseline needs bags of at least two members")
        if scope == "bag":
            def peers_of(k, bag=bag):
                return [p for p in bag if p is not bag[k]]
        else:
            if not store_samples:
                raise ValueError("store scope needs the store samples")

            def peers_of(k, bag=bag):
                return [p for p in store_samples if p is not bag[k]]
        vectors.append(_member_means(bag, peers_of, scorer))
    return aggregate(vectors)


@dataclass
class BaggedReference:
    """Bags and baseline for one application, reused across many tests."""

    app_id: str
    bags: list[list[BootSequence]]
    baseline: ScoreVector
    scorer: PairScorer = field(repr=False)

    def test_vector(self, test: BootSequence) -> ScoreVector:
        # per-test memo: the shared one holds only reference pairs, so it stays
        # bounded and safe to read from many threads
        scorer = PairScorer(self.scorer.scheme, self.scorer.max_workers)
        scorer.prefetch((test, r) for bag in self.bags for r in bag)
        return aggregate([score_vector(test, bag, scorer=scorer) for bag in self.bags])


def build_reference(samples: Sequence[BootSequence], plan: BaggingPlan,
                    scheme: ScoringScheme = DEFAULT_SCHEME, app_id: str = "",
                    scope: str = "bag", scorer: PairScorer | None = None) -> BaggedReference:
    scorer = scorer or PairScorer(scheme)
    bags = [[samples[i] for i in bag] for bag in bag_indices(len(samples), plan, app_id)]
    peers = samples if scope == "store" else None
    scorer.prefetch((a, b) for bag in bags for a in bag for b in (peers or bag) if a is not b)
    baseline = reference_baseline(bags, scheme, scorer, scope, samples)
    return BaggedReference(app_id, bags, baseline, scorer)
