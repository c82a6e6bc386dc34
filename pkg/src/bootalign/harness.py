"""Pipeline driver and evaluation harness.

:class:`Detector` runs the full analysis of one boot sequence against a
reference store. The evaluation helpers measure TPR/FPR on a labelled
corpus: legitimate samples through a three-group cross-validation,
malicious samples one by one against every legitimate sample of their app.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .aligner import DEFAULT_SCHEME, ScoringScheme, get_scheme, score_only
from .decision import ALTERNATIVES, DEFAULT_CONFIDENCE, Verdict, classify, wilcoxon
from .ensemble import (BASELINE_SCOPES, BaggedReference, BaggingPlan, PairScorer,
                       ReferenceStore, ScoreVector, UnknownAppError, build_reference)
from .synth import Corpus
from .syscall_trace import (DEFAULT_MAX_LEN, Alphabet, BootSequence, encode, preprocess,
                            read_sequence)

DEFAULT_CONFIDENCE_GRID = (0.05, 0.03, 0.01, 0.005, 0.002, 0.001, 5e-4, 2e-4, 1e-4,
                           5e-5, 1e-5, 4e-6, 1e-6, 4e-7)
DEFAULT_LENGTH_GRID = (50, 100, 250, 500, 750, 1000, 1500, 2000, 2500)
SWEEP_CONFIDENCE_LENGTH = 1000

# group tested -> (vector name, groups the vector is built from)
CV_SCHEME = {
    "C": ("V1", ("A", "B")),
    "B": ("V2", ("A", "C")),
    "A": ("V3", ("B", "C")),
}
GROUPS = ("A", "B", "C")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


@dataclass(frozen=True)
class Config:
    scheme: ScoringScheme = DEFAULT_SCHEME
    plan: BaggingPlan = BaggingPlan()
    confidence: float = DEFAULT_CONFIDENCE
    max_len: int = DEFAULT_MAX_LEN
    store: str | None = None
    alternative: str = "two-sided"
    baseline_scope: str = "bag"
    continuity: bool = False
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.alternative not in ALTERNATIVES:
            raise ValueError(f"alternative must be one of {ALTERNATIVES}")
        if self.baseline_scope not in BASELINE_SCOPES:
            raise ValueError(f"baseline_scope must be one of {BASELINE_SCOPES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.as_dict(), "plan": asdict(self.plan),
                "confidence": self.confidence, "max_len": self.max_len, "store": self.store,
                "alternative": self.alternative, "baseline_scope": self.baseline_scope,
                "continuity": self.continuity, "workers": self.workers}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Config":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "scheme" in d:
            d["scheme"] = get_scheme(d["scheme"])
        if "plan" in d:
            d["plan"] = BaggingPlan(**d["plan"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_changes(self, **changes) -> "Config":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


@dataclass
class Analysis:
    verdict: Verdict
    test_vector: ScoreVector
    baseline: ScoreVector
    app_id: str = ""
    device_id: str = ""

    def record(self) -> dict:
        return self.verdict.record(self.app_id, self.device_id)

    def vectors(self) -> dict:
        return {"test_vector": list(self.test_vector.values),
                "baseline": list(self.baseline.values)}


def decide(test_vector: ScoreVector, baseline: ScoreVector, config: Config) -> Verdict:
    result = wilcoxon(test_vector.values, baseline.values, config.alternative,
                      continuity=config.continuity)
    return classify(result, config.confidence)


def prepare_test(seq: BootSequence | Sequence[str], alphabet: Alphabet, max_len: int,
                 **meta) -> BootSequence:
    """Encode (if given names) and preprocess a test sequence."""
    if not isinstance(seq, BootSequence):
        seq = encode(list(seq), alphabet, **meta)
    if len(seq) == 0:
        raise StageError("preprocess", "empty input")
    return preprocess(seq, max_len)


class Detector:
    """Analyses boot sequences against a reference store.

    Bagged references are built lazily per app and shared by concurrent
    readers; building is serialised, and :meth:`invalidate` must be called
    after the store changes.
    """

    def __init__(self, store: ReferenceStore, config: Config = Config()):
        self.store = store
        self.config = config
        self._refs: dict[str, BaggedReference] = {}
        self._lock = threading.Lock()

    def reference(self, app_id: str) -> BaggedReference:
        ref = self._refs.get(app_id)
        if ref is not None:
            return ref
        with self._lock:
            ref = self._refs.get(app_id)
            if ref is None:
                samples = [preprocess(s, self.config.max_len) for s in self.store.samples(app_id)]
                try:
                    ref = build_reference(samples, self.config.plan, self.config.scheme, app_id,
                                          self.config.baseline_scope,
                                          PairScorer(self.config.scheme))
                except ValueError as exc:
                    raise StageError("bag", str(exc)) from exc
                self._refs[app_id] = ref
        return ref

    def invalidate(self, app_id: str | None = None) -> None:
        with self._lock:
            if app_id is None:
                self._refs.clear()
            else:
                self._refs.pop(app_id, None)

    def analyze(self, seq: BootSequence | Sequence[str], app_id: str,
                device_id: str = "") -> Analysis:
        if app_id not in self.store:
            raise UnknownAppError(app_id)
        test = prepare_test(seq, self.store.alphabet, self.config.max_len,
                            app_id=app_id, device_id=device_id)
        ref = self.reference(app_id)
        try:
            tv = ref.test_vector(test)
        except ValueError as exc:
            raise StageError("score", str(exc)) from exc
        try:
            verdict = decide(tv, ref.baseline, self.config)
        except ValueError as exc:
            raise StageError("decide", str(exc)) from exc
        return Analysis(verdict, tv, ref.baseline, app_id, device_id or test.device_id)


def analyze(test: str | Path | BootSequence | Sequence[str], app_id: str,
            config: Config = Config(), store: ReferenceStore | None = None) -> Analysis:
    """One-shot analysis of a sequence file (or sequence) against the store."""
    if store is None:
        if not config.store:
            raise StageError("load", "no reference store configured")
        store = ReferenceStore.load(config.store)
    device_id = ""
    if isinstance(test, (str, Path)):
        try:
            test = read_sequence(test, store.alphabet)
        except (OSError, ValueError) as exc:
            raise StageError("load", str(exc)) from exc
        device_id = test.device_id
    elif isinstance(test, BootSequence):
        device_id = test.device_id
    return Detector(store, config).analyze(test, app_id, device_id)


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class SampleOutcome:
    app_id: str
    sample_id: str
    truth: str
    p_value: float
    group: str = ""

    def flagged(self, confidence: float) -> bool:
        return self.p_value < confidence


@dataclass
class CrossValidationSplit:
    app_id: str
    groups: dict[str, tuple[str, ...]]
    vectors: dict[str, ScoreVector] = field(default_factory=dict)
    # vector name -> sample ids it was built from
    members: dict[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass
class CrossValidation:
    splits: dict[str, CrossValidationSplit]
    outcomes: list[SampleOutcome]
    confidence: float

    def fpr(self, confidence: float | None = None) -> float:
        i = self.confidence if confidence is None else confidence
        return sum(o.flagged(i) for o in self.outcomes) / len(self.outcomes)


def split_groups(samples: Sequence[BootSequence]) -> dict[str, list[BootSequence]]:
    """Round-robin by sample index: A gets 0, 3, 6, ..., B gets 1, 4, ..."""
    if len(samples) < 3:
        raise ValueError(f"cross-validation needs >= 3 legitimate samples, got {len(samples)}")
    return {g: list(samples[i::3]) for i, g in enumerate(GROUPS)}


def _sample_id(s: BootSequence, k: int) -> str:
    return s.sample_id or f"#{k}"


def _cross_validate_app(app_id: str, legit: Sequence[BootSequence],
                        config: Config) -> tuple[CrossValidationSplit, list[SampleOutcome]]:
    groups = split_groups(legit)
    ids = {id(s): _sample_id(s, k) for k, s in enumerate(legit)}
    split = CrossValidationSplit(app_id, {g: tuple(ids[id(s)] for s in groups[g]) for g in GROUPS})
    outcomes = []
    for tested in GROUPS:
        vec_name, sources = CV_SCHEME[tested]
        train = [s for g in sources for s in groups[g]]
        ref = build_reference(train, config.plan, config.scheme, app_id, config.baseline_scope,
                              PairScorer(config.scheme))
        split.vectors[vec_name] = ref.baseline
        split.members[vec_name] = tuple(ids[id(s)] for s in train)
        for s in groups[tested]:
            v = decide(ref.test_vector(s), ref.baseline, config)
            outcomes.append(SampleOutcome(app_id, ids[id(s)], "legitimate", v.p_value, tested))
    order = {ids[id(s)]: k for k, s in enumerate(legit)}
    outcomes.sort(key=lambda o: order[o.sample_id])
    return split, outcomes


def _malicious_app(app_id: str, legit: Sequence[BootSequence], malicious: Sequence[BootSequence],
                   config: Config) -> list[SampleOutcome]:
    if not malicious:
        return []
    ref = build_reference(list(legit), config.plan, config.scheme, app_id, config.baseline_scope,
                          PairScorer(config.scheme))
    return [SampleOutcome(app_id, _sample_id(s, k), "malicious",
                          decide(ref.test_vector(s), ref.baseline, config).p_value)
            for k, s in enumerate(malicious)]


def _map_apps(fn, apps: Sequence[str], workers: int) -> list:
    if workers > 1 and len(apps) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, apps))
    return [fn(a) for a in apps]


def cross_validate(corpus: Corpus, config: Config = Config()) -> CrossValidation:
    corpus = corpus.truncated(config.max_len)
    results = _map_apps(lambda a: _cross_validate_app(a, corpus.legitimate(a), config),
                        corpus.apps(), config.workers)
    splits = {a: r[0] for a, r in zip(corpus.apps(), results)}
    outcomes = [o for r in results for o in r[1]]
    return CrossValidation(splits, outcomes, config.confidence)


def evaluate(corpus: Corpus, config: Config = Config()) -> list[SampleOutcome]:
    """p-values for every sample of a labelled corpus at ``config.max_len``."""
    corpus = corpus.truncated(config.max_len)

    def one(app):
        _, legit = _cross_validate_app(app, corpus.legitimate(app), config)
        return legit + _malicious_app(app, corpus.legitimate(app), corpus.malicious(app), config)

    return [o for res in _map_apps(one, corpus.apps(), config.workers) for o in res]


def _ratio(k: int, n: int) -> float | None:
    return k / n if n else None


def rates(outcomes: Iterable[SampleOutcome], confidence: float) -> dict:
    """Pooled and per-app TPR/FPR at threshold ``confidence``."""
    counts: dict[str, list[int]] = {}
    for o in outcomes:
        c = counts.setdefault(o.app_id, [0, 0, 0, 0])  # tp, n_mal, fp, n_leg
        hit = o.flagged(confidence)
        if o.truth == "malicious":
            c[0] += hit
            c[1] += 1
        else:
            c[2] += hit
            c[3] += 1
    per_app = {a: {"tpr": _ratio(c[0], c[1]), "fpr": _ratio(c[2], c[3])}
               for a, c in sorted(counts.items())}
    tot = [sum(c[i] for c in counts.values()) for i in range(4)]
    return {"tpr": _ratio(tot[0], tot[1]), "fpr": _ratio(tot[2], tot[3]), "per_app": per_app}


def _row(value, outcomes: Sequence[SampleOutcome], confidence: float) -> dict:
    r = rates(outcomes, confidence)
    row = {"value": value, "tpr": r["tpr"], "fpr": r["fpr"]}
    for metric in ("tpr", "fpr"):
        vals = [v[metric] for v in r["per_app"].values() if v[metric] is not None]
        row[f"{metric}_max"] = max(vals) if vals else None
        row[f"{metric}_mean"] = sum(vals) / len(vals) if vals else None
        row[f"{metric}_min"] = min(vals) if vals else None
    row["per_app"] = r["per_app"]
    return row


@dataclass
class EvaluationReport:
    parameter: str
    rows: list[dict]
    corpus_fingerprint: str
    config: dict

    SUMMARY = ("tpr", "fpr", "tpr_max", "tpr_mean", "tpr_min", "fpr_max", "fpr_mean", "fpr_min")

    def apps(self) -> list[str]:
        return sorted({a for r in self.rows for a in r["per_app"]})

    def to_csv(self) -> str:
        apps = self.apps()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.parameter, *self.SUMMARY,
                    *(f"{a}_{m}" for a in apps for m in ("tpr", "fpr"))])
        for r in self.rows:
            cells = [r["value"], *(r[k] for k in self.SUMMARY)]
            for a in apps:
                pa = r["per_app"].get(a, {})
                cells += [pa.get("tpr"), pa.get("fpr")]
            w.writerow(["" if c is None else repr(c) for c in cells])
        return buf.getvalue()

    def echo(self) -> dict:
        return {"parameter": self.parameter, "corpus_fingerprint": self.corpus_fingerprint,
                "config": self.config, "rows": len(self.rows)}

    def write(self, csv_path: str | Path) -> Path:
        """Write the CSV and a ``.json`` config echo next to it."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        echo_path = csv_path.with_suffix(".json")
        echo_path.write_text(json.dumps(self.echo(), indent=2, sort_keys=True) + "\n")
        return echo_path


def evaluation_table(corpus: Corpus, config: Config = Config()) -> EvaluationReport:
    """TPR/FPR per app at ``config.max_len``: one row."""
    outcomes = evaluate(corpus, config)
    return EvaluationReport("max_len", [_row(config.max_len, outcomes, config.confidence)],
                            corpus.fingerprint(), config.to_dict())


def sweep_confidence(corpus: Corpus, i_values: Sequence[float] = DEFAULT_CONFIDENCE_GRID,
                     length: int = SWEEP_CONFIDENCE_LENGTH,
                     config: Config = Config()) -> EvaluationReport:
    """Scores are computed once at ``length``; each I only moves the threshold."""
    if not i_values:
        raise ValueError("empty confidence list")
    for i in i_values:
        if not 0 < i < 1:
            raise ValueError(f"confidence values must lie in (0, 1), got {i}")
    config = replace(config, max_len=length)
    outcomes = evaluate(corpus, config)
    rows = [_row(float(i), outcomes, float(i)) for i in i_values]
    return EvaluationReport("confidence", rows, corpus.fingerprint(), config.to_dict())


def sweep_length(corpus: Corpus, lengths: Sequence[int] = DEFAULT_LENGTH_GRID,
                 config: Config = Config()) -> EvaluationReport:
    if not lengths:
        raise ValueError("empty length list")
    for n in lengths:
        if n < 1:
            raise ValueError(f"lengths must be >= 1, got {n}")
    rows = [_row(int(n), evaluate(corpus, replace(config, max_len=int(n))), config.confidence)
            for n in lengths]
    return EvaluationReport("max_len", rows, corpus.fingerprint(), config.to_dict())


def export_score_matrix(samples: Sequence[BootSequence],
                        scheme: ScoringScheme = DEFAULT_SCHEME) -> str:
    """k x k CSV of pairwise scores; rows are the test side, columns the reference."""
    if len(samples) < 2:
        raise ValueError("a score matrix needs at least 2 samples")
    ids = [_sample_id(s, k) for k, s in enumerate(samples)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", *ids])
    for sid, a in zip(ids, samples):
        w.writerow([sid, *(score_only(a, b, scheme) for b in samples)])
    return buf.getvalue()
