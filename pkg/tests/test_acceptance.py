"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run standalone with ``python tests/test_acceptance.py`` or through pytest;
the summary section lists every criterion.
"""

import json
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from bootalign.aligner import (GAP, UNIT_MATCH_SCHEME, WORKED_EXAMPLE_SCHEME,
                               ScoringScheme, align, rescore_alignment, score_matrix, score_only,
                               score_only_cells)
from bootalign.cli import main as cli_main
from bootalign.decision import wilcoxon
from bootalign.ensemble import ReferenceStore
from bootalign.harness import Config, evaluate, rates, sweep_confidence, sweep_length
from bootalign.service import AnalysisService
from bootalign.synth import CorpusConfig, generate_corpus, load_corpus, write_corpus
from bootalign.syscall_trace import (BootSequence, build_alphabet, collapse_repeats, encode,
                                     preprocess, truncate, write_sequence)

from acceptance_report import criterion
from oracles import brute_force_alignment_score, brute_force_wilcoxon_two_sided, signed_rank_count

WORKED_TEST = "ABCDEBE"
WORKED_REF = "DEBFBCFDEE"
WORKED_F = np.array([
    [0, -8, -16, -24, -32, -40, -48, -56, -64, -72, -80],
    [-8, -2, -9, -17, -25, -33, -41, -49, -57, -65, -73],
    [-16, -10, -3, -4, -12, -20, -28, -36, -44, -52, -60],
    [-24, -18, -11, -6, -7, -15, -5, -13, -21, -29, -37],
    [-32, -14, -18, -13, -8, -9, -13, -7, -3, -11, -19],
    [-40, -22, -8, -16, -16, -9, -12, -15, -7, 3, -5],
    [-48, -30, -16, -3, -11, -11, -12, -12, -15, -5, 2],
    [-56, -38, -24, -11, -6, -12, -14, -15, -12, -9, 1],
])

DNA_X = "ATAGCCTACGTTTCAGC"
DNA_Y = "AATAGCATTGTGGC"
# two gaps (one per sequence); the shorter sequence is padded at the end
DNA_X_ALIGNED = "ATAGCCTA-CGTTTCAGC"
DNA_Y_ALIGNED = "A-ATAGCATTGTGGC---"


def _gapped(s):
    return [GAP if c == "-" else c for c in s]


def test_criterion_01_worked_example_matrix():
    with criterion(1, "worked six-symbol example reproduces the score matrix") as c:
        t0 = time.perf_counter()
        ab = build_alphabet(list("ABCDEF"))
        F = score_matrix(encode(WORKED_TEST, ab), encode(WORKED_REF, ab), WORKED_EXAMPLE_SCHEME)
        elapsed = time.perf_counter() - t0
        c.check("full matrix equals the printed table", np.array_equal(F, WORKED_F))
        c.check(f"cell (row 2, col 1) = {F[2, 1]} == -10", F[2, 1] == -10)
        c.check(f"final score {F[-1, -1]} == 1", F[-1, -1] == 1)
        c.check(f"runtime {elapsed:.3f}s < 1s", elapsed < 1)
    c.assert_all()


def test_criterion_02_dna_alignment_example():
    with criterion(2, "DNA example under the unit-match heuristic") as c:
        t0 = time.perf_counter()
        aligned = rescore_alignment(_gapped(DNA_X_ALIGNED), _gapped(DNA_Y_ALIGNED), UNIT_MATCH_SCHEME)
        pad = len(DNA_X) - len(DNA_Y)
        padded = rescore_alignment(list(DNA_X), list(DNA_Y) + [GAP] * pad, UNIT_MATCH_SCHEME)
        ab = build_alphabet(list("ACGT"))
        best = align(encode(DNA_X, ab), encode(DNA_Y, ab), UNIT_MATCH_SCHEME).score
        elapsed = time.perf_counter() - t0
        c.check(f"displayed two-gap alignment rescores to {aligned} == 6", aligned == 6)
        c.check(f"unaligned padded comparison scores {padded} == 4", padded == 4)
        c.check(f"optimal alignment score {best} >= 6", best >= 6)
        c.check(f"runtime {elapsed:.3f}s < 1s", elapsed < 1)
    c.assert_all()


def test_criterion_03_alignment_oracle():
    with criterion(3, "DP alignment against brute-force enumeration") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(20240603)
        bad = 0
        for _ in range(500):
            a = rng.integers(0, 4, rng.integers(0, 9)).tolist()
            b = rng.integers(0, 4, rng.integers(0, 9)).tolist()
            match = int(rng.integers(1, 6))
            s = ScoringScheme(match, int(rng.integers(-5, match)), int(rng.integers(-6, 1)),
                              int(rng.integers(-6, 1)))
            sub = lambda x, y: s.match_score if x == y else s.mismatch_score
            expect = brute_force_alignment_score(a, b, sub, s.gap_in_test, s.gap_in_reference)
            bad += align(a, b, s).score != expect or score_only(a, b, s) != expect
        c.check(f"500 random small pairs, {bad} mismatches vs enumeration", bad == 0)
        bad = 0
        for _ in range(10_000):
            a = rng.integers(0, 20, rng.integers(0, 201))
            b = rng.integers(0, 20, rng.integers(0, 201))
            match = int(rng.integers(1, 6))
            s = ScoringScheme(match, int(rng.integers(-5, match)), int(rng.integers(-6, 1)),
                              int(rng.integers(-6, 1)))
            bad += score_only(a, b, s) != score_matrix(a, b, s)[-1, -1]
        c.check(f"10000 pairs up to length 200, {bad} score_only/full-matrix mismatches", bad == 0)
        elapsed = time.perf_counter() - t0
        c.check(f"runtime {elapsed:.1f}s < 120s", elapsed < 120)
    c.assert_all()


def test_criterion_04_wilcoxon_oracle():
    with criterion(4, "Wilcoxon exact p-values and normal approximation") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 16))
            d = rng.integers(-8, 9, n).astype(float)
            worst = max(worst, abs(wilcoxon(d, np.zeros(n)).p_value - brute_force_wilcoxon_two_sided(d)))
        c.check(f"200 random vectors n<=15, max |p - enumeration| = {worst:.2e}", worst < 1e-12)

        d = np.arange(1, 11, dtype=float)
        d[[0, 6]] *= -1
        r = wilcoxon(d, np.zeros(10))
        c.check(f"n=10, W={r.w:g}: two-sided p = {r.p_value:.5f} <= 0.05", r.w == 8 and r.p_value <= 0.05)

        # every achievable W for 12 <= n <= 19 with distinct magnitudes
        gap = 0.0
        for n in range(12, 20):
            mags = np.arange(1, n + 1, dtype=float)
            for w in range(n * (n + 1) // 4 + 1):
                neg, rest = [], w
                for k in range(n, 0, -1):
                    if k <= rest:
                        neg.append(k - 1)
                        rest -= k
                x = mags.copy()
                x[neg] *= -1
                exact = wilcoxon(x, np.zeros(n), exact_below=100)
                normal = wilcoxon(x, np.zeros(n), exact_below=0)
                assert exact.p_value == pytest.approx(min(1.0, 2 * signed_rank_count(n, w) / 2 ** n))
                gap = max(gap, abs(exact.p_value - normal.p_value))
        c.check(f"normal vs exact for 12<=n<=19, max gap {gap:.4f} <= 0.02", gap <= 0.02)
        elapsed = time.perf_counter() - t0
        c.check(f"runtime {elapsed:.1f}s < 60s", elapsed < 60)
    c.assert_all()


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig())


def test_criterion_05_synthetic_effectiveness(small_corpus):
    with criterion(5, "TPR/FPR on the default synthetic corpus") as c:
        t0 = time.perf_counter()
        cfg = Config(max_len=2000)
        at2000 = rates(evaluate(small_corpus, cfg), cfg.confidence)
        at50 = rates(evaluate(small_corpus, Config(max_len=50)), cfg.confidence)
        elapsed = time.perf_counter() - t0
        per_app = ", ".join(f"{a} {v['tpr']:.2f}/{v['fpr']:.2f}" for a, v in at2000["per_app"].items())
        c.check(f"TPR {at2000['tpr']:.3f} >= 0.95 at length 2000", at2000["tpr"] >= 0.95)
        c.check(f"FPR {at2000['fpr']:.3f} <= 0.10 at length 2000 [{per_app}]", at2000["fpr"] <= 0.10)
        c.check(f"TPR at 50 ({at50['tpr']:.3f}) < TPR at 2000", at50["tpr"] < at2000["tpr"])
        c.check(f"runtime {elapsed:.0f}s < 600s", elapsed < 600)
    c.assert_all()


def test_criterion_06_threshold_monotonicity(small_corpus):
    with criterion(6, "sweep rows non-decreasing in I") as c:
        report = sweep_confidence(small_corpus)
        rows = sorted(report.rows, key=lambda r: r["value"])
        ok = all(lo["tpr"] <= hi["tpr"] and lo["fpr"] <= hi["fpr"] for lo, hi in zip(rows, rows[1:]))
        ok_app = all(lo["per_app"][a][m] <= hi["per_app"][a][m]
                     for lo, hi in zip(rows, rows[1:]) for a in lo["per_app"] for m in ("tpr", "fpr"))
        c.check(f"{len(rows)} rows, pooled TPR and FPR monotone", ok)
        c.check("per-app TPR and FPR monotone", ok_app)
    c.assert_all()


def _end_to_end(root: Path) -> dict[str, bytes]:
    corpus = generate_corpus(CorpusConfig(seed=7))
    write_corpus(corpus, root / "corpus")
    loaded = load_corpus(root / "corpus")
    report = sweep_length(loaded, [50, 150], Config(max_len=150))
    report.write(root / "report.csv")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_07_determinism(tmp_path):
    with criterion(7, "end-to-end determinism") as c:
        one = _end_to_end(tmp_path / "one")
        two = _end_to_end(tmp_path / "two")
        seqs = [k for k in one if k.endswith(".seq")]
        c.check(f"same file set ({len(one)} files, {len(seqs)} sequence files)", one.keys() == two.keys())
        c.check("sequence files byte-identical", all(one[k] == two.get(k) for k in seqs))
        c.check("report CSV and config echo byte-identical",
                one["report.csv"] == two["report.csv"] and one["report.json"] == two["report.json"])
    c.assert_all()


def test_criterion_08_performance():
    with criterion(8, "score-only speed and memory") as c:
        rng = np.random.default_rng(3)
        alphabet = build_alphabet([f"s{k}" for k in range(60)])

        def mk(n):
            s = BootSequence(tuple(int(v) for v in rng.integers(1, 61, n)), alphabet=alphabet)
            s.array  # materialise the cached input array outside the measurement
            return s

        a, b = mk(2500), mk(2500)
        score_only(a, b)  # JIT warm-up
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            score_only(a, b)
            times.append(time.perf_counter() - t0)
        med = sorted(times)[2]
        c.check(f"2500x2500 score_only median {med * 1000:.1f} ms < 100 ms", med < 0.1)

        table_bytes = alphabet.size ** 2 * 8
        ok = True
        for m, n in ((2500, 100), (100, 2500), (2500, 2500), (1200, 2500)):
            x, y = mk(m), mk(n)
            tracemalloc.start()
            score_only(x, y)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            # two rolling rows, the substitution table and its transpose
            bound = score_only_cells(m, n) * 8 + 2 * table_bytes + 4096
            ok &= c.check(f"{m}x{n}: peak {peak} B <= {bound} B (full matrix would be "
                          f"{(m + 1) * (n + 1) * 8} B)", peak <= bound)
    c.assert_all()


def test_criterion_09_preprocessing_properties():
    with criterion(9, "collapse idempotence and preprocessing order") as c:
        rng = np.random.default_rng(11)
        idem = order = 0
        for _ in range(10_000):
            s = rng.integers(0, int(rng.integers(1, 6)), int(rng.integers(0, 80))).tolist()
            n = int(rng.integers(1, 100))
            once = collapse_repeats(s)
            idem += collapse_repeats(once) == once
            out = preprocess(s, n)
            order += (out == truncate(collapse_repeats(s), n) and len(out) <= n
                      and all(x != y for x, y in zip(out, out[1:])))
        c.check(f"collapse idempotent on {idem}/10000", idem == 10_000)
        c.check(f"collapse-then-truncate contract on {order}/10000", order == 10_000)
    c.assert_all()


def test_criterion_10_service_cli_parity(tmp_path, capsys):
    with criterion(10, "service and CLI verdicts agree") as c:
        corpus = generate_corpus(CorpusConfig(profiles=3, legitimate=9, malicious=9,
                                              base_length=700, max_len=600, seed=5))
        store = ReferenceStore(corpus.alphabet)
        for app in corpus.apps():
            for s in corpus.legitimate(app):
                store.add(app, s, verified=True)
        store.save(tmp_path / "store")
        cfg = Config(max_len=600, store=str(tmp_path / "store"))
        service = AnalysisService(ReferenceStore.load(tmp_path / "store"), cfg)

        rng = np.random.default_rng(99)
        agree = 0
        labels = set()
        for k in range(50):
            app = corpus.apps()[int(rng.integers(len(corpus.apps())))]
            pool = corpus.legitimate(app) + corpus.malicious(app)
            src = pool[int(rng.integers(len(pool)))]
            names = src.names()
            keep = rng.random(len(names)) > rng.uniform(0, 0.1)   # random drop-outs
            names = [nm for nm, kp in zip(names, keep) if kp][: int(rng.integers(50, 601))]
            seq = encode(names, corpus.alphabet, app_id=app, device_id=f"d{k}")
            path = tmp_path / f"req{k}.seq"
            write_sequence(seq, path)

            code = cli_main(["analyze", str(path), "--app", app, "--store", str(tmp_path / "store"),
                             "--max-len", "600"])
            cli = json.loads(capsys.readouterr().out)
            status, svc = service.handle("POST", "/v1/analyze", json.dumps(
                {"app_id": app, "device_id": f"d{k}", "syscalls": names}).encode())
            same = (status == 200 and code == (3 if cli["label"] == "malicious" else 0)
                    and all(svc[f] == cli[f] for f in ("label", "p_value", "I", "n_effective")))
            agree += same
            labels.add(cli["label"])
        c.check(f"{agree}/50 randomized requests identical", agree == 50)
        c.check(f"both verdicts exercised: {sorted(labels)}", labels == {"legitimate", "malicious"})
    c.assert_all()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
