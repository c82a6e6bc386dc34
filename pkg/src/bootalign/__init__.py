"""Malware detection from system-call boot sequences.

A suspect boot is aligned against bagged sets of verified legitimate boots of
the same application; a Wilcoxon signed-rank test on the paired score
vectors decides whether it departs from legitimate behaviour.
"""

from .aligner import (DEFAULT_SCHEME, UNIT_MATCH_SCHEME, WORKED_EXAMPLE_SCHEME, AlignmentResult,
                      ScoringScheme, align, get_scheme, rescore_alignment, score_matrix, score_only)
from .decision import Verdict, WilcoxonResult, classify, wilcoxon
from .ensemble import (BaggingPlan, ReferenceStore, ScoreVector, aggregate, bag_reference_sets,
                       reference_baseline, score_vector, update_reference_store)
from .harness import (Config, Detector, EvaluationReport, analyze, cross_validate,
                      export_score_matrix, sweep_confidence, sweep_length)
from .synth import CorpusConfig, NoiseModel, generate_corpus, load_corpus, write_corpus
from .syscall_trace import (Alphabet, BootSequence, SyscallEvent, build_alphabet,
                            collapse_repeats, decode, encode, parse_strace, preprocess, truncate)

__version__ = "0.1.0"
