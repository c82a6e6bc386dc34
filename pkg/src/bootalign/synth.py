"""Reproducible synthetic boot-sequence corpora.

Each application profile owns a run-free canonical boot. Legitimate samples
are that boot after device-level block variants, per-sample substitution /
insertion / deletion noise and stuttered repeats (which preprocessing
removes). Malicious samples splice a contiguous payload into a legitimate
boot.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .syscall_trace import (DEFAULT_MAX_LEN, Alphabet, BootSequence, build_alphabet,
                            preprocess, read_sequence, write_sequence)

SYNTH_SYSCALLS = (
    "openat", "close", "read", "write", "fstat", "newfstatat", "mmap", "munmap",
    "mprotect", "brk", "ioctl", "futex", "clone", "getpid", "gettid", "getuid",
    "prctl", "rt_sigaction", "rt_sigprocmask", "madvise", "lseek", "pread64",
    "faccessat", "readlinkat", "getdents64", "fcntl", "dup3", "pipe2",
    "epoll_create1", "epoll_ctl", "epoll_pwait", "clock_gettime", "nanosleep",
    "sched_yield", "setpriority", "getpriority", "socket", "connect", "sendto",
    "recvfrom", "bind", "listen", "execve", "unlinkat", "mkdirat", "renameat",
    "fchmodat", "statfs", "sysinfo", "wait4",
)
# calls an infection vector leans on: network, process and filesystem tampering
PAYLOAD_SYSCALLS = (
    "socket", "connect", "sendto", "recvfrom", "bind", "listen", "execve",
    "clone", "unlinkat", "mkdirat", "renameat", "fchmodat", "wait4", "write",
    "openat", "pipe2", "dup3",
)


def _seed(*parts) -> list[int]:
    return [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]


def synth_alphabet() -> Alphabet:
    return build_alphabet(SYNTH_SYSCALLS)


@dataclass(frozen=True)
class AppProfile:
    app_id: str
    base_sequence: tuple[int, ...]
    alphabet: Alphabet = field(repr=False)
    seed: int = 0


@dataclass(frozen=True)
class NoiseModel:
    """Per-sample edit noise plus block variants of the boot path.

    The boot has a variable block of ``jitter_block`` symbols every
    ``jitter_spacing`` symbols; ``device_jitter`` is the probability of
    running the alternative version of each block. With
    ``variant_scope="device"`` the choice is fixed per device, so samples
    from one device share it; with ``"sample"`` every boot draws its own.
    ``repeat_rate`` stutters symbols, which preprocessing collapses away.
    """

    substitution_rate: float = 0.02
    insertion_rate: float = 0.02
    deletion_rate: float = 0.02
    device_jitter: float = 0.5
    jitter_block: int = 32
    jitter_spacing: int = 48
    repeat_rate: float = 0.15
    variant_scope: str = "sample"

    def __post_init__(self):
        if self.variant_scope not in ("device", "sample"):
            raise ValueError("variant_scope must be 'device' or 'sample'")
        for name in ("substitution_rate", "insertion_rate", "deletion_rate",
                     "device_jitter", "repeat_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.substitution_rate + self.deletion_rate > 1:
            raise ValueError("substitution_rate + deletion_rate must not exceed 1")
        if self.jitter_block < 1 or self.jitter_spacing < self.jitter_block:
            raise ValueError("need 1 <= jitter_block <= jitter_spacing")


QUIET = NoiseModel(0, 0, 0, 0, repeat_rate=0)


@dataclass(frozen=True)
class PayloadSpec:
    payload: tuple[int, ...]
    insert_after: float = 0.3

    def __post_init__(self):
        if not 0 <= self.insert_after <= 1:
            raise ValueError("insert_after must lie in [0, 1]")


def _draw_run_free(rng: np.random.Generator, length: int, symbols: np.ndarray,
                   weights: np.ndarray | None = None) -> list[int]:
    out: list[int] = []
    while len(out) < length:
        batch = rng.choice(symbols, size=length, p=weights)
        for s in batch:
            if not out or out[-1] != s:
                out.append(int(s))
                if len(out) == length:
                    break
    return out


def gen_profile(app_id: str, length: int, alphabet: Alphabet, seed: int = 0) -> AppProfile:
    if length < 1:
        raise ValueError("profile length must be >= 1")
    if alphabet.size < 2:
        raise ValueError("alphabet needs at least one syscall name")
    rng = np.random.default_rng(_seed(seed, app_id, "profile"))
    symbols = np.arange(1, alphabet.size)
    # skewed call frequencies, as in real traces
    w = 1.0 / np.arange(1, len(symbols) + 1) ** 0.6
    w = rng.permutation(w / w.sum())
    if len(symbols) == 1:
        base = [int(symbols[0])]
    else:
        base = _draw_run_free(rng, length, symbols, w)
    return AppProfile(app_id, tuple(base), alphabet, seed)


def _apply_device_jitter(seq: list[int], profile: AppProfile, noise: NoiseModel,
                         device_id: str) -> list[int]:
    if noise.device_jitter == 0 or profile.alphabet.size < 3:
        return seq
    nblocks = len(seq) // noise.jitter_spacing
    flips = np.random.default_rng(_seed(profile.seed, profile.app_id, device_id, "device")
                                  ).random(nblocks) < noise.device_jitter
    symbols = np.arange(1, profile.alphabet.size)
    out = list(seq)
    for k in np.flatnonzero(flips):
        start = int(k) * noise.jitter_spacing + noise.jitter_spacing // 2 - noise.jitter_block // 2
        alt_rng = np.random.default_rng(_seed(profile.seed, profile.app_id, "variant", int(k)))
        out[start:start + noise.jitter_block] = _draw_run_free(alt_rng, noise.jitter_block, symbols)
    return out


def perturb(profile: AppProfile, noise: NoiseModel, device_id: str, sample_seed: int) -> list[int]:
    """Noisy raw (not yet preprocessed) boot of ``profile`` on ``device_id``."""
    scope = device_id if noise.variant_scope == "device" else f"{device_id}#{sample_seed}"
    seq = _apply_device_jitter(list(profile.base_sequence), profile, noise, scope)
    rng = np.random.default_rng(_seed(profile.seed, profile.app_id, device_id, sample_seed, "sample"))
    nsym = profile.alphabet.size - 1
    n = len(seq)
    r = rng.random(n)
    ins = rng.random(n) < noise.insertion_rate
    ins_sym = rng.integers(1, nsym + 1, size=n)
    # substitute with a different known symbol: shift by 1..nsym-1 around the ring
    shift = rng.integers(1, max(nsym, 2), size=n)
    reps = rng.geometric(1 - noise.repeat_rate, size=n) if noise.repeat_rate > 0 else np.ones(n, int)

    out: list[int] = []
    for k, s in enumerate(seq):
        if r[k] < noise.deletion_rate:
            pass
        elif r[k] < noise.deletion_rate + noise.substitution_rate and nsym > 1:
            out.extend([(s - 1 + int(shift[k])) % nsym + 1] * int(reps[k]))
        else:
            out.extend([s] * int(reps[k]))
        if ins[k]:
            out.append(int(ins_sym[k]))
    return out


def gen_boot(profile: AppProfile, noise: NoiseModel, device_id: str, sample_seed: int,
             max_len: int | None = DEFAULT_MAX_LEN, sample_id: str = "") -> BootSequence:
    raw = perturb(profile, noise, device_id, sample_seed)
    seq = BootSequence(tuple(raw), app_id=profile.app_id, device_id=device_id,
                       label="legitimate", alphabet=profile.alphabet, sample_id=sample_id)
    return preprocess(seq, max_len)


def inject_payload(boot: BootSequence, spec: PayloadSpec, max_len: int | None = None,
                   sample_id: str | None = None) -> BootSequence:
    """Splice the payload in as one block at ``floor(insert_after * len)``."""
    if not spec.payload:
        raise ValueError("payload must be non-empty")
    pos = math.floor(spec.insert_after * len(boot))
    spliced = boot.symbols[:pos] + tuple(spec.payload) + boot.symbols[pos:]
    out = boot.with_symbols(spliced, label="malicious",
                            sample_id=boot.sample_id if sample_id is None else sample_id)
    return preprocess(out, max_len)


def gen_payload(alphabet: Alphabet, length: int, seed: int, tag: str = "") -> tuple[int, ...]:
    rng = np.random.default_rng(_seed(seed, tag, "payload"))
    names = [n for n in PAYLOAD_SYSCALLS if n in alphabet.index] or list(alphabet.names)
    symbols = np.array([alphabet.index[n] for n in names])
    return tuple(_draw_run_free(rng, length, symbols))


# -- corpora ------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    profiles: int = 5
    legitimate: int = 30
    malicious: int = 30
    samples_per_device: int = 3
    base_length: int = 2800
    max_len: int = DEFAULT_MAX_LEN
    payload_fraction: float = 0.2
    insert_after: float = 0.3
    seed: int = 7
    noise: NoiseModel = NoiseModel()

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        noise = NoiseModel(**d.pop("noise", {}))
        return cls(noise=noise, **d)


PRESETS = {
    "small": CorpusConfig(),
    "full": CorpusConfig(profiles=19, legitimate=150, malicious=150),
}


@dataclass
class Corpus:
    alphabet: Alphabet
    samples: dict[str, dict[str, list[BootSequence]]]
    manifest: dict

    def apps(self) -> list[str]:
        return sorted(self.samples)

    def legitimate(self, app_id: str) -> list[BootSequence]:
        return self.samples[app_id]["legitimate"]

    def malicious(self, app_id: str) -> list[BootSequence]:
        return self.samples[app_id]["malicious"]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.alphabet.names).encode())
        for app in self.apps():
            for label in ("legitimate", "malicious"):
                for s in self.samples[app][label]:
                    h.update(f"{app}/{label}/{s.sample_id}/{s.device_id}:".encode())
                    h.update(s.array.tobytes())
        return h.hexdigest()[:16]

    def truncated(self, max_len: int) -> "Corpus":
        return Corpus(self.alphabet,
                      {a: {lab: [preprocess(s, max_len) for s in seqs] for lab, seqs in d.items()}
                       for a, d in self.samples.items()},
                      self.manifest)


def generate_corpus(cfg: CorpusConfig = CorpusConfig()) -> Corpus:
    alphabet = synth_alphabet()
    samples: dict[str, dict[str, list[BootSequence]]] = {}
    profiles_meta = []
    payload_len = max(1, round(cfg.payload_fraction * cfg.max_len))
    for p in range(cfg.profiles):
        app_id = f"app{p:02d}"
        profile = gen_profile(app_id, cfg.base_length, alphabet, cfg.seed)
        payload = PayloadSpec(gen_payload(alphabet, payload_len, cfg.seed, app_id), cfg.insert_after)
        legit, mal, entries = [], [], []
        for k in range(cfg.legitimate):
            dev = f"dev{k // cfg.samples_per_device:03d}"
            sid = f"{app_id}-L{k:03d}"
            legit.append(gen_boot(profile, cfg.noise, dev, k, cfg.max_len, sid))
            entries.append({"sample_id": sid, "label": "legitimate", "device_id": dev,
                            "sample_seed": k})
        for k in range(cfg.malicious):
            dev = f"dev{k // cfg.samples_per_device:03d}"
            sid = f"{app_id}-M{k:03d}"
            seed = 100_000 + k
            boot = gen_boot(profile, cfg.noise, dev, seed, cfg.max_len, sid)
            mal.append(inject_payload(boot, payload, cfg.max_len))
            entries.append({"sample_id": sid, "label": "malicious", "device_id": dev,
                            "sample_seed": seed})
        samples[app_id] = {"legitimate": legit, "malicious": mal}
        profiles_meta.append({"app_id": app_id, "seed": cfg.seed, "length": cfg.base_length,
                              "payload": {"length": payload_len, "insert_after": cfg.insert_after},
                              "samples": entries})
    manifest = {"config": asdict(cfg), "alphabet": "alphabet.txt",
                "layout": "<app_id>/<label>/<sample_id>.seq", "profiles": profiles_meta}
    return Corpus(alphabet, samples, manifest)


def write_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.alphabet.save(out / "alphabet.txt")
    for app in corpus.apps():
        for label, seqs in corpus.samples[app].items():
            d = out / app / label
            d.mkdir(parents=True, exist_ok=True)
            for s in seqs:
                write_sequence(s, d / f"{s.sample_id}.seq")
    manifest = dict(corpus.manifest, fingerprint=corpus.fingerprint())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(in_dir: str | Path) -> Corpus:
    root = Path(in_dir)
    alphabet = Alphabet.load(root / "alphabet.txt")
    manifest = json.loads((root / "manifest.json").read_text())
    samples: dict[str, dict[str, list[BootSequence]]] = {}
    for prof in manifest["profiles"]:
        app = prof["app_id"]
        samples[app] = {"legitimate": [], "malicious": []}
        for e in prof["samples"]:
            s = read_sequence(root / app / e["label"] / f"{e['sample_id']}.seq", alphabet)
            samples[app][e["label"]].append(s.with_symbols(s.symbols, preprocessed=True))
    return Corpus(alphabet, samples, manifest)

