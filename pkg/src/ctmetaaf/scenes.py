"""Scene construction: synthetic rooms, SER-controlled mixing, manifests and folds.

Desk-scale data uses deterministic surrogate keywords (tone, chirp and noise
patterns) and surrogate playback built from the same kind of segments, so the
playback echo is confusable with the keywords.  Real recordings can be mixed
in through manifest paths.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .dsp import SAMPLE_RATE, read_wav
from .errors import CorpusError, GenerationError, UsageError

FOLDS = ("train", "val", "test")
MANIFEST_HEADER = ["id", "u_path|u_seed", "s_path|s_seed", "class", "fold", "ser_db", "shift", "len_s"]
PATTERNS = ("tone", "rise", "fall", "trill", "up2", "hiss", "clicks", "vibrato", "down2", "hisstone")
REGISTERS = (1.0, 1.6, 2.5, 4.0)


@dataclass
class Scene:
    id: str
    u: np.ndarray
    w: np.ndarray
    n: np.ndarray
    s: np.ndarray
    d: np.ndarray
    c: int
    ser_db: float
    shift: int
    kw_len: int
    echo: np.ndarray = field(repr=False, default=None)

    @property
    def keyword_mask(self) -> np.ndarray:
        m = np.zeros(len(self.d), bool)
        m[self.shift:self.shift + self.kw_len] = True
        return m


# -- synthetic sources --------------------------------------------------------

def seed_for(*parts) -> int:
    """Stable 63-bit seed from arbitrary string-able parts."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def synth_rir(seed: int, length_taps: int, rt60_s: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying white noise with a 60 dB decay time of ``rt60_s``,
    normalised to unit energy."""
    if length_taps <= 0:
        raise UsageError("impulse response needs at least one tap")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(length_taps)
    if rt60_s <= 0:
        w = np.zeros(length_taps)
        w[0] = 1.0
        return w
    t = np.arange(length_taps) / sample_rate
    w = noise * np.exp(-np.log(1000.0) * t / rt60_s)
    return w / np.sqrt(np.sum(w * w))


def keyword_duration(seed: int, sample_rate: int = SAMPLE_RATE) -> int:
    return int(np.random.default_rng(seed).uniform(0.35, 0.55) * sample_rate)


def _envelope(n, rng):
    attack = max(1, int(n * rng.uniform(0.05, 0.15)))
    release = max(1, int(n * rng.uniform(0.15, 0.3)))
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack)
    env[n - release:] = np.linspace(1.0, 0.0, release)
    return env


def _harmonics(f0_track, sample_rate, rng, n_harm=3):
    phase = 2 * np.pi * np.cumsum(f0_track) / sample_rate
    amps = rng.uniform(0.4, 1.0, n_harm) / np.arange(1, n_harm + 1)
    out = np.zeros_like(f0_track)
    for h in range(n_harm):
        if np.max(f0_track) * (h + 1) < sample_rate / 2 * 0.9:
            out += amps[h] * np.sin((h + 1) * phase + rng.uniform(0, 2 * np.pi))
    return out


def _bandnoise(n, lo, hi, sample_rate, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def pattern_signal(pattern: str, n: int, register: float, rng: np.random.Generator,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sample_rate
    dur = n / sample_rate
    f0 = register * 220.0 * rng.uniform(0.87, 1.15)
    if pattern == "tone":
        x = _harmonics(np.full(n, f0), sample_rate, rng)
    elif pattern == "rise":
        x = _harmonics(f0 * (1.0 + 1.5 * t / dur), sample_rate, rng)
    elif pattern == "fall":
        x = _harmonics(f0 * (2.5 - 1.5 * t / dur), sample_rate, rng)
    elif pattern == "trill":
        x = _harmonics(np.full(n, 1.3 * f0), sample_rate, rng) * (0.55 + 0.45 * np.sin(2 * np.pi * 9.0 * t))
    elif pattern == "up2":
        x = _harmonics(np.where(t < dur / 2, f0, 1.5 * f0), sample_rate, rng)
    elif pattern == "down2":
        x = _harmonics(np.where(t < dur / 2, 1.8 * f0, f0), sample_rate, rng)
    elif pattern == "hiss":
        lo = min(1800.0 * register ** 0.5, 6000.0)
        x = 0.5 * _bandnoise(n, lo, min(lo * 1.8, 7800.0), sample_rate, rng)
    elif pattern == "clicks":
        x = np.zeros(n)
        burst = n // 8
        for k in range(3):
            start = int((k + 0.5) * n / 3.5)
            x[start:start + burst] = _harmonics(np.full(burst, 2 * f0), sample_rate, rng) * np.hanning(burst)
    elif pattern == "vibrato":
        x = _harmonics(f0 * (1.0 + 0.08 * np.sin(2 * np.pi * 6.0 * t)), sample_rate, rng)
    elif pattern == "hisstone":
        half = n // 2
        lo = min(2500.0 * register ** 0.5, 6000.0)
        x = np.concatenate([0.5 * _bandnoise(half, lo, min(lo * 1.6, 7800.0), sample_rate, rng),
                            _harmonics(np.full(n - half, f0), sample_rate, rng)])
    else:
        raise UsageError(f"unknown pattern {pattern!r}")
    return x * _envelope(n, rng)


def surrogate_keyword(cls: int, seed: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Deterministic word-like utterance of class ``cls`` (up to 40 classes)."""
    if not 0 <= cls < len(PATTERNS) * len(REGISTERS):
        raise UsageError(f"surrogate vocabulary has {len(PATTERNS) * len(REGISTERS)} classes, got {cls}")
    n = keyword_duration(seed, sample_rate)
    rng = np.random.default_rng([seed, 1])
    x = pattern_signal(PATTERNS[cls % len(PATTERNS)], n, REGISTERS[cls // len(PATTERNS)], rng, sample_rate)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12) * 0.1


def synth_playback(seed: int, n_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like playback: random surrogate segments over a low noise bed."""
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.standard_normal(n_samples)
    pos = int(rng.uniform(0, 0.1) * sample_rate)
    while pos < n_samples:
        seg = int(rng.uniform(0.15, 0.5) * sample_rate)
        pattern = PATTERNS[rng.integers(len(PATTERNS))]
        register = REGISTERS[rng.integers(2)] * rng.uniform(0.8, 1.25)
        y = pattern_signal(pattern, seg, register, rng, sample_rate)
        y = y / (np.sqrt(np.mean(y * y)) + 1e-12) * rng.uniform(0.5, 2.0)
        end = min(n_samples, pos + seg)
        x[pos:end] += y[:end - pos]
        pos = end + int(rng.uniform(0.02, 0.15) * sample_rate)
    return x / np.sqrt(np.mean(x * x)) * 0.1


# -- mixing -------------------------------------------------------------------

def make_scene(u, s, w, n=None, ser_db: float = 0.0, shift: int = 0, c: int = 0,
               scene_id: str = "") -> Scene:
    """Mix ``d = u*w + n + s`` with the keyword scaled to the requested SER
    over its support ``[shift, shift + len(s))``."""
    u = np.asarray(u, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    N = len(u)
    if shift < 0 or shift + len(s) > N:
        raise GenerationError(f"keyword of {len(s)} samples at shift {shift} does not fit {N} samples")
    echo = np.convolve(u, np.asarray(w, dtype=np.float64))[:N]
    support = slice(shift, shift + len(s))
    echo_energy = float(np.sum(echo[support] ** 2))
    kw_energy = float(np.sum(s ** 2))
    if echo_energy <= 0.0:
        raise GenerationError(f"scene {scene_id!r}: echo is silent over the keyword support")
    if kw_energy <= 0.0:
        raise GenerationError(f"scene {scene_id!r}: keyword is silent")
    gain = np.sqrt(echo_energy / kw_energy * 10.0 ** (ser_db / 10.0))
    s_full = np.zeros(N)
    s_full[support] = gain * s
    n = np.zeros(N) if n is None else np.asarray(n, dtype=np.float64)[:N]
    d = echo + n + s_full
    return Scene(id=scene_id, u=u, w=np.asarray(w, dtype=np.float64), n=n, s=s_full, d=d, c=int(c),
                 ser_db=float(ser_db), shift=int(shift), kw_len=len(s), echo=echo)


def measured_ser(scene: Scene) -> float:
    m = scene.keyword_mask
    return 10.0 * np.log10(np.sum(scene.s[m] ** 2) / np.sum(scene.echo[m] ** 2))


# -- manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    id: str
    u_src: str
    s_src: str
    c: int
    fold: str
    ser_db: float
    shift: int
    len_s: float

    def as_csv(self) -> list:
        return [self.id, self.u_src, self.s_src, str(self.c), self.fold, repr(float(self.ser_db)),
                str(self.shift), repr(float(self.len_s))]


@dataclass(frozen=True)
class SceneSettings:
    """How rows are turned into audio: room responses and optional noise."""
    seed: int = 0
    rir_taps: int = 64
    rt60_range: tuple = (0.002, 0.01)
    noise_snr_db: Optional[float] = None


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in rows:
            wr.writerow(r.as_csv())


def read_manifest(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise CorpusError(f"{path}: bad manifest header {header}")
        rows = []
        for lineno, rec in enumerate(rd, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_HEADER):
                raise CorpusError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            try:
                rows.append(ManifestRow(rec[0], rec[1], rec[2], int(rec[3]), rec[4], float(rec[5]),
                                        int(rec[6]), float(rec[7])))
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return rows


def _is_seed(src: str) -> bool:
    return src.lstrip("-").isdigit()


def build_toy_manifest(seed: int, counts: dict, classes: Sequence[int], len_s: float = 1.0,
                       test_len_s: Optional[float] = None, ser_range=(-25.0, 0.0)) -> list:
    """Synthetic rows with classes balanced round-robin within each fold."""
    rng = np.random.default_rng(seed)
    used = set()
    rows = []
    for fold in FOLDS:
        n = int(counts.get(fold, 0))
        length = test_len_s if (fold == "test" and test_len_s) else len_s
        N = int(round(length * SAMPLE_RATE))
        labels = [classes[i % len(classes)] for i in range(n)]
        rng.shuffle(labels)
        for i, c in enumerate(labels):
            while True:
                s_seed = int(rng.integers(1, 2**62))
                if s_seed not in used:
                    used.add(s_seed)
                    break
            u_seed = int(rng.integers(1, 2**62))
            kw = keyword_duration(s_seed)
            if kw > N:
                raise GenerationError(f"keywords need {kw} samples, scenes hold {N}")
            shift = int(rng.integers(0, N - kw + 1))
            ser = float(rng.uniform(*ser_range))
            rows.append(ManifestRow(f"{fold}-{i:05d}", str(u_seed), str(s_seed), int(c), fold,
                                    round(ser, 4), shift, float(length)))
    return rows


def validate_rows(rows: Sequence[ManifestRow], base_dir=None) -> None:
    """Reject unknown folds, missing files and reused keyword utterances."""
    seen = {}
    for r in rows:
        if r.fold not in FOLDS:
            raise CorpusError(f"row {r.id}: unknown fold {r.fold!r}")
        for src in (r.u_src, r.s_src):
            if not _is_seed(src):
                p = _resolve(src, base_dir)
                if not p.exists():
                    raise CorpusError(f"row {r.id}: missing file {p}")
        if r.s_src in seen:
            other = seen[r.s_src]
            if other.fold != r.fold:
                raise CorpusError(f"fold leakage: keyword {r.s_src} in rows {other.id} ({other.fold}) "
                                  f"and {r.id} ({r.fold})")
            raise CorpusError(f"keyword {r.s_src} used twice (rows {other.id}, {r.id})")
        seen[r.s_src] = r


def _resolve(src: str, base_dir) -> Path:
    p = Path(src)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


def render_scene(row: ManifestRow, settings: SceneSettings = SceneSettings(), base_dir=None) -> Scene:
    N = int(round(row.len_s * SAMPLE_RATE))
    if _is_seed(row.u_src):
        u = synth_playback(int(row.u_src), N)
    else:
        u = read_wav(_resolve(row.u_src, base_dir))
        u = np.pad(u[:N], (0, max(0, N - len(u))))
    if _is_seed(row.s_src):
        s = surrogate_keyword(row.c, int(row.s_src))
    else:
        s = read_wav(_resolve(row.s_src, base_dir))
    rng = np.random.default_rng(seed_for(settings.seed, row.id, "room"))
    rt60 = rng.uniform(*settings.rt60_range)
    w = synth_rir(seed_for(settings.seed, row.id, "rir"), settings.rir_taps, rt60)
    n = None
    if settings.noise_snr_db is not None:
        echo_power = np.mean(np.convolve(u, w)[:N] ** 2)
        n = rng.standard_normal(N) * np.sqrt(echo_power * 10.0 ** (-settings.noise_snr_db / 10.0))
    return make_scene(u, s, w, n, row.ser_db, row.shift, row.c, scene_id=row.id)


class Fold(Sequence):
    """Lazily rendered, cached scenes of one fold in manifest order."""

    def __init__(self, rows, settings: SceneSettings, base_dir=None):
        self.rows = list(rows)
        self.settings = settings
        self.base_dir = base_dir
        self._cache = {}

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i not in self._cache:
            self._cache[i] = render_scene(self.rows[i], self.settings, self.base_dir)
        return self._cache[i]

    def __iter__(self) -> Iterator[Scene]:
        for i in range(len(self)):
            yield self[i]

    @property
    def classes(self) -> list:
        return [r.c for r in self.rows]


def load_corpus(manifest_path, settings: SceneSettings = SceneSettings()) -> dict:
    """Fold name -> ``Fold`` for every fold in ``FOLDS`` (possibly empty)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"manifest {manifest_path} does not exist")
    rows = read_manifest(manifest_path)
    validate_rows(rows, manifest_path.parent)
    return {fold: Fold([r for r in rows if r.fold == fold], settings, manifest_path.parent)
            for fold in FOLDS}
