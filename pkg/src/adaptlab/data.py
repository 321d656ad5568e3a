"""Synthetic spoof-artifact benchmark with controlled temporal scales.

Each record is a feature sequence [T, F]. Bonafide records are a smooth
base process: per-feature AR(1) (coefficient 0.9) plus a few slow
sinusoids shared across features. Spoof records carry artifacts at one
or both of two deliberately separated temporal scales:

* ``short``  additive noise bursts of at most 3 frames, visible inside
  a kernel-3 receptive field;
* ``long``   complementary multiplicative amplitude modulation with
  period 40..120 frames: half the channels swell while the other half
  shrink, a slow spectral tilt along a random per-record axis;
* ``mixed``  both.

Artifacts are constructed mean-neutral so frame-mean features carry
almost no label signal; detectors must look at temporal structure.
The complementary tilt keeps per-frame energy level (so it survives
the per-frame normalization transformer layers apply), and because the
tilt axis is random per record, no single frame betrays the artifact:
only the slow coherent drift of per-channel envelopes does, which
needs a receptive field comparable to the modulation period.
Record ``i`` is generated entirely from ``SplitRng(seed).child(i)``, so
generation order and worker count never change a byte of the corpus.

On-disk container (little-endian):

    magic "SPFB", version u16, num_records u32, T u32, F u32
    per record: id u32, label u8, artifact_class u8, T*F float32
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .rng import SplitRng

MAGIC = b"SPFB"
VERSION = 1

LABEL_SPOOF = 0
LABEL_BONAFIDE = 1

ARTIFACT_CLASSES = ("none", "short", "long", "mixed")
_CLASS_CODE = {name: i for i, name in enumerate(ARTIFACT_CLASSES)}


class CorpusFormatError(ValueError):
    """Bad magic, unsupported version, or truncated corpus file."""


class CorpusSpecError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Declarative description of a corpus; generation is pure in this."""

    seed: int = 7
    num_records: int = 400
    frames: int = 200
    features: int = 16
    # proportions of (none, short, long, mixed); must sum to 1. The slow
    # artifact is the hardest to learn, so it gets a bigger slice.
    proportions: tuple[float, float, float, float] = (0.5, 0.125, 0.25, 0.125)
    burst_amplitude: float = 4.0
    burst_count: int = 12
    burst_max_len: int = 3
    mod_depth: float = 1.0
    mod_period: tuple[float, float] = (40.0, 120.0)

    def __post_init__(self) -> None:
        if self.num_records < 1 or self.frames < 1 or self.features < 1:
            raise CorpusSpecError("num_records, frames, and features must all be >= 1")
        if not math.isclose(sum(self.proportions), 1.0, abs_tol=1e-6):
            raise CorpusSpecError(f"proportions must sum to 1, got {self.proportions}")
        if any(p < 0 for p in self.proportions):
            raise CorpusSpecError(f"proportions must be non-negative, got {self.proportions}")
        if not 1 <= self.burst_max_len <= 3:
            raise CorpusSpecError("burst_max_len must be in 1..3 (short-scale contract)")
        if self.mod_period[0] < 40.0:
            raise CorpusSpecError("mod_period must start at >= 40 frames (long-scale contract)")


@dataclass
class SpoofRecord:
    id: int
    label: int  # LABEL_BONAFIDE or LABEL_SPOOF
    artifact_class: str
    features: np.ndarray  # [T, F] float32


@dataclass
class Corpus:
    records: list[SpoofRecord]
    frames: int
    features: int

    def __len__(self) -> int:
        return len(self.records)

    def feature_array(self) -> np.ndarray:
        return np.stack([r.features for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


# -- generation ----------------------------------------------------------


def assign_classes(spec: CorpusSpec) -> list[str]:
    """Deterministic largest-remainder allocation, then a seeded interleave.

    Counts land within one record of the requested proportions; the
    shuffle only decides which id gets which class and is independent of
    the per-record content streams.
    """
    n = spec.num_records
    raw = [p * n for p in spec.proportions]
    counts = [int(math.floor(x)) for x in raw]
    remainders = sorted(range(4), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    classes = [name for name, c in zip(ARTIFACT_CLASSES, counts) for _ in range(c)]
    order = SplitRng(spec.seed).child(2**32).generator().permutation(n)
    return [classes[j] for j in np.argsort(order)]


def make_base(gen: np.random.Generator, frames: int, features: int) -> np.ndarray:
    """Bonafide background: AR(1) per feature plus 2..4 slow sinusoids."""
    burn = 25
    noise = gen.standard_normal((burn + frames, features))
    x = np.empty_like(noise)
    x[0] = noise[0]
    for t in range(1, burn + frames):
        x[t] = 0.9 * x[t - 1] + noise[t]
    x = x[burn:]
    t_axis = np.arange(frames)
    for _ in range(int(gen.integers(2, 5))):
        period = gen.uniform(50.0, 200.0)
        phase = gen.uniform(0.0, 2.0 * math.pi)
        amp = gen.uniform(0.5, 1.5)
        weights = gen.standard_normal(features)
        weights *= amp / max(np.linalg.norm(weights), 1e-12)
        x += np.sin(2.0 * math.pi * t_axis / period + phase)[:, None] * weights[None, :]
    return x


def add_short_bursts(x: np.ndarray, gen: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    """Additive zero-mean bursts of at most ``burst_max_len`` frames."""
    out = x.copy()
    frames = x.shape[0]
    for _ in range(spec.burst_count):
        length = int(gen.integers(1, spec.burst_max_len + 1))
        start = int(gen.integers(0, max(frames - length, 1)))
        out[start:start + length] += spec.burst_amplitude * gen.standard_normal(
            (length, x.shape[1])
        )
    return out


def apply_long_modulation(x: np.ndarray, gen: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    """Complementary multiplicative modulation across all frames.

    A random half of the channels is scaled by (1 + d sin), the other
    half by (1 - d sin): a slow spectral tilt along a per-record random
    axis. Tilting keeps per-frame energy roughly constant, and the
    random axis keeps single-frame statistics bonafide-like; the
    artifact lives in the slow coherent drift of per-channel envelopes.
    """
    frames, features = x.shape
    period = gen.uniform(*spec.mod_period)
    phase = gen.uniform(0.0, 2.0 * math.pi)
    signs = np.ones(features)
    signs[gen.permutation(features)[: features // 2]] = -1.0
    swing = spec.mod_depth * np.sin(2.0 * math.pi * np.arange(frames) / period + phase)
    return x * (1.0 + swing[:, None] * signs[None, :])


def generate_record(spec: CorpusSpec, index: int, artifact_class: str) -> SpoofRecord:
    gen = SplitRng(spec.seed).child(index).generator()
    x = make_base(gen, spec.frames, spec.features)
    if artifact_class in ("long", "mixed"):
        x = apply_long_modulation(x, gen, spec)
    if artifact_class in ("short", "mixed"):
        x = add_short_bursts(x, gen, spec)
    label = LABEL_BONAFIDE if artifact_class == "none" else LABEL_SPOOF
    return SpoofRecord(index, label, artifact_class, x.astype(np.float32))


def generate(spec: CorpusSpec, workers: int = 1) -> Corpus:
    """Generate the corpus; identical bytes for any worker count."""
    classes = assign_classes(spec)
    if workers <= 1:
        records = [generate_record(spec, i, classes[i]) for i in range(spec.num_records)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(lambda i: generate_record(spec, i, classes[i]), range(spec.num_records))
            )
    return Corpus(records, spec.frames, spec.features)


# -- file I/O ------------------------------------------------------------


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIII", VERSION, len(corpus.records), corpus.frames, corpus.features))
        for rec in corpus.records:
            if rec.features.shape != (corpus.frames, corpus.features):
                raise CorpusFormatError(
                    f"record {rec.id} has shape {rec.features.shape}, "
                    f"corpus is [{corpus.frames}, {corpus.features}]"
                )
            fh.write(struct.pack("<IBB", rec.id, rec.label, _CLASS_CODE[rec.artifact_class]))
            fh.write(np.ascontiguousarray(rec.features, dtype="<f4").tobytes())


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CorpusFormatError(f"truncated corpus: wanted {n} bytes at offset {off}")
        piece = view[off:off + n]
        off += n
        return piece

    if bytes(take(4)) != MAGIC:
        raise CorpusFormatError("bad magic: not a SPFB corpus file")
    version, num_records, frames, features = struct.unpack("<HIII", take(14))
    if version != VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    records = []
    for _ in range(num_records):
        rid, label, class_code = struct.unpack("<IBB", take(6))
        if class_code >= len(ARTIFACT_CLASSES):
            raise CorpusFormatError(f"record {rid}: unknown artifact class code {class_code}")
        data = np.frombuffer(take(frames * features * 4), dtype="<f4")
        records.append(
            SpoofRecord(rid, int(label), ARTIFACT_CLASSES[class_code],
                        data.reshape(frames, features).copy())
        )
    if off != len(view):
        raise CorpusFormatError(f"trailing bytes after last record: {len(view) - off}")
    return Corpus(records, frames, features)


def expected_file_size(spec: CorpusSpec) -> int:
    header = 4 + 2 + 4 + 4 + 4
    per_record = 4 + 1 + 1 + spec.frames * spec.features * 4
    return header + spec.num_records * per_record


def mixed_artifact_spec(num_records: int = 400, seed: int = 7, **overrides) -> CorpusSpec:
    """The default benchmark: half bonafide, spoofs split across scales."""
    return replace(CorpusSpec(seed=seed, num_records=num_records), **overrides)
