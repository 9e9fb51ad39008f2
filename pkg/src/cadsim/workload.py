"""Document-length distributions, batch sampling, and sequential token placement."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .core import Chunk, ConfigError, Document, Segment, documents_from_lengths


class DistributionKind(str, enum.Enum):
    PRETRAIN_UPSAMPLED = "pretrain_upsampled"
    PROLONG_LIKE = "prolong_like"
    UNIFORM = "uniform"
    FIXED = "fixed"
    CUSTOM_HISTOGRAM = "custom_histogram"


@dataclass(frozen=True)
class LengthDistribution:
    """Document length generator settings.

    Defaults: the base pretrain shape is a log-normal with ``mu=7.0`` and
    ``sigma=1.5`` (median about 1.1K tokens) truncated to ``max_doc_len``.
    Upsampling drops each document shorter than ``min_len_threshold`` with
    probability ``drop_probability``. The ProLong-like mix replaces a
    ``long_weight`` share of draws with a log-uniform length in
    ``[max_doc_len * long_floor_fraction, max_doc_len]``.
    """

    kind: DistributionKind = DistributionKind.PRETRAIN_UPSAMPLED
    max_doc_len: int = 131072
    min_len_threshold: int = 4096
    seed: int = 0
    drop_probability: float = 0.9
    mu: float = 7.0
    sigma: float = 1.5
    long_weight: float = 0.25
    long_floor_fraction: float = 1 / 16
    min_len: int = 1
    fixed_len: int | None = None
    hist_lengths: tuple[int, ...] = ()
    hist_probs: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", DistributionKind(self.kind))
        if self.max_doc_len < 1:
            raise ConfigError("max_doc_len must be >= 1")
        if self.min_len_threshold < 0:
            raise ConfigError("min_len_threshold must be >= 0")
        if not 0 <= self.drop_probability <= 1:
            raise ConfigError("drop_probability must lie in [0, 1]")
        if self.drop_probability == 1 and self.min_len_threshold > self.max_doc_len:
            raise ConfigError("threshold above max_doc_len with certain drop rejects every document")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not 0 <= self.long_weight <= 1:
            raise ConfigError("long_weight must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_doc_len:
            raise ConfigError("min_len must lie in [1, max_doc_len]")
        if self.kind is DistributionKind.FIXED:
            length = self.max_doc_len if self.fixed_len is None else self.fixed_len
            if not 1 <= length <= self.max_doc_len:
                raise ConfigError("fixed_len must lie in [1, max_doc_len]")
        if self.kind is DistributionKind.CUSTOM_HISTOGRAM:
            if not self.hist_lengths or len(self.hist_lengths) != len(self.hist_probs):
                raise ConfigError("custom histogram needs matching non-empty lengths and probabilities")
            if any(not 1 <= x <= self.max_doc_len for x in self.hist_lengths):
                raise ConfigError("histogram lengths must lie in [1, max_doc_len]")
            if any(p < 0 for p in self.hist_probs) or sum(self.hist_probs) <= 0:
                raise ConfigError("histogram probabilities must be non-negative with positive sum")
        object.__setattr__(self, "hist_lengths", tuple(int(x) for x in self.hist_lengths))
        object.__setattr__(self, "hist_probs", tuple(float(x) for x in self.hist_probs))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LengthDistribution":
        data = dict(data)
        path = data.pop("histogram_csv", None)
        if path is not None:
            lengths, probs = load_histogram_csv(path)
            data.setdefault("kind", DistributionKind.CUSTOM_HISTOGRAM.value)
            data["hist_lengths"], data["hist_probs"] = lengths, probs
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown distribution fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["hist_lengths"] = list(self.hist_lengths)
        out["hist_probs"] = list(self.hist_probs)
        return out


def load_histogram_csv(path) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Read ``length,probability`` rows (header required)."""
    lengths, probs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lengths.append(int(row["length"]))
            probs.append(float(row["probability"]))
    return tuple(lengths), tuple(probs)


class LengthSampler:
    """Stateful draw stream for one distribution; same seed, same stream."""

    _BLOCK = 512

    def __init__(self, dist: LengthDistribution, seed: int | None = None):
        self.dist = dist
        self.rng = np.random.default_rng(dist.seed if seed is None else seed)
        self._buffer: list[int] = []
        if dist.kind is DistributionKind.CUSTOM_HISTOGRAM:
            p = np.array(dist.hist_probs)
            self._hist_p = p / p.sum()

    def _lognormal(self, n: int) -> np.ndarray:
        d = self.dist
        out = np.empty(0, dtype=np.int64)
        for _ in range(64):
            x = np.ceil(self.rng.lognormal(d.mu, d.sigma, size=n)).astype(np.int64)
            out = np.concatenate((out, x[x <= d.max_doc_len]))
            if len(out) >= n:
                return np.maximum(out[:n], 1)
        # almost all mass sits above the cap: clip what is left
        x = np.ceil(self.rng.lognormal(d.mu, d.sigma, size=n - len(out))).astype(np.int64)
        return np.clip(np.concatenate((out, x)), 1, d.max_doc_len)

    def _block(self) -> np.ndarray:
        d, n = self.dist, self._BLOCK
        kind = d.kind
        if kind is DistributionKind.FIXED:
            return np.full(n, d.max_doc_len if d.fixed_len is None else d.fixed_len, dtype=np.int64)
        if kind is DistributionKind.UNIFORM:
            return self.rng.integers(d.min_len, d.max_doc_len, size=n, endpoint=True)
        if kind is DistributionKind.CUSTOM_HISTOGRAM:
            idx = self.rng.choice(len(d.hist_lengths), size=n, p=self._hist_p)
            return np.array(d.hist_lengths, dtype=np.int64)[idx]
        x = self._lognormal(n)
        if kind is DistributionKind.PROLONG_LIKE:
            lo = max(1.0, d.max_doc_len * d.long_floor_fraction)
            long = np.exp(self.rng.uniform(math.log(lo), math.log(d.max_doc_len), size=n))
            pick = self.rng.random(n) < d.long_weight
            x = np.where(pick, np.clip(np.ceil(long), 1, d.max_doc_len).astype(np.int64), x)
        if d.min_len_threshold > 0 and d.drop_probability > 0:
            drop = (x < d.min_len_threshold) & (self.rng.random(n) < d.drop_probability)
            x = x[~drop]
        return x

    def draw(self) -> int:
        while not self._buffer:
            self._buffer = self._block().tolist()[::-1]
        return self._buffer.pop()

    def sample(self, n: int) -> np.ndarray:
        return np.array([self.draw() for _ in range(n)], dtype=np.int64)


def base_distribution(dist: LengthDistribution) -> LengthDistribution:
    """The same distribution with upsampling switched off."""
    return replace(dist, min_len_threshold=0)


def sample_lengths(dist: LengthDistribution, total_tokens: int, seed: int | None = None) -> list[int]:
    """Draw lengths until they reach ``total_tokens``; the last one is cut to fit."""
    if total_tokens < 1:
        raise ConfigError("total_tokens must be >= 1")
    sampler = LengthSampler(dist, seed)
    lengths, acc = [], 0
    while acc < total_tokens:
        x = min(sampler.draw(), total_tokens - acc)
        lengths.append(x)
        acc += x
    return lengths


def sample_batch(dist: LengthDistribution, total_tokens: int, seed: int | None = None) -> list[Document]:
    return documents_from_lengths(sample_lengths(dist, total_tokens, seed))


def _sequential(documents: Sequence[Document], capacity: int, count: int) -> list[Chunk]:
    total = sum(d.length for d in documents)
    if capacity < 1 or count < 1:
        raise ConfigError("chunk size and count must be >= 1")
    if total != capacity * count:
        raise ConfigError(f"documents hold {total} tokens but {count} x {capacity} = {capacity * count} are required")
    chunks: list[list[Segment]] = [[] for _ in range(count)]
    device, room = 0, capacity
    for doc in documents:
        pos = 0
        while pos < doc.length:
            take = min(room, doc.length - pos)
            chunks[device].append(Segment(doc.id, pos, pos + take))
            pos += take
            room -= take
            if room == 0 and device < count - 1:
                device, room = device + 1, capacity
    return [Chunk(i, tuple(segs)) for i, segs in enumerate(chunks)]


def pack_fixed(documents: Sequence[Document], tokens_per_chunk: int, num_chunks: int) -> list[Chunk]:
    """First-fit sequential packing into equal chunks, splitting documents at boundaries."""
    return _sequential(documents, tokens_per_chunk, num_chunks)


def place_sequential(documents: Sequence[Document], num_devices: int, tokens_per_device: int) -> list[Chunk]:
    """Give each device the next ``tokens_per_device`` tokens of the document stream."""
    return _sequential(documents, tokens_per_device, num_devices)


def split_chunk(chunk: Chunk, parts: int = 2) -> list[Chunk]:
    """Cut a chunk into ``parts`` consecutive pieces of (nearly) equal token count."""
    total = chunk.total_tokens
    bounds = [total * k // parts for k in range(parts + 1)]
    pieces: list[list[Segment]] = [[] for _ in range(parts)]
    offset = 0
    for seg in chunk.segments:
        for k in range(parts):
            lo = max(bounds[k], offset)
            hi = min(bounds[k + 1], offset + seg.length)
            if lo < hi:
                pieces[k].append(Segment(seg.doc_id, seg.start + lo - offset, seg.start + hi - offset))
        offset += seg.length
    return [Chunk(chunk.device, tuple(p)) for p in pieces]


def write_batch_csv(batches: Sequence[Sequence[Document]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "doc_id", "length"])
        for b, docs in enumerate(batches):
            for d in docs:
                writer.writerow([b, d.id, d.length])


def length_stats(lengths: Sequence[int]) -> dict[str, float]:
    arr = np.asarray(lengths, dtype=float)
    return {"mean": float(arr.mean()), "p50": float(np.percentile(arr, 50)), "p99": float(np.percentile(arr, 99))}
