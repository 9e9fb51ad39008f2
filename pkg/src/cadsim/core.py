"""Domain types shared across the simulator: configs, documents, chunks, items and CA tasks.

Everything here is an immutable value object. Token positions are absolute
offsets inside a document; ranges are half-open ``[start, end)``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Iterable, Mapping, Sequence


class ConfigError(ValueError):
    """Raised for invalid model, cluster, workload or experiment configuration."""


class DomainError(ValueError):
    """Raised when extents or parameters fall outside a formula's domain."""


class Layout(str, enum.Enum):
    CONTIGUOUS = "contiguous"
    HEAD_TAIL = "head_tail"


def _from_mapping(cls, data: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**dict(data))


@dataclass(frozen=True)
class ModelConfig:
    """Transformer dimensions relevant to FLOPs and communication.

    ``size_q``/``size_kv`` are bytes per token. When omitted they are derived
    from the dims; when given they must agree with the derivation.
    ``kv_counts_both`` selects whether ``size_kv`` covers K and V together
    (``2 * kv_hidden`` elements) or a single ``kv_hidden`` tensor.
    """

    num_layers: int
    hidden: int
    kv_hidden: int
    ffn_intermediate: int
    head_dim: int
    num_heads: int
    gqa_groups: int
    bytes_per_element: int = 2
    kv_counts_both: bool = True
    size_q: int | None = None
    size_kv: int | None = None

    def __post_init__(self):
        dims = {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "kv_hidden": self.kv_hidden,
            "ffn_intermediate": self.ffn_intermediate,
            "head_dim": self.head_dim,
            "num_heads": self.num_heads,
            "gqa_groups": self.gqa_groups,
            "bytes_per_element": self.bytes_per_element,
        }
        for name, value in dims.items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by num_heads={self.num_heads}")
        if self.num_heads % self.gqa_groups:
            raise ConfigError(
                f"num_heads={self.num_heads} not divisible by gqa_groups={self.gqa_groups}"
            )
        q, kv = self.expected_sizes()
        for name, expected in (("size_q", q), ("size_kv", kv)):
            stored = getattr(self, name)
            if stored is None:
                object.__setattr__(self, name, expected)
            elif stored != expected:
                raise ConfigError(f"{name}={stored} disagrees with dims (expected {expected})")

    def expected_sizes(self) -> tuple[int, int]:
        kv_factor = 2 if self.kv_counts_both else 1
        return (
            self.hidden * self.bytes_per_element,
            kv_factor * self.kv_hidden * self.bytes_per_element,
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            base = asdict(MODEL_PRESETS[_preset_key(preset)])
            # sizes are re-derived unless explicitly overridden
            base["size_q"] = base["size_kv"] = None
            base.update(data)
            data = base
        return _from_mapping(cls, data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def derive_sizes(config: ModelConfig) -> ModelConfig:
    """Return ``config`` with ``size_q``/``size_kv`` recomputed from its dims."""
    return replace(config, size_q=None, size_kv=None)


MODEL_PRESETS: dict[str, ModelConfig] = {
    "llama-8b": ModelConfig(
        num_layers=32, hidden=4096, kv_hidden=1024, ffn_intermediate=14336,
        head_dim=128, num_heads=32, gqa_groups=8,
    ),
    "llama-34b": ModelConfig(
        num_layers=48, hidden=8192, kv_hidden=2048, ffn_intermediate=22016,
        head_dim=128, num_heads=64, gqa_groups=16,
    ),
}


def _preset_key(name: str) -> str:
    key = name.lower()
    if key not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(MODEL_PRESETS)}")
    return key


GiB = 2**30


@dataclass(frozen=True)
class ClusterConfig:
    """Device counts, link bandwidth and compute roles.

    TP groups are collapsed into one logical device, so the scheduler and
    simulator see ``num_gpus // tp`` devices.
    """

    num_gpus: int
    tp: int = 1
    pp: int = 1
    dp: int = 1
    cp: int = 1
    interconnect_bandwidth: float = 50 * GiB  # bytes/s
    peak_flops: float = 990e12
    mfu_linear: float = 0.5
    mfu_attention: float = 0.5
    tile_size: int = 128
    memory_capacity: float = 140e9
    message_latency: float = 5e-6

    def __post_init__(self):
        for name in ("num_gpus", "tp", "pp", "dp", "cp", "tile_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.tp * self.pp * self.dp * self.cp > self.num_gpus:
            raise ConfigError(
                f"tp*pp*dp*cp = {self.tp * self.pp * self.dp * self.cp} exceeds num_gpus={self.num_gpus}"
            )
        if self.num_gpus % self.tp:
            raise ConfigError(f"num_gpus={self.num_gpus} not divisible by tp={self.tp}")
        if not self.interconnect_bandwidth > 0:
            raise ConfigError("interconnect_bandwidth must be > 0")
        if not self.peak_flops > 0:
            raise ConfigError("peak_flops must be > 0")
        for name in ("mfu_linear", "mfu_attention"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if self.memory_capacity <= 0 or self.message_latency < 0:
            raise ConfigError("memory_capacity must be > 0 and message_latency >= 0")

    @property
    def num_devices(self) -> int:
        return self.num_gpus // self.tp

    @property
    def fully_assigned(self) -> bool:
        return self.tp * self.pp * self.dp * self.cp == self.num_gpus

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterConfig":
        data = dict(data)
        for key in ("interconnect_bandwidth", "peak_flops", "memory_capacity"):
            if isinstance(data.get(key), str):
                data[key] = float(data[key])
        return _from_mapping(cls, data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Document:
    id: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError(f"document {self.id} has length {self.length} < 1")


@dataclass(frozen=True)
class Segment:
    doc_id: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Chunk:
    """Ordered document segments whose context-independent work runs on ``device``."""

    device: int
    segments: tuple[Segment, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def lengths(self) -> list[int]:
        return [s.length for s in self.segments]


@dataclass(frozen=True)
class Violation:
    doc_id: int
    position: int
    kind: str  # "gap" | "overlap" | "out_of_range" | "unknown_document"

    def __str__(self):
        return f"{self.kind} in document {self.doc_id} at token {self.position}"


def validate_chunking(documents: Iterable[Document], chunks: Iterable[Chunk]) -> list[Violation]:
    """Check that every document token lands in exactly one chunk segment.

    Returns an empty list when the chunking is a clean tiling.
    """
    lengths = {d.id: d.length for d in documents}
    by_doc: dict[int, list[Segment]] = {d: [] for d in lengths}
    violations: list[Violation] = []
    for chunk in chunks:
        for seg in chunk.segments:
            if seg.doc_id not in lengths:
                violations.append(Violation(seg.doc_id, seg.start, "unknown_document"))
                continue
            if seg.start < 0 or seg.end > lengths[seg.doc_id] or seg.start >= seg.end:
                violations.append(Violation(seg.doc_id, seg.start, "out_of_range"))
                continue
            by_doc[seg.doc_id].append(seg)
    for doc_id, segs in by_doc.items():
        cursor = 0
        for seg in sorted(segs, key=lambda s: (s.start, s.end)):
            if seg.start > cursor:
                violations.append(Violation(doc_id, cursor, "gap"))
            elif seg.start < cursor:
                violations.append(Violation(doc_id, seg.start, "overlap"))
            cursor = max(cursor, seg.end)
        if cursor < lengths[doc_id]:
            violations.append(Violation(doc_id, cursor, "gap"))
    return violations


@dataclass(frozen=True)
class Item:
    """A whole document or a shard of one; maps 1:1 onto a CA task.

    Contiguous items cover ``[q_start, q_end)`` and attend causally to
    ``[0, q_end)``. Head-tail items cover ``[q_start, q_end)`` plus the
    mirrored ``[L - q_end, L - q_start)`` where ``L = doc_length``;
    ``kv_extent`` then refers to the head half.
    """

    doc_id: int
    q_start: int
    q_end: int
    home_device: int
    layout: Layout = Layout.CONTIGUOUS
    doc_length: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if not 0 <= self.q_start < self.q_end:
            raise DomainError(f"invalid query range [{self.q_start}, {self.q_end})")
        if self.layout is Layout.HEAD_TAIL:
            if self.doc_length is None:
                raise DomainError("head_tail items need doc_length")
            if 2 * self.q_end > self.doc_length:
                raise DomainError(
                    f"head range ends at {self.q_end}, past the middle of a {self.doc_length}-token document"
                )
        elif self.doc_length is not None and self.q_end > self.doc_length:
            raise DomainError(f"query range ends at {self.q_end} > doc_length {self.doc_length}")

    @property
    def n_q(self) -> int:
        """Query tokens per half (the whole range for contiguous items)."""
        return self.q_end - self.q_start

    @property
    def kv_extent(self) -> int:
        return self.q_end

    @property
    def query_tokens(self) -> int:
        return self.n_q * (2 if self.layout is Layout.HEAD_TAIL else 1)

    @property
    def key(self) -> tuple[int, int]:
        return (self.doc_id, self.q_start)

    def ranges(self) -> list[tuple[int, int]]:
        if self.layout is Layout.HEAD_TAIL:
            L = self.doc_length
            head = (self.q_start, self.q_end)
            tail = (L - self.q_end, L - self.q_start)
            return [head] if head == tail else [head, tail]
        return [(self.q_start, self.q_end)]

    def pair_work(self) -> int:
        """Causal work in units of ``n_q * (2 * n_kv - n_q)`` summed over halves."""
        work = self.n_q * (2 * self.q_end - self.n_q)
        if self.layout is Layout.HEAD_TAIL:
            tail_kv = self.doc_length - self.q_start
            work += self.n_q * (2 * tail_kv - self.n_q)
        return work

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "q_start": self.q_start,
            "q_end": self.q_end,
            "home_device": self.home_device,
            "layout": self.layout.value,
            "doc_length": self.doc_length,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Item":
        return cls(**dict(data))


@dataclass(frozen=True)
class CATask:
    """An item bound to the attention server that will run it.

    ``comm_bytes`` counts Q and KV shipped to the server; ``return_bytes``
    counts the attention output sent back to the item's home device.
    """

    item: Item
    source_device: int
    assigned_server: int
    comm_bytes: int = 0
    return_bytes: int = 0
    flops: float = 0

    def __post_init__(self):
        local = self.assigned_server == self.source_device
        if local != (self.comm_bytes == 0):
            raise ConfigError(
                f"comm_bytes={self.comm_bytes} inconsistent with source {self.source_device} "
                f"-> server {self.assigned_server}"
            )

    @property
    def migrated(self) -> bool:
        return self.assigned_server != self.source_device

    def to_dict(self) -> dict[str, Any]:
        return {
            "item": self.item.to_dict(),
            "source_device": self.source_device,
            "assigned_server": self.assigned_server,
            "comm_bytes": self.comm_bytes,
            "return_bytes": self.return_bytes,
            "flops": self.flops,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CATask":
        data = dict(data)
        data["item"] = Item.from_dict(data["item"])
        return cls(**data)


def documents_from_lengths(lengths: Sequence[int], start_id: int = 0) -> list[Document]:
    return [Document(start_id + i, int(n)) for i, n in enumerate(lengths)]
