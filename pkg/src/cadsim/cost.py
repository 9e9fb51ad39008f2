"""Analytical FLOPs/memory formulas and the CA kernel latency profiler."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ClusterConfig, Chunk, ConfigError, DomainError, Item, Layout, ModelConfig


class ExtrapolationError(DomainError):
    """Lookup outside the profiled grid in a region that is not saturated."""


def linear_flops_per_token(config: ModelConfig) -> int:
    """Context-independent FLOPs per token for one layer.

    Q and O projections map h -> h, K and V map h -> h_kv, and the gated MLP
    has three h <-> i matmuls; each multiply-add counts as 2 FLOPs.
    """
    h, hkv, i = config.hidden, config.kv_hidden, config.ffn_intermediate
    return 2 * h * (2 * h + hkv + 3 * i)


@dataclass(frozen=True)
class CostCoefficients:
    """``FLOPs(l) = alpha_ca * l**2 + beta_linear * l`` and ``M(l) = gamma_mem * l``."""

    alpha_ca: float
    beta_linear: float
    gamma_mem: float

    def __post_init__(self):
        for name in ("alpha_ca", "beta_linear", "gamma_mem"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_model(cls, config: ModelConfig, layers: int = 1) -> "CostCoefficients":
        """Coefficients for ``layers`` transformer layers (one by default).

        A causal document of ``l`` tokens has ``l**2 / 2`` query-key pairs, each
        costing ``4 * hidden`` FLOPs across the score and PV matmuls, so the
        ``l**2`` coefficient is ``2 * hidden``. Activation bytes per token count
        the tensors kept for backward: layer input, Q/K/V, attention output,
        MLP input and the three MLP intermediates.
        """
        h, hkv, i = config.hidden, config.kv_hidden, config.ffn_intermediate
        gamma = (4 * h + 2 * hkv + 3 * i) * config.bytes_per_element
        return cls(
            alpha_ca=2 * h * layers,
            beta_linear=linear_flops_per_token(config) * layers,
            gamma_mem=gamma * layers,
        )


def causal_pair_work(n_q: int, n_kv: int) -> int:
    if n_q < 1 or n_kv < n_q:
        raise DomainError(f"need 1 <= n_q <= n_kv, got n_q={n_q}, n_kv={n_kv}")
    return n_q * (2 * n_kv - n_q)


def ca_flops(item: Item, coeff: CostCoefficients):
    """Core-attention FLOPs of an item; a whole ``l``-token document costs ``alpha * l**2``.

    Uses the continuous form ``n_q * (2 * n_kv - n_q)``. The exact causal count
    is ``n_q * (2 * n_kv - n_q + 1)``; the gap is below ``1 / n_kv`` relative.
    """
    return coeff.alpha_ca * item.pair_work()


def padded_pair_work(item: Item, tile_size: int) -> int:
    """Pair work with each query range shorter than a tile padded to one tile."""
    total = 0
    for start, end in item.ranges():
        n_q = max(end - start, tile_size)
        n_kv = max(end, n_q)
        total += n_q * (2 * n_kv - n_q)
    return total


def balance_conditions(chunk_a, chunk_b) -> tuple[bool, bool]:
    """Whether two chunks match in total tokens and in the sum of squared lengths."""
    la, lb = _lengths(chunk_a), _lengths(chunk_b)
    return sum(la) == sum(lb), sum(x * x for x in la) == sum(x * x for x in lb)


def _lengths(chunk) -> list[int]:
    if isinstance(chunk, Chunk):
        return chunk.lengths
    return [int(x) for x in chunk]


def activation_memory(chunk, coeff: CostCoefficients):
    """Bytes for a chunk, a list of document lengths, or a bare token count."""
    tokens = int(chunk) if isinstance(chunk, (int, np.integer)) else sum(_lengths(chunk))
    return coeff.gamma_mem * tokens


def ca_time(item: Item, coeff: CostCoefficients, cluster: ClusterConfig, grid: "ProfilerGrid | None" = None) -> float:
    """Seconds to run one CA task, analytic unless a measured grid is supplied."""
    if grid is not None:
        return sum(profile_lookup(grid, e - s, e) for s, e in item.ranges())
    work = padded_pair_work(item, cluster.tile_size)
    return coeff.alpha_ca * work / (cluster.mfu_attention * cluster.peak_flops)


def ci_time(tokens: int, coeff: CostCoefficients, cluster: ClusterConfig) -> float:
    return coeff.beta_linear * tokens / (cluster.mfu_linear * cluster.peak_flops)


@dataclass(frozen=True, eq=False)
class ProfilerGrid:
    """Measured (or synthesized) CA latency over query/KV lengths.

    ``latency[i, j]`` is the time for ``q_points[i]`` queries against
    ``kv_points[j]`` keys (with ``kv`` raised to at least ``q``).
    """

    q_points: tuple[int, ...]
    kv_points: tuple[int, ...]
    latency: np.ndarray
    alpha: float
    tile_size: int = 128
    saturation_fraction: float = 0.98
    peak_throughput: float = field(default=0.0)

    def __post_init__(self):
        lat = np.array(self.latency, dtype=float)
        if lat.shape != (len(self.q_points), len(self.kv_points)):
            raise ConfigError(f"latency shape {lat.shape} does not match grid axes")
        if list(self.q_points) != sorted(set(self.q_points)) or list(self.kv_points) != sorted(set(self.kv_points)):
            raise ConfigError("grid points must be strictly increasing")
        if np.any(lat <= 0):
            raise ConfigError("latencies must be strictly positive")
        if np.any(np.diff(lat, axis=0) < 0) or np.any(np.diff(lat, axis=1) < 0):
            raise ConfigError("latencies must be monotone non-decreasing in both axes")
        lat.setflags(write=False)
        object.__setattr__(self, "latency", lat)
        flops = self._flops_matrix()
        throughput = flops / lat
        if not self.peak_throughput:
            object.__setattr__(self, "peak_throughput", float(throughput.max()))
        saturated = throughput >= self.saturation_fraction * self.peak_throughput
        saturated.setflags(write=False)
        object.__setattr__(self, "_saturated", saturated)

    def _flops_matrix(self) -> np.ndarray:
        q = np.array(self.q_points, dtype=float)[:, None]
        kv = np.maximum(np.array(self.kv_points, dtype=float)[None, :], q)
        return self.alpha * q * (2 * kv - q)

    def flops(self, n_q: float, n_kv: float) -> float:
        n_kv = max(n_kv, n_q)
        return self.alpha * n_q * (2 * n_kv - n_q)

    def is_saturated(self, i: int, j: int) -> bool:
        return bool(self._saturated[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q", "kv", "latency_s"])
            for i, q in enumerate(self.q_points):
                for j, kv in enumerate(self.kv_points):
                    writer.writerow([q, kv, repr(float(self.latency[i, j]))])

    @classmethod
    def from_csv(cls, path, alpha: float, tile_size: int = 128) -> "ProfilerGrid":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["q"]), int(row["kv"]), float(row["latency_s"])))
        qs = sorted({r[0] for r in rows})
        kvs = sorted({r[1] for r in rows})
        lat = np.full((len(qs), len(kvs)), np.nan)
        qi = {q: i for i, q in enumerate(qs)}
        ki = {kv: j for j, kv in enumerate(kvs)}
        for q, kv, t in rows:
            lat[qi[q], ki[kv]] = t
        if np.isnan(lat).any():
            raise ConfigError(f"{path}: grid is missing (q, kv) combinations")
        return cls(tuple(qs), tuple(kvs), lat, alpha=alpha, tile_size=tile_size)


def _bracket(points: Sequence[int], x: float) -> tuple[int, float]:
    """Lower cell index and the fractional offset of ``x`` inside that cell."""
    if x <= points[0]:
        return 0, 0.0
    i = bisect.bisect_right(points, x) - 1
    i = min(i, len(points) - 2)
    lo, hi = points[i], points[i + 1]
    return i, (x - lo) / (hi - lo)


def profile_lookup(grid: ProfilerGrid, n_q: int, n_kv: int) -> float:
    """Predicted CA latency in seconds for ``n_q`` queries over ``n_kv`` context tokens.

    Queries shorter than a tile are charged as a full tile. Inside cells whose
    four corners run at peak throughput the latency is FLOPs over that peak;
    elsewhere it is bilinear over the four surrounding grid points.
    """
    if n_q < 1 or n_kv < 1:
        raise DomainError(f"n_q and n_kv must be >= 1, got ({n_q}, {n_kv})")
    q = max(n_q, grid.tile_size)
    kv = max(n_kv, q)
    qs, kvs = grid.q_points, grid.kv_points
    outside = q > qs[-1] or kv > kvs[-1]
    i, fq = _bracket(qs, min(q, qs[-1]))
    j, fk = _bracket(kvs, min(kv, kvs[-1]))
    if len(qs) == 1:
        i, fq = 0, 0.0
    if len(kvs) == 1:
        j, fk = 0, 0.0
    i1 = min(i + 1, len(qs) - 1)
    j1 = min(j + 1, len(kvs) - 1)
    corners = ((i, j), (i1, j), (i, j1), (i1, j1))
    if all(grid.is_saturated(a, b) for a, b in corners):
        return grid.flops(q, kv) / grid.peak_throughput
    if outside:
        raise ExtrapolationError(
            f"({n_q}, {n_kv}) lies beyond the profiled grid and the edge is not saturated"
        )
    lat = grid.latency
    low = lat[i, j] * (1 - fk) + lat[i, j1] * fk
    high = lat[i1, j] * (1 - fk) + lat[i1, j1] * fk
    return float(low * (1 - fq) + high * fq)


def default_grid_points(tile_size: int = 128, ramp_tokens: int = 512, max_tokens: int = 2**19) -> list[int]:
    points = {tile_size // 8, tile_size // 4, tile_size // 2}
    step = max(tile_size // 4, 1)
    points.update(range(tile_size, ramp_tokens + 1, step))
    x = float(ramp_tokens)
    while x < max_tokens:
        x *= 2 ** 0.25
        points.add(min(int(round(x / step)) * step, max_tokens))
    points.add(max_tokens)
    return sorted(p for p in points if p >= 1)


def synth_grid(
    config: ModelConfig,
    cluster: ClusterConfig,
    coeff: CostCoefficients | None = None,
    *,
    ramp_tokens: int = 512,
    ramp_floor: float = 0.5,
    max_tokens: int = 2**19,
) -> ProfilerGrid:
    """Build a latency grid from the analytic model for machines without a GPU.

    Throughput sits at ``mfu_attention * peak_flops`` for query lengths of at
    least ``ramp_tokens`` and ramps linearly down to ``ramp_floor`` of that at
    zero; below one tile the query is padded to a full tile, so throughput
    falls in proportion to the wasted part of the tile.
    """
    coeff = coeff or CostCoefficients.from_model(config)
    tile = cluster.tile_size
    peak = cluster.mfu_attention * cluster.peak_flops
    points = default_grid_points(tile, ramp_tokens, max_tokens)
    lat = np.empty((len(points), len(points)))
    for a, q in enumerate(points):
        qp = max(q, tile)
        eff = 1.0 if qp >= ramp_tokens else ramp_floor + (1 - ramp_floor) * qp / ramp_tokens
        for b, kv in enumerate(points):
            kvp = max(kv, qp)
            lat[a, b] = coeff.alpha_ca * qp * (2 * kvp - qp) / (peak * eff)
    # the ramp can shave a little latency off as q approaches kv; keep the envelope
    lat = np.maximum.accumulate(np.maximum.accumulate(lat, axis=0), axis=1)
    return ProfilerGrid(
        tuple(points), tuple(points), lat, alpha=coeff.alpha_ca, tile_size=tile, peak_throughput=peak
    )
