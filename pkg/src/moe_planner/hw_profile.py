"""Hardware description and per-module latency tables.

The two-level memory hierarchy (GPU + host, joined by separate HtoD/DtoH
links) is captured by ``HardwareProfile``.  Per-module latency as a function
of (tokens, context length) comes from ``LatencyTable`` objects, which are
either ingested from a profiling document or synthesized from a roofline
model: ``overhead + max(flops / peak_flops, bytes / mem_bandwidth)``.

The synthetic curves reproduce the saturating achieved-FLOPs shape: small
batches are overhead/memory dominated, large batches approach peak.
"""

from __future__ import annotations

import enum
import json
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .model_catalog import ModelSpec


class ProfileError(ValueError):
    """Base class for profile validation failures."""


class SchemaError(ProfileError):
    pass


class NonMonotoneLatency(ProfileError):
    def __init__(self, module_kind: str, first, second):
        super().__init__(
            f"latency table for {module_kind!r} not non-decreasing in tokens: "
            f"{first} then {second}"
        )
        self.module_kind = module_kind
        self.pair = (first, second)


class UnknownModuleKind(KeyError):
    def __init__(self, module_kind: str):
        super().__init__(f"no latency table for module kind {module_kind!r}")
        self.module_kind = module_kind


class Unreachable(RuntimeError):
    """Raised when a utilization target is never met within the scan range."""


class ModuleKind(str, enum.Enum):
    PRE_ATTENTION = "pre_attention"
    ATTN_MECH_GPU = "attention_mechanism_gpu"
    ATTN_MECH_CPU = "attention_mechanism_cpu"
    POST_ATTENTION = "post_attention"
    EXPERT = "expert"
    ROUTER = "router"


@dataclass(frozen=True)
class Component:
    """One priced hardware component (for the cost model)."""

    name: str
    power_watts: float
    price: float


@dataclass(frozen=True)
class HardwareProfile:
    """Capacities, link bandwidths, and compute rates of one machine.

    ``cpu_attn_flops == 0`` means CPU attention is unavailable.  Units are
    bytes, bytes/s, FLOP/s, seconds (SI throughout).
    """

    m_g: int
    m_c: int
    bw_htod: float
    bw_dtoh: float
    gpu_peak_flops: float
    gpu_mem_bw: float
    gpu_launch_overhead: float
    cpu_attn_flops: float
    components: tuple[Component, ...] = ()

    def __post_init__(self) -> None:
        if self.m_g >= self.m_c:
            raise ProfileError(
                f"offloading premise violated: m_g={self.m_g} >= m_c={self.m_c}"
            )
        for name in ("bw_htod", "bw_dtoh", "gpu_peak_flops", "gpu_mem_bw"):
            if getattr(self, name) <= 0:
                raise ProfileError(f"{name} must be positive")
        if self.gpu_launch_overhead < 0:
            raise ProfileError("gpu_launch_overhead must be >= 0")
        if self.cpu_attn_flops < 0:
            raise ProfileError("cpu_attn_flops must be >= 0")


@dataclass(frozen=True)
class LatencyTable:
    """Measured or synthesized latency samples for one module kind.

    Entries are (tokens, context_len, latency_seconds), kept sorted by
    (context_len, tokens).  For each context level the latency must be
    non-decreasing in tokens and at least two token points must exist.
    """

    module_kind: ModuleKind
    entries: tuple[tuple[int, int, float], ...]
    _by_context: dict[int, tuple[tuple[int, float], ...]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        entries = tuple(sorted(self.entries, key=lambda e: (e[1], e[0])))
        object.__setattr__(self, "entries", entries)
        by_context: dict[int, list[tuple[int, float]]] = {}
        for tokens, context_len, latency in entries:
            if tokens < 1:
                raise ProfileError(f"token count must be >= 1, got {tokens}")
            if latency <= 0:
                raise ProfileError(f"latency must be positive, got {latency}")
            by_context.setdefault(context_len, []).append((tokens, latency))
        for context_len, points in by_context.items():
            if len({t for t, _ in points}) < 2:
                raise ProfileError(
                    f"table for {self.module_kind} needs >= 2 distinct token "
                    f"counts at context {context_len}"
                )
            for prev, cur in zip(points, points[1:]):
                if cur[1] < prev[1]:
                    raise NonMonotoneLatency(
                        str(self.module_kind.value), prev, cur
                    )
        object.__setattr__(
            self,
            "_by_context",
            {c: tuple(pts) for c, pts in by_context.items()},
        )

    @property
    def context_levels(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_context))

    def points_at(self, context_len: int) -> tuple[tuple[int, float], ...]:
        return self._by_context[context_len]


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def ingest_profile(
    document: Mapping[str, Any],
) -> tuple[HardwareProfile, list[LatencyTable]]:
    """Parse a profiling document: {"hardware": {...}, "latency_tables": [...]}.

    Rejects malformed documents (SchemaError) and non-monotone tables
    (NonMonotoneLatency).
    """
    if "hardware" not in document:
        raise SchemaError("document missing 'hardware' object")
    hw_doc = document["hardware"]
    if not isinstance(hw_doc, Mapping):
        raise SchemaError("'hardware' must be an object")
    required = (
        "m_g",
        "m_c",
        "bw_htod",
        "bw_dtoh",
        "gpu_peak_flops",
        "gpu_mem_bw",
        "gpu_launch_overhead",
        "cpu_attn_flops",
    )
    missing = [k for k in required if k not in hw_doc]
    if missing:
        raise SchemaError(f"hardware object missing fields: {missing}")
    components = tuple(
        Component(c["name"], c["power_watts"], c["price"])
        for c in hw_doc.get("components", ())
    )
    try:
        hw = HardwareProfile(
            m_g=hw_doc["m_g"],
            m_c=hw_doc["m_c"],
            bw_htod=hw_doc["bw_htod"],
            bw_dtoh=hw_doc["bw_dtoh"],
            gpu_peak_flops=hw_doc["gpu_peak_flops"],
            gpu_mem_bw=hw_doc["gpu_mem_bw"],
            gpu_launch_overhead=hw_doc["gpu_launch_overhead"],
            cpu_attn_flops=hw_doc["cpu_attn_flops"],
            components=components,
        )
    except ProfileError:
        raise
    except (TypeError, KeyError) as exc:
        raise SchemaError(f"malformed hardware object: {exc}") from exc

    tables_doc = document.get("latency_tables", [])
    if not isinstance(tables_doc, Sequence):
        raise SchemaError("'latency_tables' must be an array")
    tables = []
    for tdoc in tables_doc:
        try:
            kind = ModuleKind(tdoc["module_kind"])
            entries = tuple(
                (int(t), int(c), float(lat)) for t, c, lat in tdoc["entries"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed latency table: {exc}") from exc
        tables.append(LatencyTable(kind, entries))
    return hw, tables


def ingest_profile_file(path: str) -> tuple[HardwareProfile, list[LatencyTable]]:
    with open(path, "r", encoding="utf-8") as f:
        return ingest_profile(json.load(f))


def profile_to_document(
    hw: HardwareProfile, tables: Iterable[LatencyTable]
) -> dict[str, Any]:
    return {
        "hardware": {
            "m_g": hw.m_g,
            "m_c": hw.m_c,
            "bw_htod": hw.bw_htod,
            "bw_dtoh": hw.bw_dtoh,
            "gpu_peak_flops": hw.gpu_peak_flops,
            "gpu_mem_bw": hw.gpu_mem_bw,
            "gpu_launch_overhead": hw.gpu_launch_overhead,
            "cpu_attn_flops": hw.cpu_attn_flops,
            "components": [
                {"name": c.name, "power_watts": c.power_watts, "price": c.price}
                for c in hw.components
            ],
        },
        "latency_tables": [
            {
                "module_kind": t.module_kind.value,
                "entries": [list(e) for e in t.entries],
            }
            for t in tables
        ],
    }


# ---------------------------------------------------------------------------
# Module cost model (FLOPs and bytes touched), shared by the roofline
# synthesizer and the saturation analyses.
# ---------------------------------------------------------------------------

# Share of the affine attention base FLOPs (and weight bytes) attributed to
# the projection stages before vs after the mechanism: QKV projections vs
# output projection.  Roughly d*(d + 2*kv) vs d*d for common geometries.
PRE_ATTENTION_SHARE = 0.6
POST_ATTENTION_SHARE = 0.4


def module_flops(model: ModelSpec, kind: ModuleKind, tokens: int, context_len: int) -> float:
    if kind is ModuleKind.PRE_ATTENTION:
        return tokens * PRE_ATTENTION_SHARE * model.attn_flops_base
    if kind is ModuleKind.POST_ATTENTION:
        return tokens * POST_ATTENTION_SHARE * model.attn_flops_base
    if kind in (ModuleKind.ATTN_MECH_GPU, ModuleKind.ATTN_MECH_CPU):
        return tokens * model.attn_flops_per_context * context_len
    if kind is ModuleKind.EXPERT:
        return tokens * model.expert_flops_per_token
    if kind is ModuleKind.ROUTER:
        # one d x E GEMM per token
        return tokens * float(model.hidden_bytes_per_token) * model.experts_per_layer
    raise UnknownModuleKind(str(kind))


def module_bytes(model: ModelSpec, kind: ModuleKind, tokens: int, context_len: int) -> float:
    hidden = model.hidden_bytes_per_token
    if kind is ModuleKind.PRE_ATTENTION:
        return PRE_ATTENTION_SHARE * model.attention_weights_bytes + tokens * 3.0 * hidden
    if kind is ModuleKind.POST_ATTENTION:
        return POST_ATTENTION_SHARE * model.attention_weights_bytes + tokens * 2.0 * hidden
    if kind in (ModuleKind.ATTN_MECH_GPU, ModuleKind.ATTN_MECH_CPU):
        per_ctx = model.kv_bytes_per_token_layer + model.attn_activation_bytes_per_ctx_token
        return tokens * (context_len * per_ctx + 2.0 * hidden)
    if kind is ModuleKind.EXPERT:
        # non-offloading scenario: weights stream from GPU memory
        return model.expert_bytes + tokens * 2.0 * hidden
    if kind is ModuleKind.ROUTER:
        return model.experts_per_layer * hidden + tokens * 2.0 * hidden
    raise UnknownModuleKind(str(kind))


DEFAULT_TOKEN_GRID = tuple(2**i for i in range(16))  # 1 .. 32768
DEFAULT_CONTEXT_GRID = (128, 512, 2048, 8192)

# Module kinds whose latency does not depend on context; their tables carry a
# single context level of 0.
_CONTEXT_FREE_KINDS = (
    ModuleKind.PRE_ATTENTION,
    ModuleKind.POST_ATTENTION,
    ModuleKind.EXPERT,
    ModuleKind.ROUTER,
)


def synth_profile(
    hw: HardwareProfile,
    model: ModelSpec,
    token_grid: Sequence[int] = DEFAULT_TOKEN_GRID,
    context_grid: Sequence[int] = DEFAULT_CONTEXT_GRID,
) -> list[LatencyTable]:
    """Synthesize latency tables from the roofline model.

    GPU modules: ``launch_overhead + max(flops/peak, bytes/mem_bw)``.
    CPU attention: ``flops / cpu_attn_flops``; the table is omitted entirely
    when ``cpu_attn_flops == 0``.
    """
    tables: list[LatencyTable] = []
    for kind in _CONTEXT_FREE_KINDS:
        entries = tuple(
            (n, 0, gpu_module_latency(model, hw, kind, n, 0)) for n in token_grid
        )
        tables.append(LatencyTable(kind, entries))
    entries = tuple(
        (n, c, gpu_module_latency(model, hw, ModuleKind.ATTN_MECH_GPU, n, c))
        for c in context_grid
        for n in token_grid
    )
    tables.append(LatencyTable(ModuleKind.ATTN_MECH_GPU, entries))
    if hw.cpu_attn_flops > 0:
        entries = tuple(
            (
                n,
                c,
                module_flops(model, ModuleKind.ATTN_MECH_CPU, n, c) / hw.cpu_attn_flops,
            )
            for c in context_grid
            for n in token_grid
        )
        tables.append(LatencyTable(ModuleKind.ATTN_MECH_CPU, entries))
    return tables


def gpu_module_latency(
    model: ModelSpec, hw: HardwareProfile, kind: ModuleKind, tokens: int, context_len: int
) -> float:
    flops = module_flops(model, kind, tokens, context_len)
    nbytes = module_bytes(model, kind, tokens, context_len)
    return hw.gpu_launch_overhead + max(
        flops / hw.gpu_peak_flops, nbytes / hw.gpu_mem_bw
    )


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------

def _interp_tokens(points: Sequence[tuple[int, float]], tokens: int) -> float:
    """Piecewise-linear in tokens; extrapolate past the end with the last
    segment's slope; clamp below the first point."""
    ts = [p[0] for p in points]
    if tokens <= ts[0]:
        return points[0][1]
    if tokens >= ts[-1]:
        (t0, l0), (t1, l1) = points[-2], points[-1]
        slope = (l1 - l0) / (t1 - t0)
        return l1 + slope * (tokens - ts[-1])
    i = bisect_left(ts, tokens)
    if ts[i] == tokens:
        return points[i][1]
    (t0, l0), (t1, l1) = points[i - 1], points[i]
    frac = (tokens - t0) / (t1 - t0)
    return l0 + frac * (l1 - l0)


def latency_lookup(
    tables: Sequence[LatencyTable],
    module_kind: ModuleKind | str,
    tokens: int,
    context_len: int,
) -> float:
    """Interpolated latency for ``tokens`` at ``context_len``.

    Linear in tokens at the two bracketing context levels, then linear in
    context; contexts outside the profiled range are clamped to the nearest
    level.
    """
    if tokens < 1:
        raise ValueError(f"tokens must be >= 1, got {tokens}")
    kind = ModuleKind(module_kind)
    table = next((t for t in tables if t.module_kind is kind), None)
    if table is None:
        raise UnknownModuleKind(kind.value)
    levels = table.context_levels
    if context_len <= levels[0]:
        return _interp_tokens(table.points_at(levels[0]), tokens)
    if context_len >= levels[-1]:
        return _interp_tokens(table.points_at(levels[-1]), tokens)
    i = bisect_left(levels, context_len)
    if levels[i] == context_len:
        return _interp_tokens(table.points_at(levels[i]), tokens)
    c0, c1 = levels[i - 1], levels[i]
    l0 = _interp_tokens(table.points_at(c0), tokens)
    l1 = _interp_tokens(table.points_at(c1), tokens)
    frac = (context_len - c0) / (c1 - c0)
    return l0 + frac * (l1 - l0)


MAX_SATURATION_TOKENS = 2**20


def saturation_batch(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    module_kind: ModuleKind | str,
    context_len: int,
    utilization_target: float,
) -> int:
    """Smallest token count whose achieved FLOP rate reaches the target
    fraction of GPU peak.

    Scans doubling token counts, then bisects down to the threshold.  Raises
    Unreachable if the target is not met by 2**20 tokens.
    """
    if not 0 < utilization_target <= 1:
        raise ValueError("utilization_target must be in (0, 1]")
    kind = ModuleKind(module_kind)

    def achieved(n: int) -> float:
        flops = module_flops(model, kind, n, context_len)
        return flops / latency_lookup(tables, kind, n, context_len)

    target = utilization_target * hw.gpu_peak_flops
    hi = 1
    while achieved(hi) < target:
        hi *= 2
        if hi > MAX_SATURATION_TOKENS:
            raise Unreachable(
                f"{kind.value} never reaches {utilization_target:.0%} of peak "
                f"within {MAX_SATURATION_TOKENS} tokens"
            )
    lo = hi // 2 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if achieved(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return hi


def expert_fetch_seconds(model: ModelSpec, hw: HardwareProfile) -> float:
    return model.expert_bytes / hw.bw_htod


def expert_idle_fraction(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    tokens: int,
) -> float:
    """GPU idle share when an expert's compute must hide the next expert's
    weight fetch: max(0, 1 - compute/transfer)."""
    compute = latency_lookup(tables, ModuleKind.EXPERT, tokens, 0)
    transfer = expert_fetch_seconds(model, hw)
    return max(0.0, 1.0 - compute / transfer)


def zero_idle_expert_tokens(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
) -> int:
    """Smallest per-expert token count whose compute time covers the fetch of
    the next expert's weights over the HtoD link."""
    transfer = expert_fetch_seconds(model, hw)

    def covered(n: int) -> bool:
        return latency_lookup(tables, ModuleKind.EXPERT, n, 0) >= transfer

    hi = 1
    while not covered(hi):
        hi *= 2
        if hi > MAX_SATURATION_TOKENS:
            raise Unreachable("expert compute never covers the weight fetch")
    lo = hi // 2 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if covered(mid):
            hi = mid
        else:
            lo = mid + 1
    return hi


# ---------------------------------------------------------------------------
# Built-in profiles (frozen fixtures)
# ---------------------------------------------------------------------------

def a5000_like(host_bytes: int = 256_000_000_000) -> HardwareProfile:
    """A5000-shaped workstation profile used by the frozen fixtures.

    24 GB GPU, PCIe 4.0 links at 32 GB/s each way, 768 GB/s GPU memory
    bandwidth.  Peak tensor throughput and the launch-overhead constant are
    fitted so the synthetic expert curves saturate near 2**10 tokens and the
    zero-idle batch lands near 2**11; they are fixture parameters, not
    vendor measurements.
    """
    return HardwareProfile(
        m_g=24_000_000_000,
        m_c=host_bytes,
        bw_htod=32.0e9,
        bw_dtoh=32.0e9,
        gpu_peak_flops=64.0e12,
        gpu_mem_bw=768.0e9,
        gpu_launch_overhead=57.0e-6,
        cpu_attn_flops=100.0e9,
        components=(
            Component("1xNVIDIA-A5000", 200.0, 2.5),
            Component("1xAMD-7453", 100.0, 1.2),
            Component("512GB Host", 80.0, 1.1),
        ),
    )


def tiny_test_hw() -> HardwareProfile:
    """Desk-scale companion to the tiny-test model preset."""
    return HardwareProfile(
        m_g=16_000_000,
        m_c=64_000_000,
        bw_htod=1.0e9,
        bw_dtoh=1.0e9,
        gpu_peak_flops=100.0e9,
        gpu_mem_bw=20.0e9,
        gpu_launch_overhead=20.0e-6,
        cpu_attn_flops=10.0e9,
    )


BUILTIN_PROFILES = {
    "a5000-256": lambda: a5000_like(256_000_000_000),
    "a5000-512": lambda: a5000_like(512_000_000_000),
    "tiny-test": tiny_test_hw,
}


def builtin_profile(name: str) -> HardwareProfile:
    try:
        return BUILTIN_PROFILES[name]()
    except KeyError:
        raise KeyError(
            f"unknown builtin profile {name!r}; available: "
            f"{', '.join(sorted(BUILTIN_PROFILES))}"
        ) from None
