"""Streaming driver: grid -> pillar encoder -> backbone, one call per stride."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import oracle
from .backbone import Backbone, BackboneWeights, count_backbone_multiplies
from .canvas import FeatureCanvas
from .grid import ChangeMap, GridConfig, PillarGrid, count_ops, count_ops_full
from .pfn import EncoderWeights, scatter_changed
from .stream import Packet, packetize


class VerificationFailure(RuntimeError):
    """The incremental pipeline disagreed with the from-scratch reference."""

    def __init__(self, stride: int, layer: str, site, reason: str):
        self.stride, self.layer, self.site, self.reason = stride, layer, site, reason
        super().__init__(f"stride {stride}: layer {layer} at site {site}: {reason}")


@dataclass
class StrideMetrics:
    stride_index: int
    t_now: float
    points_in: int = 0
    points_inserted: int = 0
    points_evicted: int = 0
    dropped_oob: int = 0
    overflowed: int = 0
    window_points: int = 0
    active_sites: int = 0
    changed_sites: int = 0
    pfn_ops: int = 0
    pfn_ops_full: int = 0
    block_multiplies: list = field(default_factory=list)
    multiplies: int = 0
    multiplies_full: int = 0
    refreshed: bool = False
    grid_ns: int = 0
    pfn_ns: int = 0
    backbone_ns: int = 0
    total_ns: int = 0
    oracle_max_abs_diff: float | None = None
    oracle_max_rel_diff: float | None = None
    oracle_worst_layer: str | None = None
    soundness_violations: int | None = None
    grid_exact: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


WALL_CLOCK_FIELDS = ("grid_ns", "pfn_ns", "backbone_ns", "total_ns")


class StreamingPipeline:
    """Holds the grid, the pseudo-image canvas and the backbone state."""

    def __init__(self, cfg: GridConfig, encoder: EncoderWeights, weights: BackboneWeights | None,
                 dtype=np.float32, refresh_every: int = 0):
        if weights is not None and weights.spec.in_channels != encoder.channels:
            raise ValueError("backbone input channels must match the encoder's output channels")
        self.cfg = cfg
        self.encoder = encoder
        self.weights = weights
        self.dtype = np.dtype(dtype)
        self.refresh_every = refresh_every
        self.grid = PillarGrid(cfg)
        self.canvas = FeatureCanvas.zeros(encoder.channels, cfg.shape, dtype=self.dtype)
        self.backbone = Backbone(weights, cfg.shape, self.dtype) if weights is not None else None
        self.stride_index = 0

    def step(self, packet: Packet) -> StrideMetrics:
        self.stride_index += 1
        m = StrideMetrics(self.stride_index, float(packet.t_end), points_in=len(packet.points))
        cm = ChangeMap(self.cfg.shape)
        t0 = time.perf_counter_ns()
        report = self.grid.step(packet.points, packet.t_end, cm)
        t1 = time.perf_counter_ns()
        scatter_changed(self.grid, cm, self.encoder, self.canvas)
        t2 = time.perf_counter_ns()
        if self.backbone is not None:
            m.refreshed = bool(self.refresh_every) and self.stride_index % self.refresh_every == 0
            if m.refreshed:
                self.backbone.refresh(self.canvas)
            else:
                self.backbone.forward(self.canvas)
            counts = count_backbone_multiplies(self.backbone)
            m.block_multiplies = counts.per_block
            m.multiplies = counts.total
            m.multiplies_full = counts.full_total
        t3 = time.perf_counter_ns()
        m.points_inserted = report.inserted
        m.points_evicted = report.removed
        m.dropped_oob = report.dropped_oob
        m.overflowed = report.overflowed
        m.window_points = self.grid.point_count
        m.active_sites = self.grid.active_count
        m.changed_sites = cm.changed_count
        m.pfn_ops = count_ops(report)
        m.pfn_ops_full = count_ops_full(m.window_points, [m.window_points])
        m.grid_ns, m.pfn_ns, m.backbone_ns = t1 - t0, t2 - t1, t3 - t2
        m.total_ns = t3 - t0
        return m


class Verifier:
    """Compares every stride against a full recompute of the window.

    Checks the grid contents and the pseudo-image for exact equality, every
    backbone layer and the concat within ``tolerance`` (exactly on refresh
    strides when ``exact`` is set), and that every value differing between
    consecutive references sits under a set change bit.
    """

    def __init__(self, pipeline: StreamingPipeline, stream: np.ndarray, tolerance: float = 1e-4,
                 exact: bool = False):
        self.p = pipeline
        self.stream = stream
        self.tolerance = tolerance
        self.exact = exact
        self.prev = None

    def check(self, m: StrideMetrics) -> StrideMetrics:
        p = self.p
        pts = oracle.window_points(self.stream, m.t_now, p.cfg.window)
        lin, t, feats = oracle.rebin(pts, p.cfg)
        glin, gt, gfeats = p.grid.snapshot()
        m.grid_exact = bool(np.array_equal(lin, glin) and np.array_equal(t, gt)
                            and np.array_equal(feats, gfeats))
        if not m.grid_exact:
            raise VerificationFailure(m.stride_index, "grid", None, "grid differs from re-binned window")
        values, active = oracle.pseudo_image(pts, p.cfg, p.encoder, dtype=p.dtype)
        ref = {"pseudo": oracle.LayerResult(values, active, values)}
        ours = {"pseudo": p.canvas}
        if p.backbone is not None:
            ref.update(oracle.backbone_reference(values, active, p.weights, dtype=p.dtype))
            ours.update(p.backbone.outputs)
        worst_abs = worst_rel = 0.0
        worst_layer = None
        violations = 0
        for name, canvas in ours.items():
            r = ref[name]
            if not np.array_equal(canvas.active, r.active):
                site = tuple(int(v) for v in np.argwhere(canvas.active != r.active)[0])
                raise VerificationFailure(m.stride_index, name, site, "active sites differ")
            must_match = name == "pseudo" or (self.exact and m.refreshed)
            rep = oracle.compare(canvas.values, r.values, tolerance=0.0 if must_match else self.tolerance)
            if rep.max_rel_diff >= worst_rel:
                worst_abs, worst_rel, worst_layer = max(worst_abs, rep.max_abs_diff), rep.max_rel_diff, name
            if not rep.passed:
                raise VerificationFailure(m.stride_index, name, rep.worst_site,
                                          f"max relative diff {rep.max_rel_diff:.3e}")
            if self.prev is not None:
                prev = self.prev[name].values
                differs = (prev != r.values).any(axis=0) & ~canvas.change
                n = int(differs.sum())
                if n:
                    site = tuple(int(v) for v in np.argwhere(differs)[0])
                    raise VerificationFailure(m.stride_index, name, site,
                                              f"{n} sites changed without a change bit")
                violations += n
        self.prev = ref
        m.oracle_max_abs_diff = worst_abs
        m.oracle_max_rel_diff = worst_rel
        m.oracle_worst_layer = worst_layer
        m.soundness_violations = violations
        return m


def run_stream(stream: np.ndarray, pipeline: StreamingPipeline, t0: float = 0.0,
               t_end: float | None = None, verify: Verifier | None = None):
    """Yield one :class:`StrideMetrics` per stride of ``stream``."""
    for packet in packetize(stream, pipeline.cfg.stride, t0=t0, t_end=t_end):
        m = pipeline.step(packet)
        if verify is not None:
            verify.check(m)
        yield m
