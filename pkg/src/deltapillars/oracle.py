"""Brute-force references with no state reuse.

Everything here is recomputed from scratch each call and shares no
convolution code with :mod:`deltapillars.sconv`. The dense convolutions are
written as gathers over padded arrays. They sum input channels in
ascending order within each kernel tap and taps in ``(m, n)`` order, so a
scatter that follows the same order reproduces them bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .grid import D, GridConfig, count_ops_full
from .sconv import ConvSpec, ShapeMismatch

REL_FLOOR = 1e-12


# dense layers

def _tap_sum(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_ci x[ci] * w[:, ci] with ci ascending; x (Cin, h, w), w (Cout, Cin)."""
    out = x[0][None].astype(np.float64) * w[:, 0, None, None]
    for ci in range(1, x.shape[0]):
        out += x[ci][None].astype(np.float64) * w[:, ci, None, None]
    return out


def dense_conv(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Same-padded cross-correlation with optional stride 2, no bias.

    ``out[a, b] = sum_{m,n} x[s*a + m - c, s*b + n - c] * W[m, n]`` with
    ``c = k // 2`` and zeros outside the input.
    """
    cin, h, w = x.shape
    if cin != spec.in_channels:
        raise ShapeMismatch(f"input has {cin} channels, layer expects {spec.in_channels}")
    if spec.mode == "transpose":
        return dense_transpose(x, spec)
    k, s, c = spec.k, spec.stride, spec.k // 2
    ho, wo = -(-h // s), -(-w // s)
    pad = np.zeros((cin, h + 2 * c + s, w + 2 * c + s), dtype=np.float64)
    pad[:, c:c + h, c:c + w] = x
    out = np.zeros((spec.out_channels, ho, wo))
    for m in range(k):
        for n in range(k):
            window = pad[:, m:m + s * ho:s, n:n + s * wo:s]
            out += _tap_sum(window, spec.weights[:, :, m, n])
    return out


def dense_transpose(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Stride-2 transposed convolution (zero insertion), output ``2H x 2W``.

    ``out[o] = sum_m x[(o + c - m) / 2] * W[m]`` over taps where the index
    is a whole number inside the input.
    """
    cin, h, w = x.shape
    if cin != spec.in_channels:
        raise ShapeMismatch(f"input has {cin} channels, layer expects {spec.in_channels}")
    k, s, c = spec.k, spec.stride, spec.k // 2
    ho, wo = s * h, s * w
    # up[p] holds x[i] at p = s*i + k, zeros elsewhere
    up = np.zeros((cin, s * h + 2 * k, s * w + 2 * k))
    up[:, k:k + s * h:s, k:k + s * w:s] = x
    out = np.zeros((spec.out_channels, ho, wo))
    for m in range(k):
        for n in range(k):
            # out[o] takes up[o + c - m + k]
            window = up[:, c - m + k:c - m + k + ho, c - n + k:c - n + k + wo]
            out += _tap_sum(window, spec.weights[:, :, m, n])
    return out


def dense_activity(active: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Output sites with at least one active input under the kernel."""
    if spec.mode == "submanifold":
        return active.copy()
    probe = ConvSpec(1, 1, np.ones((1, 1, spec.k, spec.k)), np.zeros(1),
                     k=spec.k, stride=spec.stride, mode=spec.mode)
    return dense_conv(active[None].astype(np.float64), probe)[0] > 0


def dense_submanifold(x: np.ndarray, active: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Submanifold convolution: ordinary convolution read only at active sites."""
    out = dense_conv(np.where(active, x, 0), spec)
    return np.where(active, out, 0.0)


@numba.njit(cache=True)
def _gather_active(x, act, w, stride, transpose, oact):
    # x is (H, W, Cin) and w is (Cout, k, k, Cin) so the channel loop is contiguous
    h, wd, cin = x.shape
    cout, k = w.shape[0], w.shape[1]
    ho, wo = oact.shape
    c = k // 2
    out = np.zeros((cout, ho, wo))
    for a in range(ho):
        for b in range(wo):
            if not oact[a, b]:
                continue
            for co in range(cout):
                acc = 0.0
                for m in range(k):
                    for n in range(k):
                        if transpose:
                            pi, pj = a + c - m, b + c - n
                            if pi % stride != 0 or pj % stride != 0:
                                continue
                            i, j = pi // stride, pj // stride
                        else:
                            i, j = stride * a + m - c, stride * b + n - c
                        if i < 0 or i >= h or j < 0 or j >= wd or not act[i, j]:
                            continue
                        t = x[i, j, 0] * w[co, m, n, 0]
                        for ci in range(1, cin):
                            t += x[i, j, ci] * w[co, m, n, ci]
                        acc += t
                out[co, a, b] = acc
    return out


def sparse_reference(x: np.ndarray, active: np.ndarray, spec: ConvSpec):
    """Sparse convolution from scratch by gathering, evaluated at active outputs only.

    Returns ``(linear, out_active)``; the linear sum excludes the bias.
    """
    if x.shape[0] != spec.in_channels:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, layer expects {spec.in_channels}")
    out_active = dense_activity(active, spec)
    xt = np.ascontiguousarray(np.moveaxis(x, 0, -1), dtype=np.float64)
    wt = np.ascontiguousarray(np.moveaxis(spec.weights, 1, -1))
    lin = _gather_active(xt, active, wt, spec.stride, spec.mode == "transpose", out_active)
    return lin, out_active


def dense_layer(x: np.ndarray, active: np.ndarray, spec: ConvSpec, bn_scale=None, bn_shift=None,
                relu: bool = True, dtype=np.float32):
    """Sparse layer from scratch: conv, bias, BN and ReLU at active outputs.

    Returns ``(values, active, linear)`` where ``linear`` is the raw sum
    without bias.
    """
    lin, out_active = sparse_reference(x, active, spec)
    v = lin + spec.bias[:, None, None]
    if bn_scale is not None:
        v = np.asarray(bn_scale)[:, None, None] * v + np.asarray(bn_shift)[:, None, None]
    if relu:
        v = np.maximum(v, 0)
    values = np.where(out_active, v, 0.0).astype(dtype)
    return values, out_active, lin


# grid and pillar encoder

def window_points(stream: np.ndarray, t_now: float, window: float) -> np.ndarray:
    """Stream records with ``t_now - window <= t <= t_now``."""
    t = stream["t"]
    return stream[(t <= t_now) & (t >= t_now - window)]


def rebin(points: np.ndarray, cfg: GridConfig):
    """One-shot pillarisation of a set of points.

    Returns ``(flat_index, t, features)`` sorted by pillar then time, the
    same layout as :meth:`PillarGrid.snapshot`.
    """
    x = points["x"].astype(np.float64)
    y = points["y"].astype(np.float64)
    z = points["z"].astype(np.float64)
    fx = np.floor((x - cfg.x_range[0]) / cfg.pillar_size)
    fy = np.floor((y - cfg.y_range[0]) / cfg.pillar_size)
    inside = ((fx >= 0) & (fx < cfg.W) & (fy >= 0) & (fy < cfg.H)
              & (z >= cfg.z_range[0]) & (z < cfg.z_range[1]))
    fx, fy = fx[inside].astype(np.int64), fy[inside].astype(np.int64)
    lin = fy * cfg.W + fx
    order = np.lexsort((points["t"][inside], lin))
    lin, fx, fy = lin[order], fx[order], fy[order]
    sub = points[inside][order]
    feats = np.zeros((len(sub), D))
    feats[:, 0] = sub["x"]
    feats[:, 1] = sub["y"]
    feats[:, 2] = sub["z"]
    feats[:, 3] = sub["intensity"]
    feats[:, 4] = feats[:, 0] - (cfg.x_range[0] + (fx + 0.5) * cfg.pillar_size)
    feats[:, 5] = feats[:, 1] - (cfg.y_range[0] + (fy + 0.5) * cfg.pillar_size)
    keys, starts, counts = np.unique(lin, return_index=True, return_counts=True)
    if np.any(counts > cfg.max_points):
        raise ValueError("a pillar exceeds max_points; the one-shot oracle does not sample")
    for s, n in zip(starts, counts):
        for axis in range(3):
            col = np.ascontiguousarray(feats[s:s + n, axis])
            feats[s:s + n, 6 + axis] = col - col.sum() / n
    return lin, sub["t"].astype(np.float64), feats


def pseudo_image(points: np.ndarray, cfg: GridConfig, weights, dtype=np.float32):
    """Encode every pillar of the window from scratch. Returns ``(values, active)``."""
    lin, _, feats = rebin(points, cfg)
    c = weights.channels
    values = np.zeros((c, cfg.H * cfg.W), dtype=dtype)
    active = np.zeros(cfg.H * cfg.W, dtype=bool)
    keys, starts, counts = np.unique(lin, return_index=True, return_counts=True)
    for k, s, n in zip(keys, starts, counts):
        pts = feats[s:s + n]
        f = pts[:, 0, None] * weights.linear[:, 0]
        for d in range(1, weights.dims):
            f = f + pts[:, d, None] * weights.linear[:, d]
        f = (f + weights.bias) * weights.bn_scale + weights.bn_shift
        values[:, k] = f.max(axis=0)
        active[k] = True
    return values.reshape(c, cfg.H, cfg.W), active.reshape(cfg.H, cfg.W)


def pfn_ops_full(points: np.ndarray, cfg: GridConfig) -> int:
    """Pillar-stage operation count of a one-shot pass over ``points``."""
    lin, _, _ = rebin(points, cfg)
    return count_ops_full(len(lin), np.bincount(lin) if len(lin) else [])


# full pipeline

@dataclass
class LayerResult:
    values: np.ndarray
    active: np.ndarray
    linear: np.ndarray


def backbone_reference(values: np.ndarray, active: np.ndarray, weights, dtype=np.float32):
    """Run every backbone layer densely from scratch.

    ``weights`` is a :class:`deltapillars.backbone.BackboneWeights`. Returns
    a dict of :class:`LayerResult` keyed by layer name plus ``"concat"``.
    """
    results: dict[str, LayerResult] = {}

    def run(name, x, act):
        spec, scale, shift = weights.layers[name]
        v, a, lin = dense_layer(x, act, spec, scale, shift, dtype=dtype)
        results[name] = LayerResult(v, a, lin)
        return v, a

    x, act = values, active
    branches = []
    for b, names in enumerate(weights.block_layers()):
        for name in names:
            x, act = run(name, x, act)
        u, ua = x, act
        for name in weights.upsample_layers()[b]:
            u, ua = run(name, u, ua)
        branches.append((u, ua))
    concat = np.concatenate([u for u, _ in branches]).astype(dtype)
    cact = np.logical_or.reduce([a for _, a in branches])
    results["concat"] = LayerResult(concat, cact, concat)
    return results


def full_recompute_pipeline(points: np.ndarray, encoder, backbone_weights, cfg: GridConfig,
                            dtype=np.float32):
    """Re-bin the window, encode every pillar and run every layer from scratch.

    Returns the layer dict of :func:`backbone_reference` with the pseudo-image
    added under ``"pseudo"``.
    """
    values, active = pseudo_image(points, cfg, encoder, dtype=dtype)
    results = backbone_reference(values, active, backbone_weights, dtype=dtype)
    results["pseudo"] = LayerResult(values, active, values)
    return results


# comparison

@dataclass
class ComparisonReport:
    max_abs_diff: float
    max_rel_diff: float
    worst_site: tuple[int, int, int] | None
    passed: bool
    change_soundness_violations: int
    differing_sites: int = 0

    @property
    def pass_(self) -> bool:
        return self.passed


def compare(a: np.ndarray, b: np.ndarray, change_map: np.ndarray | None = None,
            tolerance: float = 1e-4) -> ComparisonReport:
    """Elementwise comparison of two ``C x H x W`` canvases.

    The relative diff is normwise: the largest absolute difference divided by
    the largest magnitude in either canvas. Below a magnitude of 1e-12 the
    absolute difference is used. Sites that differ in any channel but are
    not flagged in ``change_map`` count as soundness violations.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    rel = max_abs / scale if scale > REL_FLOOR else max_abs
    worst = tuple(int(v) for v in np.unravel_index(int(diff.argmax()), diff.shape)) if max_abs > 0 else None
    differs = (a != b).any(axis=0)
    violations = 0
    if change_map is not None:
        if change_map.shape != differs.shape:
            raise ShapeMismatch("change map does not match the canvas resolution")
        violations = int(np.count_nonzero(differs & ~change_map))
    return ComparisonReport(max_abs, rel, worst, rel <= tolerance, violations,
                            int(np.count_nonzero(differs)))


# change propagation and work counts, simulated with whole-canvas masks

def _box_any(mask: np.ndarray, k: int) -> np.ndarray:
    c = k // 2
    h, w = mask.shape
    pad = np.zeros((h + 2 * c, w + 2 * c), dtype=bool)
    pad[c:c + h, c:c + w] = mask
    out = np.zeros_like(mask)
    for di in range(k):
        for dj in range(k):
            out |= pad[di:di + h, dj:dj + w]
    return out


def _box_count(mask: np.ndarray, k: int) -> np.ndarray:
    c = k // 2
    h, w = mask.shape
    pad = np.zeros((h + 2 * c, w + 2 * c), dtype=np.int64)
    pad[c:c + h, c:c + w] = mask
    out = np.zeros(mask.shape, dtype=np.int64)
    for di in range(k):
        for dj in range(k):
            out += pad[di:di + h, dj:dj + w]
    return out


def propagate_change(spec: ConvSpec, change: np.ndarray, prev_active: np.ndarray,
                     cur_active: np.ndarray):
    """Output change map and multiply count of one delta layer step.

    The rules: changed inputs are the flagged sites plus activity flips.
    A stride-2 output is changed when any changed input lies under its
    kernel, a transposed output when it receives a tap from a changed input,
    and a submanifold output when it is active in either stride and a
    changed input lies under its kernel.
    """
    flips = prev_active ^ cur_active
    sites = change | flips
    cin_cout = spec.in_channels * spec.out_channels
    if spec.mode == "submanifold":
        out_change = _box_any(sites, spec.k) & (prev_active | cur_active)
        redo = _box_any(flips, spec.k) & cur_active
        gate = cur_active & ~redo
        taps = int(_box_count(sites, spec.k)[gate].sum())
        taps += int(_box_count(cur_active, spec.k)[redo].sum())
        return out_change, taps * cin_cout
    probe = ConvSpec(1, 1, np.ones((1, 1, spec.k, spec.k)), np.zeros(1),
                     k=spec.k, stride=spec.stride, mode=spec.mode)
    out_change = dense_conv(sites[None].astype(np.float64), probe)[0] > 0
    return out_change, int(sites.sum()) * spec.macs_per_site


def full_sparse_multiplies(spec: ConvSpec, active: np.ndarray) -> int:
    """Multiplies of a no-reuse sparse pass over ``active`` inputs."""
    cin_cout = spec.in_channels * spec.out_channels
    if spec.mode == "submanifold":
        return int(_box_count(active, spec.k)[active].sum()) * cin_cout
    return int(active.sum()) * spec.macs_per_site
