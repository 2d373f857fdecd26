"""Scatter convolutions that reuse the previous stride's output.

Each input site pushes ``I[i, j] * W[m, n]`` to the output site its tap maps
to. Layers keep the last input they saw plus a float64 accumulator, so a
new stride only scatters ``(I_curr - I_prev) * W`` from changed sites.

Arithmetic order is fixed: input channels ascending inside each tap, taps
in ``(m, n)`` lexicographic order, sites row-major. Per tap the site-to-output
map is injective, which keeps fancy-indexed ``+=`` free of collisions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .canvas import FeatureCanvas

MODES = ("regular", "submanifold", "transpose")
SSCL_MAGIC = b"SSCL"
SSCL_VERSION = 1


class StateUninitialized(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    weights: np.ndarray  # (out, in, k, k)
    bias: np.ndarray
    k: int = 3
    stride: int = 1
    mode: str = "regular"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.mode == "transpose" and self.stride != 2:
            raise ValueError("transpose mode requires stride 2")
        if self.mode == "submanifold" and self.stride != 1:
            raise ValueError("submanifold mode requires stride 1")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        want = (self.out_channels, self.in_channels, self.k, self.k)
        if self.weights.shape != want:
            raise ShapeMismatch(f"weights shape {self.weights.shape}, expected {want}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeMismatch(f"bias shape {self.bias.shape}, expected ({self.out_channels},)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("weights must be finite")
        # (out, k*k, in) copy for the scatter kernel; weights are fixed after construction
        self.tap_major = np.ascontiguousarray(
            self.weights.reshape(self.out_channels, self.in_channels, -1).transpose(0, 2, 1))

    @property
    def taps(self) -> list[tuple[int, int]]:
        return [(m, n) for m in range(self.k) for n in range(self.k)]

    @property
    def macs_per_site(self) -> int:
        return self.k * self.k * self.in_channels * self.out_channels

    def out_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        h, w = shape
        if self.mode == "transpose":
            return h * self.stride, w * self.stride
        return -(-h // self.stride), -(-w // self.stride)

    @classmethod
    def random(cls, in_channels, out_channels, k=3, stride=1, mode="regular", seed=0,
               rng=None) -> "ConvSpec":
        """He-uniform weights rounded to float32, small uniform bias."""
        rng = rng if rng is not None else np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (in_channels * k * k))
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, k, k))
        b = rng.uniform(-0.1, 0.1, size=out_channels)
        return cls(in_channels, out_channels, w.astype(np.float32), b.astype(np.float32),
                   k=k, stride=stride, mode=mode)

    def save(self, path) -> None:
        mode = MODES.index(self.mode)
        with open(path, "wb") as fh:
            fh.write(SSCL_MAGIC + struct.pack("<HBBBII", SSCL_VERSION, self.k, self.stride, mode,
                                              self.in_channels, self.out_channels))
            fh.write(np.ascontiguousarray(self.weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.bias, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ConvSpec":
        data = Path(path).read_bytes()
        if data[:4] != SSCL_MAGIC:
            raise ValueError(f"{path}: not an SSCL layer file")
        head = struct.calcsize("<HBBBII")
        version, k, stride, mode, cin, cout = struct.unpack("<HBBBII", data[4:4 + head])
        if version != SSCL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if mode >= len(MODES):
            raise ValueError(f"{path}: bad mode byte {mode}")
        flat = np.frombuffer(data[4 + head:], dtype="<f4").astype(np.float64)
        nw = cout * cin * k * k
        if len(flat) != nw + cout:
            raise ValueError(f"{path}: expected {nw + cout} values, found {len(flat)}")
        return cls(cin, cout, flat[:nw].reshape(cout, cin, k, k).copy(), flat[nw:].copy(),
                   k=k, stride=stride, mode=MODES[mode])


@dataclass
class LayerState:
    """Per-layer memory carried between strides."""

    prev_input: np.ndarray      # (Cin, H, W), feature dtype
    prev_active: np.ndarray     # (H, W) bool
    acc: np.ndarray             # (Cout, H', W') float64, linear sum without bias
    counts: np.ndarray          # (H', W') contributing active inputs
    out: np.ndarray             # (Cout, H', W') post-accumulator copy, feature dtype
    out_active: np.ndarray
    out_change: np.ndarray
    initialized: bool = False
    multiplies: int = 0
    full_multiplies: int = 0
    skip_next_delta: bool = field(default=False, repr=False)

    @classmethod
    def create(cls, spec: ConvSpec, in_shape: tuple[int, int], dtype=np.float32) -> "LayerState":
        oshape = spec.out_shape(in_shape)
        return cls(
            prev_input=np.zeros((spec.in_channels, *in_shape), dtype=dtype),
            prev_active=np.zeros(in_shape, dtype=bool),
            acc=np.zeros((spec.out_channels, *oshape)),
            counts=np.zeros(oshape, dtype=np.int32),
            out=np.zeros((spec.out_channels, *oshape), dtype=dtype),
            out_active=np.zeros(oshape, dtype=bool),
            out_change=np.zeros(oshape, dtype=bool),
        )

    @property
    def in_shape(self) -> tuple[int, int]:
        return self.prev_active.shape

    def reset(self) -> None:
        for arr in (self.prev_input, self.acc, self.out):
            arr.fill(0)
        for arr in (self.prev_active, self.counts, self.out_active, self.out_change):
            arr.fill(0)
        self.initialized = False
        self.multiplies = 0
        self.full_multiplies = 0

    def output(self) -> FeatureCanvas:
        return FeatureCanvas(self.out, self.out_active, self.out_change)


# index maps

def _targets(spec: ConvSpec, i, j, m, n, oshape):
    """Output coordinates reached from input sites (i, j) through tap (m, n)."""
    c = spec.k // 2
    if spec.mode == "transpose":
        oi, oj = spec.stride * i + m - c, spec.stride * j + n - c
        ok = np.ones(len(oi), dtype=bool)
    else:
        ni, nj = i - m + c, j - n + c
        if spec.stride == 1:
            oi, oj = ni, nj
            ok = np.ones(len(oi), dtype=bool)
        else:
            ok = (ni % spec.stride == 0) & (nj % spec.stride == 0)
            oi, oj = ni // spec.stride, nj // spec.stride
    ok &= (oi >= 0) & (oi < oshape[0]) & (oj >= 0) & (oj < oshape[1])
    return oi, oj, ok


def footprint(spec: ConvSpec, mask: np.ndarray) -> np.ndarray:
    """Output sites receiving at least one tap from the sites set in ``mask``."""
    oshape = spec.out_shape(mask.shape)
    i, j = np.nonzero(mask)
    hit = np.zeros(oshape, dtype=bool)
    for m, n in spec.taps:
        oi, oj, ok = _targets(spec, i, j, m, n, oshape)
        hit[oi[ok], oj[ok]] = True
    return hit


def _count_map(spec: ConvSpec, mask: np.ndarray) -> np.ndarray:
    oshape = spec.out_shape(mask.shape)
    i, j = np.nonzero(mask)
    counts = np.zeros(oshape, dtype=np.int32)
    for m, n in spec.taps:
        oi, oj, ok = _targets(spec, i, j, m, n, oshape)
        counts[oi[ok], oj[ok]] += 1
    return counts


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Square k x k binary dilation with zero padding."""
    c = k // 2
    h, w = mask.shape
    pad = np.zeros((h + 2 * c, w + 2 * c), dtype=bool)
    pad[c:c + h, c:c + w] = mask
    out = np.zeros_like(mask)
    for di in range(k):
        for dj in range(k):
            out |= pad[di:di + h, dj:dj + w]
    return out


@numba.njit(cache=True)
def _contrib_kernel(vals, wt):
    n, cin = vals.shape
    cout, taps = wt.shape[0], wt.shape[1]
    out = np.empty((n, cout, taps))
    for s in range(n):
        for co in range(cout):
            for t in range(taps):
                acc = vals[s, 0] * wt[co, t, 0]
                for ci in range(1, cin):
                    acc += vals[s, ci] * wt[co, t, ci]
                out[s, co, t] = acc
    return out


def _contributions(vals: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Per-tap channel sums for each site: (n, Cin) -> (n, Cout, k*k), channels ascending."""
    return _contrib_kernel(np.ascontiguousarray(vals, dtype=np.float64), spec.tap_major)


def _scatter(acc, spec, i, j, vals, gate=None, sign=1, touched=None) -> int:
    """Scatter ``sign * vals`` (n, Cin) from sites (i, j) into ``acc``.

    Returns the number of multiply-accumulates the scatter stands for.
    """
    if len(i) == 0:
        return 0
    contrib = _contributions(vals, spec)
    oshape = acc.shape[1:]
    taps_used = 0
    for t, (m, n) in enumerate(spec.taps):
        oi, oj, ok = _targets(spec, i, j, m, n, oshape)
        if gate is not None:
            ok[ok] = gate[oi[ok], oj[ok]]
        if not ok.any():
            continue
        oi, oj = oi[ok], oj[ok]
        taps_used += len(oi)
        part = contrib[ok, :, t].T
        if sign > 0:
            acc[:, oi, oj] += part
        else:
            acc[:, oi, oj] -= part
        if touched is not None:
            touched[oi, oj] = True
    if gate is None:
        return len(i) * spec.macs_per_site
    return taps_used * spec.in_channels * spec.out_channels


@numba.njit(cache=True)
def _gather_kernel(cur, active, w, oi, oj):
    cin, h, wd = cur.shape
    cout, k = w.shape[0], w.shape[2]
    c = k // 2
    res = np.zeros((cout, len(oi)))
    taps_used = 0
    for r in range(len(oi)):
        for m in range(k):
            for n in range(k):
                i, j = oi[r] + m - c, oj[r] + n - c
                if i < 0 or i >= h or j < 0 or j >= wd or not active[i, j]:
                    continue
                taps_used += 1
                for co in range(cout):
                    part = cur[0, i, j] * w[co, 0, m, n]
                    for ci in range(1, cin):
                        part += cur[ci, i, j] * w[co, ci, m, n]
                    res[co, r] += part
    return res, taps_used


def _gather(spec, cur: np.ndarray, active: np.ndarray, oi, oj):
    """Recompute the linear sum at output sites (oi, oj) from active inputs (stride 1)."""
    res, taps_used = _gather_kernel(cur.astype(np.float64, copy=False), active, spec.weights,
                                    oi.astype(np.int64), oj.astype(np.int64))
    return res, taps_used * spec.in_channels * spec.out_channels


def _check_input(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> None:
    if inp.values.shape != (spec.in_channels, *state.in_shape):
        raise ShapeMismatch(f"input shape {inp.values.shape} does not match layer "
                            f"({spec.in_channels}, {state.in_shape[0]}, {state.in_shape[1]})")
    if inp.active.shape != state.in_shape or inp.change.shape != state.in_shape:
        raise ShapeMismatch("active/change bitmaps do not match the input resolution")


def _full_cost(spec: ConvSpec, active: np.ndarray) -> int:
    """Multiplies a no-reuse sparse pass over ``active`` would execute."""
    if spec.mode != "submanifold":
        return int(active.sum()) * spec.macs_per_site
    pairs = _count_map(spec, active)
    return int(pairs[active].sum()) * spec.in_channels * spec.out_channels


def _finish(spec: ConvSpec, state: LayerState, touched: np.ndarray, active: np.ndarray) -> FeatureCanvas:
    """Clear dead accumulators and refresh the post-accumulator copy at touched sites."""
    state.out_active[...] = active
    dead = touched & ~active
    state.acc[:, dead] = 0
    live = touched & active
    state.out[:, dead] = 0
    state.out[:, live] = (state.acc[:, live] + spec.bias[:, None]).astype(state.out.dtype)
    state.out_change[...] = touched
    return state.output()


def _output_active(spec: ConvSpec, state: LayerState) -> np.ndarray:
    if spec.mode == "submanifold":
        return state.prev_active.copy()
    return state.counts > 0


def scatter_add(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """Add the scatter of every active input site to the accumulator.

    The contributions are summed into a fresh buffer first and then added,
    so ``scatter_add`` followed by ``deconv_subtract`` of the same input
    cancels exactly.
    """
    _check_input(inp, spec, state)
    i, j = np.nonzero(inp.active)
    vals = inp.values[:, i, j].T.astype(np.float64)
    gate = inp.active | state.prev_active if spec.mode == "submanifold" else None
    buf = np.zeros_like(state.acc)
    touched = np.zeros_like(state.out_active)
    macs = _scatter(buf, spec, i, j, vals, gate=gate, touched=touched)
    state.acc += buf
    if spec.mode != "submanifold":
        state.counts += _count_map(spec, inp.active)
    state.prev_input += inp.values
    state.prev_active |= inp.active
    state.multiplies += macs
    state.initialized = True
    return _finish(spec, state, touched, _output_active(spec, state))


def deconv_subtract(inp_prev: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """Remove the scatter of ``inp_prev``'s active sites from the accumulator."""
    if not state.initialized:
        raise StateUninitialized("deconv_subtract needs an accumulator holding the input")
    _check_input(inp_prev, spec, state)
    i, j = np.nonzero(inp_prev.active)
    vals = inp_prev.values[:, i, j].T.astype(np.float64)
    gate = state.prev_active if spec.mode == "submanifold" else None
    buf = np.zeros_like(state.acc)
    touched = np.zeros_like(state.out_active)
    macs = _scatter(buf, spec, i, j, vals, gate=gate, touched=touched)
    state.acc -= buf
    if spec.mode != "submanifold":
        state.counts -= _count_map(spec, inp_prev.active)
    state.prev_input -= inp_prev.values
    state.prev_active &= ~inp_prev.active
    state.multiplies += macs
    return _finish(spec, state, touched, _output_active(spec, state))


def forward_full(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """From-scratch sparse scatter convolution; (re)initializes ``state``."""
    _check_input(inp, spec, state)
    was_active = state.out_active.copy()
    state.reset()
    state.prev_active[...] = inp.active
    out = scatter_add(inp, spec, state)
    state.prev_input[...] = inp.values
    state.out_change |= was_active
    state.multiplies = _full_cost(spec, inp.active)
    state.full_multiplies = state.multiplies
    return out



def refresh(state: LayerState, inp: FeatureCanvas, spec: ConvSpec) -> FeatureCanvas:
    """Discard the accumulator and recompute from ``inp``; marks active outputs changed."""
    return forward_full(inp, spec, state)


def _drop_one(state: LayerState, delta: np.ndarray, eligible: np.ndarray) -> None:
    """Fault injection: lose the delta of the first eligible site that has one."""
    hit = np.flatnonzero(eligible & (delta != 0).any(axis=1))
    if len(hit):
        delta[hit[0]] = 0
        state.skip_next_delta = False


def _changed_sites(inp: FeatureCanvas, state: LayerState) -> np.ndarray:
    return inp.change | (inp.active ^ state.prev_active)


def forward_delta(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """Scatter ``(I_curr - I_prev) * W`` from changed sites (regular and transpose modes)."""
    if spec.mode == "submanifold":
        return forward_submanifold(inp, spec, state)
    if not state.initialized:
        raise StateUninitialized("forward_delta called before forward_full")
    _check_input(inp, spec, state)
    sites = _changed_sites(inp, state)
    i, j = np.nonzero(sites)
    cur = inp.values[:, i, j].T.astype(np.float64)
    delta = cur - state.prev_input[:, i, j].T.astype(np.float64)
    if state.skip_next_delta:
        _drop_one(state, delta, np.ones(len(i), dtype=bool))
    touched = np.zeros_like(state.out_active)
    state.multiplies = _scatter(state.acc, spec, i, j, delta, touched=touched)
    on = sites & inp.active & ~state.prev_active
    off = sites & state.prev_active & ~inp.active
    if on.any() or off.any():
        state.counts += _count_map(spec, on) - _count_map(spec, off)
    state.prev_input[:, i, j] = inp.values[:, i, j]
    state.prev_active[i, j] = inp.active[i, j]
    state.full_multiplies = _full_cost(spec, inp.active)
    return _finish(spec, state, touched, state.counts > 0)


def forward_strided(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    if spec.mode != "regular" or spec.stride != 2:
        raise ValueError("forward_strided needs a regular stride-2 layer")
    return forward_delta(inp, spec, state)


def forward_transpose(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    if spec.mode != "transpose":
        raise ValueError("forward_transpose needs a transpose layer")
    return forward_delta(inp, spec, state)


def forward_submanifold(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """Delta scatter gated to active outputs, with local recompute around activity flips.

    Outputs next to a site that switched on or off are rebuilt from the
    current input by gathering, since the set of contributing neighbours
    changed. Outputs of sites that switched off are zeroed.
    """
    if spec.mode != "submanifold":
        raise ValueError("forward_submanifold needs a submanifold layer")
    if not state.initialized:
        raise StateUninitialized("forward_submanifold called before forward_full")
    _check_input(inp, spec, state)
    a_prev, a_cur = state.prev_active.copy(), inp.active
    flips = a_prev ^ a_cur
    sites = inp.change | flips
    redo = dilate(flips, spec.k) & a_cur
    i, j = np.nonzero(sites)
    cur = inp.values[:, i, j].T.astype(np.float64)
    delta = cur - state.prev_input[:, i, j].T.astype(np.float64)
    if state.skip_next_delta:
        _drop_one(state, delta, a_prev[i, j] & a_cur[i, j] & ~dilate(redo, spec.k)[i, j])
    touched = np.zeros_like(state.out_active)
    macs = _scatter(state.acc, spec, i, j, delta, gate=a_cur & ~redo, touched=touched)
    state.prev_input[:, i, j] = inp.values[:, i, j]
    state.prev_active[...] = a_cur
    ri, rj = np.nonzero(redo)
    if len(ri):
        vals, extra = _gather(spec, state.prev_input, a_cur, ri, rj)
        state.acc[:, ri, rj] = vals
        macs += extra
    state.multiplies = macs
    state.full_multiplies = _full_cost(spec, a_cur)
    changed = dilate(sites, spec.k) & (a_cur | a_prev)
    return _finish(spec, state, changed, a_cur.copy())


def forward(inp: FeatureCanvas, spec: ConvSpec, state: LayerState) -> FeatureCanvas:
    """Full pass on the first call, delta pass afterwards."""
    if not state.initialized:
        return forward_full(inp, spec, state)
    if spec.mode == "submanifold":
        return forward_submanifold(inp, spec, state)
    return forward_delta(inp, spec, state)


def apply_bn(canvas: FeatureCanvas, scale, shift, change: np.ndarray) -> FeatureCanvas:
    """Inference batch norm at changed active sites; the change map is left alone."""
    m = change & canvas.active
    v = canvas.values[:, m].astype(np.float64)
    canvas.values[:, m] = (np.asarray(scale)[:, None] * v + np.asarray(shift)[:, None]).astype(canvas.values.dtype)
    return canvas


def apply_relu(canvas: FeatureCanvas, prev_post: np.ndarray, change: np.ndarray) -> FeatureCanvas:
    """Clamp negatives at changed sites and keep sites that newly hit zero flagged.

    ``prev_post`` holds the previous stride's post-activation values. Bits
    are only ever added to ``change``.
    """
    v = canvas.values[:, change]
    np.maximum(v, 0, out=v)
    canvas.values[:, change] = v
    new_zero = np.zeros_like(change)
    new_zero[change] = ((v == 0) & (prev_post[:, change] != 0)).any(axis=0)
    change |= new_zero
    canvas.change = change
    return canvas


class DeltaConvLayer:
    """A conv layer with inference BN and ReLU, keeping its own stride-to-stride state."""

    def __init__(self, spec: ConvSpec, bn_scale, bn_shift, in_shape, dtype=np.float32,
                 name: str = "", relu: bool = True):
        self.spec = spec
        self.name = name
        self.bn_scale = np.asarray(bn_scale, dtype=np.float64)
        self.bn_shift = np.asarray(bn_shift, dtype=np.float64)
        self.relu = relu
        self.dtype = np.dtype(dtype)
        self.state = LayerState.create(spec, tuple(in_shape), dtype=np.float64)
        oshape = spec.out_shape(tuple(in_shape))
        self.features = np.zeros((spec.out_channels, *oshape), dtype=self.dtype)

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.features.shape[1:]

    def _post(self, lin: FeatureCanvas) -> FeatureCanvas:
        ch = lin.change.copy()
        m = ch & lin.active
        acc = self.state.acc[:, m] + self.spec.bias[:, None]
        v = self.bn_scale[:, None] * acc + self.bn_shift[:, None]
        if self.relu:
            v = np.maximum(v, 0)
        new = np.zeros((self.spec.out_channels, int(ch.sum())), dtype=self.dtype)
        new[:, m[ch]] = v.astype(self.dtype)
        if self.relu:
            hit = np.zeros_like(ch)
            hit[ch] = ((new == 0) & (self.features[:, ch] != 0)).any(axis=0)
            ch |= hit
        self.features[:, ch] = new
        return FeatureCanvas(self.features, lin.active, ch)

    def __call__(self, inp: FeatureCanvas) -> FeatureCanvas:
        return self._post(forward(inp, self.spec, self.state))

    def full(self, inp: FeatureCanvas) -> FeatureCanvas:
        return self._post(forward_full(inp, self.spec, self.state))

    def reset(self) -> None:
        self.state.reset()
        self.features.fill(0)

    @property
    def multiplies(self) -> int:
        return self.state.multiplies

    @property
    def full_multiplies(self) -> int:
        return self.state.full_multiplies
