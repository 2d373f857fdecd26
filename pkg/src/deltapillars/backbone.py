"""Three-block backbone built from delta scatter layers.

Each block opens with a stride-2 regular convolution followed by
submanifold convolutions. Every block output is upsampled to the block-1
resolution and the results are stacked channel-wise.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canvas import FeatureCanvas
from .sconv import ConvSpec, DeltaConvLayer, ShapeMismatch

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class BlockSpec:
    stride: int = 2
    layers: int = 4
    channels: int = 64

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("a block needs at least one layer")
        if self.stride not in (1, 2):
            raise ValueError("block stride must be 1 or 2")


@dataclass(frozen=True)
class LayerPlan:
    name: str
    block: int
    upsample: bool
    mode: str
    stride: int
    in_channels: int
    out_channels: int
    k: int


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int = 64
    blocks: tuple = (BlockSpec(2, 4, 64), BlockSpec(2, 6, 128), BlockSpec(2, 6, 256))
    upsample_channels: int = 128
    k: int = 3

    @property
    def concat_channels(self) -> int:
        return self.upsample_channels * len(self.blocks)

    def upsample_steps(self) -> list[int]:
        """Number of 2x transpose layers each block needs to reach block-1 resolution."""
        steps, total = [], 1
        for i, b in enumerate(self.blocks):
            if i > 0:
                total *= b.stride
            n = int(round(np.log2(total)))
            if 2 ** n != total:
                raise ValueError("upsampling factors must be powers of two")
            steps.append(n)
        return steps

    def plan(self) -> list[LayerPlan]:
        out, cin = [], self.in_channels
        for b, (blk, steps) in enumerate(zip(self.blocks, self.upsample_steps())):
            for li in range(blk.layers):
                if li == 0:
                    mode, stride = "regular", blk.stride
                else:
                    mode, stride = "submanifold", 1
                out.append(LayerPlan(f"b{b + 1}.{li}", b, False, mode, stride, cin, blk.channels, self.k))
                cin = blk.channels
            if steps == 0:
                out.append(LayerPlan(f"up{b + 1}.0", b, True, "regular", 1, blk.channels,
                                     self.upsample_channels, 1))
            uc = blk.channels
            for si in range(steps):
                out.append(LayerPlan(f"up{b + 1}.{si}", b, True, "transpose", 2, uc,
                                     self.upsample_channels, self.k))
                uc = self.upsample_channels
        return out

    def block_layers(self) -> list[list[str]]:
        names = [[] for _ in self.blocks]
        for p in self.plan():
            if not p.upsample:
                names[p.block].append(p.name)
        return names

    def upsample_layers(self) -> list[list[str]]:
        names = [[] for _ in self.blocks]
        for p in self.plan():
            if p.upsample:
                names[p.block].append(p.name)
        return names

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(d["in_channels"], tuple(BlockSpec(**b) for b in d["blocks"]),
                   d["upsample_channels"], d["k"])

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "blocks": [vars(b) for b in self.blocks],
                "upsample_channels": self.upsample_channels, "k": self.k}


@dataclass
class BackboneWeights:
    spec: BackboneSpec
    layers: dict = field(default_factory=dict)  # name -> (ConvSpec, bn_scale, bn_shift)

    def block_layers(self):
        return self.spec.block_layers()

    def upsample_layers(self):
        return self.spec.upsample_layers()

    @classmethod
    def random(cls, spec: BackboneSpec | None = None, seed: int = 0) -> "BackboneWeights":
        """He-uniform kernels, BN scale in [0.5, 1.5], shift in [-0.1, 0.1]; all float32-exact."""
        spec = spec or BackboneSpec()
        rng = np.random.default_rng(seed)
        layers = {}
        for p in spec.plan():
            conv = ConvSpec.random(p.in_channels, p.out_channels, k=p.k, stride=p.stride,
                                   mode=p.mode, rng=rng)
            scale = rng.uniform(0.5, 1.5, p.out_channels).astype(np.float32).astype(np.float64)
            shift = rng.uniform(-0.1, 0.1, p.out_channels).astype(np.float32).astype(np.float64)
            layers[p.name] = (conv, scale, shift)
        return cls(spec, layers)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for p in self.spec.plan():
            conv, scale, shift = self.layers[p.name]
            conv.save(directory / f"{p.name}.sscl")
            entries.append({"name": p.name, "file": f"{p.name}.sscl", "mode": conv.mode,
                            "stride": conv.stride, "k": conv.k, "in": conv.in_channels,
                            "out": conv.out_channels,
                            "bn_scale": np.float32(scale).tolist(),
                            "bn_shift": np.float32(shift).tolist()})
        manifest = {"spec": self.spec.to_dict(), "layers": entries}
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "BackboneWeights":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        spec = BackboneSpec.from_dict(manifest["spec"])
        layers = {}
        for e in manifest["layers"]:
            conv = ConvSpec.load(directory / e["file"])
            if (conv.mode, conv.stride, conv.k, conv.in_channels, conv.out_channels) != \
                    (e["mode"], e["stride"], e["k"], e["in"], e["out"]):
                raise ValueError(f"{e['file']}: header disagrees with the manifest")
            layers[e["name"]] = (conv, np.asarray(e["bn_scale"], dtype=np.float64),
                                 np.asarray(e["bn_shift"], dtype=np.float64))
        missing = {p.name for p in spec.plan()} - set(layers)
        if missing:
            raise ValueError(f"bundle lacks layers {sorted(missing)}")
        return cls(spec, layers)


@dataclass
class MultiplyCounts:
    per_layer: dict
    per_block: list
    total: int
    full_per_layer: dict
    full_total: int


class Backbone:
    """Stride-to-stride state of the whole backbone."""

    def __init__(self, weights: BackboneWeights, in_shape: tuple[int, int], dtype=np.float32):
        self.weights = weights
        self.spec = weights.spec
        self.in_shape = tuple(in_shape)
        self.dtype = np.dtype(dtype)
        self.layers: dict[str, DeltaConvLayer] = {}
        self.outputs: dict[str, FeatureCanvas] = {}
        shapes = {}
        shape = self.in_shape
        for b, names in enumerate(self.spec.block_layers()):
            for name in names:
                conv, scale, shift = weights.layers[name]
                self.layers[name] = DeltaConvLayer(conv, scale, shift, shape, dtype, name=name)
                shape = self.layers[name].out_shape
            shapes[b] = shape
        up_shapes = set()
        for b, names in enumerate(self.spec.upsample_layers()):
            shape = shapes[b]
            for name in names:
                conv, scale, shift = weights.layers[name]
                self.layers[name] = DeltaConvLayer(conv, scale, shift, shape, dtype, name=name)
                shape = self.layers[name].out_shape
            up_shapes.add(shape)
        if len(up_shapes) != 1:
            raise ShapeMismatch(f"upsampled canvases disagree in size: {sorted(up_shapes)}; "
                                "grid sides must divide by the total stride")
        self.out_shape = up_shapes.pop()
        self.concat = FeatureCanvas.zeros(self.spec.concat_channels, self.out_shape, dtype=self.dtype)
        self.skip_delta_at: str | None = None
        self.block_ns: list[int] = []

    def _run(self, pseudo: FeatureCanvas, full: bool) -> FeatureCanvas:
        if pseudo.values.shape != (self.spec.in_channels, *self.in_shape):
            raise ShapeMismatch(f"pseudo-image shape {pseudo.values.shape} does not match the backbone")
        if self.skip_delta_at and not full:
            self.layers[self.skip_delta_at].state.skip_next_delta = True
            self.skip_delta_at = None
        x = pseudo
        branches = []
        self.block_ns = []
        for b, names in enumerate(self.spec.block_layers()):
            t0 = time.perf_counter_ns()
            for name in names:
                layer = self.layers[name]
                x = layer.full(x) if full else layer(x)
                self.outputs[name] = x
            u = x
            for name in self.spec.upsample_layers()[b]:
                layer = self.layers[name]
                u = layer.full(u) if full else layer(u)
                self.outputs[name] = u
            branches.append(u)
            self.block_ns.append(time.perf_counter_ns() - t0)
        width = self.spec.upsample_channels
        change = np.zeros(self.out_shape, dtype=bool)
        active = np.zeros(self.out_shape, dtype=bool)
        for b, u in enumerate(branches):
            dst = self.concat.values[b * width:(b + 1) * width]
            dst[:, u.change] = u.values[:, u.change]
            change |= u.change
            active |= u.active
        self.concat.change = change
        self.concat.active = active
        self.outputs["concat"] = self.concat
        return self.concat

    def forward(self, pseudo: FeatureCanvas) -> FeatureCanvas:
        """Delta pass (a full pass for layers that have not run yet)."""
        return self._run(pseudo, full=False)

    def refresh(self, pseudo: FeatureCanvas) -> FeatureCanvas:
        """Recompute every layer from scratch, discarding accumulators."""
        return self._run(pseudo, full=True)

    def reset(self) -> None:
        for layer in self.layers.values():
            layer.reset()
        self.concat = FeatureCanvas.zeros(self.spec.concat_channels, self.out_shape, dtype=self.dtype)
        self.outputs.clear()

    def inject_fault(self, layer: str) -> None:
        """Drop the first changed site's delta at ``layer`` on the next delta pass."""
        if layer not in self.layers:
            raise KeyError(f"no layer named {layer!r}")
        self.skip_delta_at = layer

    def reset_counts(self) -> None:
        for layer in self.layers.values():
            layer.state.multiplies = 0
            layer.state.full_multiplies = 0


def backbone_forward(pseudo: FeatureCanvas, backbone: Backbone) -> FeatureCanvas:
    return backbone.forward(pseudo)


def count_backbone_multiplies(backbone: Backbone) -> MultiplyCounts:
    per_layer = {n: int(l.multiplies) for n, l in backbone.layers.items()}
    full = {n: int(l.full_multiplies) for n, l in backbone.layers.items()}
    per_block = []
    for b, names in enumerate(backbone.spec.block_layers()):
        names = names + backbone.spec.upsample_layers()[b]
        per_block.append(sum(per_layer[n] for n in names))
    return MultiplyCounts(per_layer, per_block, sum(per_layer.values()), full, sum(full.values()))
