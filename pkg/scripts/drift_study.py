"""Long-run numerical drift of a 32-bit delta layer against a from-scratch reference.

Feeds the toy scene's pseudo-image through one 3x3 layer with BN and ReLU
for many strides without refresh, optionally refreshing every R strides,
and writes the relative difference to the reference per stride.

    python3 scripts/drift_study.py --strides 10000 --every 10 -o drift.csv
"""
import argparse
import csv
import sys

import numpy as np

from deltapillars import oracle, stream as st
from deltapillars.grid import GridConfig
from deltapillars.pfn import EncoderWeights
from deltapillars.pipeline import StreamingPipeline, run_stream
from deltapillars.sconv import ConvSpec, DeltaConvLayer


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strides", type=int, default=10000)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--refresh-every", type=int, default=0)
    ap.add_argument("--every", type=int, default=1, help="compare every N strides")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--out", default="-")
    args = ap.parse_args(argv)

    cfg = GridConfig.square(64)
    scene = st.preset_drone(cfg.x_range[1])
    data = st.generate(scene, st.ScannerConfig(pulse_rate=24000.0), args.strides * cfg.stride, seed=args.seed)
    c = args.channels
    rng = np.random.default_rng(args.seed)
    spec = ConvSpec.random(c, c, rng=rng)
    scale, shift = rng.uniform(0.5, 1.5, c), rng.uniform(-0.1, 0.1, c)
    pipe = StreamingPipeline(cfg, EncoderWeights.random(args.seed, channels=c), None)
    layer = DeltaConvLayer(spec, scale, shift, cfg.shape)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["stride_index", "max_abs_diff", "max_rel_diff", "active_sites", "changed_sites"])
    for m in run_stream(data, pipe, t_end=args.strides * cfg.stride):
        r = args.refresh_every
        out = layer.full(pipe.canvas) if r and m.stride_index % r == 0 else layer(pipe.canvas)
        if m.stride_index % args.every:
            continue
        ref, _, _ = oracle.dense_layer(pipe.canvas.values, pipe.canvas.active, spec, scale, shift)
        rep = oracle.compare(out.values, ref)
        writer.writerow([m.stride_index, f"{rep.max_abs_diff:.3e}", f"{rep.max_rel_diff:.3e}",
                         m.active_sites, m.changed_sites])
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
