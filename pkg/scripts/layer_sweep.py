"""Single-layer timing sweep over (in_channels, filters) and changed fractions.

For each configuration, times one 3x3 layer's delta pass against a no-reuse
sparse pass on identical controlled inputs and writes a CSV row per method.

    python3 scripts/layer_sweep.py --fractions 0.1,0.25,0.5,1.0 -o sweep.csv
"""
import argparse
import csv
import sys

import numpy as np

from deltapillars.cli import bench_layer


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--in-channels", default="16,32,64,128")
    ap.add_argument("--filters", default="8,16,32,64,128")
    ap.add_argument("--fractions", default="0.25")
    ap.add_argument("--canvas", type=int, default=64, help="canvas side")
    ap.add_argument("--density", type=float, default=0.1)
    ap.add_argument("--strides", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--out", default="-")
    args = ap.parse_args(argv)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["in_channels", "filters", "changed_fraction", "method", "mean_ms", "min_ms",
                     "max_ms", "mean_multiplies"])
    shape = (args.canvas, args.canvas)
    for p in (float(v) for v in args.fractions.split(",")):
        for cin in (int(v) for v in args.in_channels.split(",")):
            for cout in (int(v) for v in args.filters.split(",")):
                runs = bench_layer(shape, cin, cout, args.strides, p, args.density, args.seed)
                for method, (times, mults) in zip(("delta", "full"), runs):
                    t = np.asarray(times) / 1e6
                    writer.writerow([cin, cout, p, method, f"{t.mean():.4f}", f"{t.min():.4f}",
                                     f"{t.max():.4f}", f"{np.mean(mults):.1f}"])
                fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
