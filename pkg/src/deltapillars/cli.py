"""Command-line tool: gen, run, verify, bench, stats.

Exit codes: 0 success, 2 verification failure, 1 any other error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import stream as st
from .backbone import BackboneSpec, BackboneWeights
from .grid import GridConfig, GridError
from .pfn import EncoderWeights
from .pipeline import WALL_CLOCK_FIELDS, StreamingPipeline, VerificationFailure, Verifier, run_stream
from .sconv import ConvSpec, LayerState, forward_delta, forward_full
from .synthetic import controlled_stream

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


class IoError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; every field can be set in a key=value file or by flag."""

    stream: str | None = None         # stream file (CSV or SSCR); excludes preset
    preset: str | None = None         # scene preset; "drone" when no source is given
    duration: float = 1.0             # seconds generated for presets
    pulse_rate: float = 240000.0
    drop: float = 0.0
    seed: int = 0                     # scene and weight seed
    weights: str | None = None        # bundle directory (encoder.sscw + backbone manifest)
    grid: str = "504x504"
    pillar_size: float = 0.16
    z_min: float = -10.0
    z_max: float = 10.0
    window_ms: float = 100.0
    stride_ms: float = 10.0
    max_points: int = 100
    max_pillars: int = 12000
    on_overflow: str = "error"
    channels: int = 64
    backbone: bool = True
    refresh_every: int = 0
    exact_check: bool = False
    tolerance: float = 1e-4
    metrics: str | None = None
    limit: float | None = None        # stop after this many seconds of stream
    inject_fault: str | None = None   # "layer" or "layer@stride" for verify

    def grid_shape(self) -> tuple[int, int]:
        try:
            w, h = (int(v) for v in self.grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"grid must look like WxH, got {self.grid!r}") from None
        if w < 1 or h < 1:
            raise ConfigError("grid sides must be positive")
        return w, h

    def grid_config(self) -> GridConfig:
        w, h = self.grid_shape()
        ps = self.pillar_size
        return GridConfig(pillar_size=ps, x_range=(0.0, w * ps), y_range=(-h * ps / 2, h * ps / 2),
                          z_range=(self.z_min, self.z_max), max_points=self.max_points,
                          max_pillars=self.max_pillars, window=self.window_ms / 1000.0,
                          stride=self.stride_ms / 1000.0, on_overflow=self.on_overflow)


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


_FIELD_TYPES = {f.name: f.default for f in fields(RunConfig)}
_NUMERIC_OPTIONAL = {"limit"}


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        default = _FIELD_TYPES[key]
        if key in _NUMERIC_OPTIONAL:
            out[key] = float(value)
        elif default is None:
            out[key] = value
        else:
            out[key] = _coerce(value, default)
    return out


def build_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as e:
            raise IoError(f"cannot read config {args.config}: {e.strerror}") from None
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if values.get("stream") and values.get("preset"):
        raise ConfigError("give either a stream file or a preset, not both")
    cfg = RunConfig(**values)
    if cfg.stream is None and cfg.preset is None:
        cfg.preset = "drone"
    if cfg.preset is not None and cfg.preset not in st.PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; choose from {sorted(st.PRESETS)}")
    if cfg.exact_check and cfg.refresh_every <= 0:
        raise ConfigError("--exact-check needs --refresh-every > 0")
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if v is not None:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# stream and weight sources

def load_stream(cfg: RunConfig) -> np.ndarray:
    if cfg.stream:
        try:
            data = st.read_stream(cfg.stream)
        except OSError as e:
            raise IoError(f"cannot read stream {cfg.stream}: {e.strerror}") from None
        if cfg.limit is not None:
            data = data[data["t"] <= cfg.limit]
        return data
    gcfg = cfg.grid_config()
    scene = st.PRESETS[cfg.preset](gcfg.x_range[1] - gcfg.x_range[0])
    scanner = st.ScannerConfig(pulse_rate=cfg.pulse_rate, drop_probability=cfg.drop)
    duration = cfg.duration if cfg.limit is None else min(cfg.duration, cfg.limit)
    return st.generate(scene, scanner, duration, seed=cfg.seed)


def load_weights(cfg: RunConfig):
    if cfg.weights:
        d = Path(cfg.weights)
        try:
            enc = EncoderWeights.load(d / "encoder.sscw")
            bb = BackboneWeights.load(d) if cfg.backbone else None
        except OSError as e:
            raise IoError(f"cannot read weights from {d}: {e.strerror}") from None
        return enc, bb
    enc = EncoderWeights.random(cfg.seed, channels=cfg.channels)
    bb = BackboneWeights.random(BackboneSpec(in_channels=cfg.channels), seed=cfg.seed + 1) \
        if cfg.backbone else None
    return enc, bb


def save_weights(directory, enc: EncoderWeights, bb: BackboneWeights | None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    enc.save(d / "encoder.sscw")
    if bb is not None:
        bb.save(d)


def make_pipeline(cfg: RunConfig):
    enc, bb = load_weights(cfg)
    dtype = np.float64 if cfg.exact_check else np.float32
    return StreamingPipeline(cfg.grid_config(), enc, bb, dtype=dtype, refresh_every=cfg.refresh_every)


def _t_end(cfg: RunConfig, data: np.ndarray) -> float | None:
    if cfg.stream:
        return cfg.limit
    return cfg.duration if cfg.limit is None else min(cfg.duration, cfg.limit)


def _open_out(path):
    try:
        p = Path(path)
        return open(p, "w", newline="")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e.strerror}") from None


# commands

def cmd_gen(args) -> int:
    scene = st.PRESETS[args.preset](args.extent)
    scanner = st.ScannerConfig(pulse_rate=args.pulse_rate, drop_probability=args.drop)
    data = st.generate(scene, scanner, args.duration, seed=args.seed)
    try:
        st.write_stream(data, args.out, fmt=args.format)
    except OSError as e:
        raise IoError(f"cannot write {args.out}: {e.strerror}") from None
    print(f"wrote {len(data)} records to {args.out}")
    return EXIT_OK


def _run(cfg: RunConfig, verify: bool, save_weights_to=None, quiet=False) -> int:
    data = load_stream(cfg)
    pipe = make_pipeline(cfg)
    if save_weights_to:
        save_weights(save_weights_to, pipe.encoder, pipe.weights)
    verifier = Verifier(pipe, data, cfg.tolerance, exact=cfg.exact_check) if verify else None
    fault_layer, fault_stride = None, None
    if cfg.inject_fault:
        if pipe.backbone is None:
            raise ConfigError("fault injection needs the backbone")
        fault_layer, _, s = cfg.inject_fault.partition("@")
        fault_stride = int(s) if s else 2
        if fault_layer not in pipe.backbone.layers:
            raise ConfigError(f"no layer named {fault_layer!r}")
    out = _open_out(cfg.metrics) if cfg.metrics else None
    n = 0
    worst = 0.0
    try:
        for packet in st.packetize(data, pipe.cfg.stride, t_end=_t_end(cfg, data)):
            if fault_layer and pipe.stride_index + 1 == fault_stride:
                pipe.backbone.inject_fault(fault_layer)
            m = pipe.step(packet)
            if verifier is not None:
                verifier.check(m)
                worst = max(worst, m.oracle_max_rel_diff)
            if out:
                out.write(json.dumps(m.to_dict()) + "\n")
            n += 1
    finally:
        if out:
            out.close()
    if not quiet:
        if verify:
            print(f"verified {n} strides: worst relative diff {worst:.3e}, 0 soundness violations")
        else:
            print(f"processed {n} strides" + (f", metrics in {cfg.metrics}" if cfg.metrics else ""))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    return _run(cfg, verify=False, save_weights_to=getattr(args, "save_weights", None))


def cmd_verify(args) -> int:
    cfg = build_config(args)
    try:
        return _run(cfg, verify=True)
    except VerificationFailure as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY


BENCH_HEADER = ["kind", "name", "in_channels", "filters", "method", "strides",
                "mean_ms", "min_ms", "max_ms", "mean_multiplies", "total_multiplies"]


def _row(kind, name, cin, cout, method, times_ns, mults):
    t = np.asarray(times_ns, dtype=np.float64) / 1e6
    return [kind, name, cin, cout, method, len(times_ns), f"{t.mean():.6f}", f"{t.min():.6f}",
            f"{t.max():.6f}", f"{np.mean(mults):.1f}", int(np.sum(mults))]


def bench_layer(shape, cin, cout, strides, change_fraction, density, seed):
    """Time delta vs. no-reuse sparse passes of one 3x3 layer on identical inputs."""
    spec = ConvSpec.random(cin, cout, seed=seed)
    seq = list(controlled_stream(shape, cin, strides + 1, change_fraction, density, seed=seed))
    state = LayerState.create(spec, shape)
    forward_full(seq[0], spec, state)
    delta_t, delta_m, full_t, full_m = [], [], [], []
    for frame in seq[1:]:
        t0 = time.perf_counter_ns()
        forward_delta(frame, spec, state)
        delta_t.append(time.perf_counter_ns() - t0)
        delta_m.append(state.multiplies)
        fresh = LayerState.create(spec, shape)
        t0 = time.perf_counter_ns()
        forward_full(frame, spec, fresh)
        full_t.append(time.perf_counter_ns() - t0)
        full_m.append(fresh.multiplies)
    return (delta_t, delta_m), (full_t, full_m)


def cmd_bench(args) -> int:
    ins = [int(v) for v in args.in_channels.split(",") if v.strip()]
    outs = [int(v) for v in args.filters.split(",") if v.strip()]
    w, h = RunConfig(grid=args.canvas).grid_shape()
    seed = args.seed if args.seed is not None else RunConfig.seed
    fh = _open_out(args.out) if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for cin in ins:
            for cout in outs:
                (dt, dm), (ft, fm) = bench_layer((h, w), cin, cout, args.strides,
                                                 args.changed_fraction, args.density, seed)
                writer.writerow(_row("layer", "conv3x3", cin, cout, "delta", dt, dm))
                writer.writerow(_row("layer", "conv3x3", cin, cout, "full", ft, fm))
        if args.blocks:
            cfg = build_config(args)
            data = load_stream(cfg)
            for method, refresh in (("delta", 0), ("full", 1)):
                cfg.refresh_every = refresh
                pipe = make_pipeline(cfg)
                times, mults = [], []
                for m in run_stream(data, pipe, t_end=_t_end(cfg, data)):
                    times.append(list(pipe.backbone.block_ns))
                    mults.append(m.block_multiplies)
                times, mults = np.asarray(times), np.asarray(mults)
                for b in range(times.shape[1] if len(times) else 0):
                    writer.writerow(_row("block", f"block{b + 1}", "", "", method,
                                         times[1:, b] if len(times) > 1 else times[:, b],
                                         mults[1:, b] if len(mults) > 1 else mults[:, b]))
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def read_metrics(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e.strerror}") from None
    records = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise st.ParseError(f"{path}:{n}: {e.msg}") from None
        if not isinstance(rec, dict) or "stride_index" not in rec:
            raise st.ParseError(f"{path}:{n}: not a stride record")
        records.append(rec)
    return records


def _describe(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


def summarize(records: list[dict], budget_ms: float | None = None, budget_stage: str = "backbone") -> dict:
    def col(key):
        return [r.get(key, 0) or 0 for r in records]

    ratios = [r["changed_sites"] / r["active_sites"] for r in records if r.get("active_sites")]
    pfn, pfn_full = sum(col("pfn_ops")), sum(col("pfn_ops_full"))
    mul, mul_full = sum(col("multiplies")), sum(col("multiplies_full"))
    out = {
        "strides": len(records),
        "active_sites": _describe(col("active_sites")),
        "changed_sites": _describe(col("changed_sites")),
        "changed_active_ratio": _describe(ratios),
        "pfn_ops_reduction": 1 - pfn / pfn_full if pfn_full else None,
        "multiply_reduction": 1 - mul / mul_full if mul_full else None,
    }
    for f in WALL_CLOCK_FIELDS:
        out[f.replace("_ns", "_ms")] = _describe(np.asarray(col(f), dtype=np.float64) / 1e6)
    if budget_ms is not None:
        stage = np.asarray(col(f"{budget_stage}_ns"), dtype=np.float64) / 1e6
        out["budget_ms"] = budget_ms
        out["budget_stage"] = budget_stage
        out["budget_exceed_fraction"] = float(np.mean(stage > budget_ms)) if len(stage) else 0.0
    return out


CUMULATIVE_HEADER = ["stride_index", "pfn_ops", "pfn_ops_full", "multiplies", "multiplies_full"]


def cumulative_rows(records: list[dict]):
    totals = [0, 0, 0, 0]
    for r in records:
        for i, k in enumerate(CUMULATIVE_HEADER[1:]):
            totals[i] += r.get(k, 0) or 0
        yield [r["stride_index"], *totals]


def cmd_stats(args) -> int:
    records = read_metrics(args.metrics_file)
    summary = summarize(records, args.budget_ms, args.budget_stage)
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        with _open_out(args.out) as fh:
            fh.write(text + "\n")
    if args.cumulative:
        with _open_out(args.cumulative) as fh:
            writer = csv.writer(fh)
            writer.writerow(CUMULATIVE_HEADER)
            writer.writerows(cumulative_rows(records))
    return EXIT_OK


# argument parsing

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--stream", help="stream file (CSV or SSCR, optionally .gz)")
    src.add_argument("--preset", choices=sorted(st.PRESETS), help="generate a scene instead (default drone)")
    p.add_argument("--duration", type=float, help="seconds to generate for presets (default 1)")
    p.add_argument("--pulse-rate", type=float, help="generator pulses per second (default 240000)")
    p.add_argument("--drop", type=float, help="generator pulse drop probability (default 0)")
    p.add_argument("--seed", type=int, help="scene and weight seed (default 0)")
    p.add_argument("--weights", help="weights bundle directory (default: seeded random)")
    p.add_argument("--grid", help="grid size WxH in pillars (default 504x504)")
    p.add_argument("--pillar-size", type=float, help="pillar side in metres (default 0.16)")
    p.add_argument("--window-ms", type=float, help="sliding window length (default 100)")
    p.add_argument("--stride-ms", type=float, help="window advance per stride (default 10)")
    p.add_argument("--max-points", type=int, help="points per pillar (default 100)")
    p.add_argument("--max-pillars", type=int, help="active pillars (default 12000)")
    p.add_argument("--on-overflow", choices=["error", "drop-newest"], help="capacity policy (default error)")
    p.add_argument("--channels", type=int, help="pillar feature channels (default 64)")
    p.add_argument("--no-backbone", dest="backbone", action="store_const", const=False,
                   help="stop after the pillar encoder")
    p.add_argument("--refresh-every", type=int, help="full recompute every N strides (default 0 = never)")
    p.add_argument("--exact-check", action="store_const", const=True,
                   help="64-bit features; refresh strides must match the reference bit for bit")
    p.add_argument("--tolerance", type=float, help="relative tolerance for verify (default 1e-4)")
    p.add_argument("--metrics", help="JSONL output, one record per stride")
    p.add_argument("--limit", type=float, help="stop after this many seconds of stream")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltapillars", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic stream file")
    g.add_argument("--preset", choices=sorted(st.PRESETS), default="wall")
    g.add_argument("--duration", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--drop", type=float, default=0.0)
    g.add_argument("--pulse-rate", type=float, default=240000.0)
    g.add_argument("--extent", type=float, default=80.64, help="scene scale in metres (default 80.64)")
    g.add_argument("--format", choices=["csv", "sscr"], help="default: from the file extension")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="stream packets through grid, encoder and backbone")
    _add_run_flags(r)
    r.add_argument("--save-weights", help="write the weights used to this directory")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run and compare every stride with a full recompute")
    _add_run_flags(v)
    v.add_argument("--inject-fault", help="drop one delta at LAYER[@STRIDE] (default stride 2)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time delta vs. no-reuse sparse convolution")
    _add_run_flags(b)
    b.add_argument("--in-channels", default="16,32,64,128")
    b.add_argument("--filters", default="8,16,32,64,128")
    b.add_argument("--strides", type=int, default=20, help="timed strides per pair")
    b.add_argument("--changed-fraction", type=float, default=0.25)
    b.add_argument("--canvas", default="64x64", help="layer sweep canvas WxH (default 64x64)")
    b.add_argument("--density", type=float, default=0.1, help="active fraction of the bench canvas")
    b.add_argument("--blocks", action="store_true", help="also time each backbone block on the stream")
    b.add_argument("-o", "--out", help="CSV path (default stdout)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("stats", help="summarize a metrics file")
    s.add_argument("metrics_file")
    s.add_argument("--budget-ms", type=float)
    s.add_argument("--budget-stage", choices=["grid", "pfn", "backbone", "total"], default="backbone")
    s.add_argument("--cumulative", help="write cumulative op counts per stride to this CSV")
    s.add_argument("-o", "--out", help="also write the summary JSON here")
    s.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (IoError, ConfigError, GridError, st.StreamError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
