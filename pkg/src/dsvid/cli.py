"""Command-line harness: experiment orchestration and CSV emission.

Subcommands: codec-eval, simulate, sweep, train-toy, report, gen-trace.
Every command accepts --config pointing at a JSON file of parameter
defaults; explicit flags win over config values. All randomness flows
from seeds, so re-running a command with the same configuration yields
byte-identical output. Relative output paths resolve against
$DSVID_OUTPUT_DIR (default: current directory).

Exit codes: 0 success, 1 configuration/format error, 2 runtime error.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product

import click
import numpy as np

from . import codec as cd
from . import delivery as dl
from . import entropy as ent
from . import frames as fr
from . import losstrain as lt
from . import netsim as ns
from .frames import InvalidInputError
from .packetize import depacketize, make_map

OUTPUT_DIR_ENV = "DSVID_OUTPUT_DIR"

# Fixed column orders; tests assert emitted headers match these exactly.
CSV_SCHEMAS = {
    "codec_eval": ("level", "loss_rate", "seed", "mean_psnr", "mean_ssim",
                   "bytes_per_frame"),
    "session": ("scheme", "frame_index", "encode_start", "decode_end",
                "delay", "packets_sent", "packets_received", "packets_late",
                "bytes_sent", "quality", "ssim", "skipped"),
    "sweep": ("scheme", "trace", "one_way_delay", "queue_capacity",
              "mean_quality", "display_quality", "mean_ssim", "p95_delay",
              "mean_delay", "delivered_frames", "total_frames"),
    "train_curve": ("iteration", "loss", "distortion", "size_proxy"),
    "report": ("scheme", "sessions", "frames", "mean_psnr", "mean_ssim",
               "p95_delay", "pct_late"),
}


class FormatError(ValueError):
    """Input files do not match the expected schema."""


def _fmt(x) -> str:
    """Numeric cell formatting; floats round-trip float(_fmt(x)) == x."""
    if isinstance(x, str):
        return x
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _default_k_patch(width: int, height: int) -> int:
    """First intra-patch period that tiles the frame exactly."""
    for k in (10, 8, 16, 12, 6, 4, 2, 1):
        try:
            dl.choose_patch_dims((width, height), k)
            return k
        except InvalidInputError:
            continue
    return 1


def _out_path(path: str) -> str:
    if os.path.isabs(path):
        return path
    base = os.environ.get(OUTPUT_DIR_ENV, ".")
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, path)


def _write_csv(path: str, schema_name: str, rows: list):
    with open(_out_path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_SCHEMAS[schema_name])
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return cfg


def _opt(cfg: dict, key: str, flag, default):
    """Flag wins over config file wins over built-in default."""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _parse_floats(text: str) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError:
        raise InvalidInputError(f"not a comma-separated number list: {text!r}")


def _parse_ints(text: str) -> list:
    return [int(v) for v in _parse_floats(text)]


def load_clip(spec: str, max_frames: int | None = None) -> list:
    """A video path (y4m or image directory) or a synthetic-clip spec
    "synthetic:WxHxF[:seed[:motion]]"."""
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        dims = parts[1].split("x") if len(parts) > 1 else []
        if len(dims) != 3:
            raise InvalidInputError(
                f"bad synthetic spec {spec!r}; expected synthetic:WxHxF[:seed[:motion]]")
        w, h, n = (int(v) for v in dims)
        seed = int(parts[2]) if len(parts) > 2 else 0
        motion = int(parts[3]) if len(parts) > 3 else 2
        clip = fr.synthetic_clip(w, h, n, seed=seed, motion=motion)
    else:
        clip = fr.load_video(spec)
    if max_frames:
        clip = clip[:max_frames]
    if not clip:
        raise InvalidInputError(f"{spec}: no frames")
    return clip


def load_trace_spec(spec: str) -> ns.LinkTrace:
    """A trace file path, "constant:RATE_BPS[:PERIOD_MS]", or
    "step:DUR:RATE[,DUR:RATE...]"."""
    if spec.startswith("constant:"):
        parts = spec.split(":")
        period = int(parts[2]) if len(parts) > 2 else 1000
        return ns.constant_trace(float(parts[1]), period)
    if spec.startswith("step:"):
        sched = []
        for chunk in spec[5:].split(","):
            dur, _, rate = chunk.partition(":")
            if not rate:
                raise InvalidInputError(f"bad step chunk {chunk!r}; want DUR:RATE")
            sched.append((float(dur), float(rate)))
        return ns.step_trace(sched)
    return ns.load_trace(spec)


def _levels_from(cfg_levels) -> list:
    all_levels = cd.default_levels()
    if cfg_levels is None:
        return all_levels
    wanted = set(_parse_ints(cfg_levels)) if isinstance(cfg_levels, str) \
        else set(cfg_levels)
    chosen = [lv for lv in all_levels if lv.level_id in wanted]
    if len(chosen) != len(wanted):
        raise InvalidInputError(f"unknown level ids in {sorted(wanted)}")
    return chosen


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group()
def cli():
    """Data-scalable video delivery experiment harness."""


@cli.command("codec-eval")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--video", default=None, help="path or synthetic:WxHxF[:seed[:motion]]")
@click.option("--levels", default=None, help="comma-separated level ids")
@click.option("--loss-rates", default=None, help="comma-separated rates in [0,1]")
@click.option("--seeds", default=None, help="comma-separated seeds")
@click.option("--k-packets", type=int, default=None)
@click.option("--out", default=None, help="output CSV path")
def codec_eval(config, video, levels, loss_rates, seeds, k_packets, out):
    """Loss-resilience sweep: decode quality per (level, loss rate, seed).

    Each level is encoded exactly once; loss is applied to the encoded
    packets, so the byte column is identical across loss rates.
    """
    cfg = _load_config(config)
    clip = load_clip(_opt(cfg, "video", video, "synthetic:128x128x30"))
    chosen = _levels_from(_opt(cfg, "levels", levels, None))
    rates = _parse_floats(_opt(cfg, "loss_rates", loss_rates, "0,0.1,0.2,0.3,0.4"))
    seed_list = _parse_ints(_opt(cfg, "seeds", seeds, "0,1,2"))
    k = int(_opt(cfg, "k_packets", k_packets,
                 dl.packet_count_for(clip[0].width, clip[0].height)))
    rows = []
    for lv in chosen:
        tensors, models, wire = _encode_conventional(clip, lv, k)
        bytes_per_frame = sum(sum(p.wire_size for p in pkts)
                              for pkts in wire) / len(clip)
        for rate in rates:
            for seed in seed_list:
                mp, ms = _lossy_decode_quality(clip, tensors, models, wire,
                                               k, rate, seed)
                rows.append((lv.level_id, rate, seed, mp, ms, bytes_per_frame))
    _write_csv(_opt(cfg, "out", out, "codec_eval.csv"), "codec_eval", rows)


def _encode_conventional(clip, lv, k):
    """Encode a clip at one level (I frame then P frames, sender-side
    decode as the running reference) and packetize every frame."""
    tensors, models, wire = [], [], []
    st = cd.CodecState()
    for i, frame in enumerate(clip):
        if i == 0:
            t = cd.encode_iframe(frame, lv)
        else:
            t = cd.encode_pframe(frame, st, lv)
        st.encoder_reference = cd.decode(
            t, cd.CodecState(decoder_reference=st.encoder_reference))
        model = ent.fit_model(t)
        pmap = make_map(t.num_elements, k, i)
        tensors.append(t)
        models.append(model)
        wire.append(ent.frame_to_packets(t, pmap, model,
                                         frame_index=i, map_seed=i))
    return tensors, models, wire


def _lossy_decode_quality(clip, tensors, models, wire, k, rate, seed):
    """Mean PSNR/SSIM of the receiver chain when each packet is dropped
    independently with probability `rate`."""
    rng = np.random.default_rng(seed * 1_000_003 + int(rate * 1000))
    rx = cd.CodecState()
    tp, ts = 0.0, 0.0
    for i, t in enumerate(tensors):
        keep = [p for p in wire[i] if rng.random() >= rate]
        if keep:
            tensor, _ = ent.packets_to_tensor(keep, t.dims, t.quant_step,
                                              fallback_model=models[i],
                                              ipatch_rect=t.ipatch_rect)
        else:
            pmap = make_map(t.num_elements, k, i)
            tensor = depacketize({}, pmap, t.dims, frame_kind=t.frame_kind,
                                 quant_step=t.quant_step, level_id=t.level_id,
                                 ipatch_rect=t.ipatch_rect)
        if tensor.frame_kind != cd.FRAME_I and rx.decoder_reference is None:
            continue
        out = cd.decode(tensor, rx)
        rx.decoder_reference = out
        tp += fr.psnr(clip[i], out)
        ts += fr.ssim(clip[i], out)
    return tp / len(clip), ts / len(clip)


def _run_session(clip, scheme, trace, delay, queue, beta, cc, cc_initial,
                 fps, k_patch, seed, table):
    config = ns.SimConfig(
        clip, ns.Scheme(scheme), trace,
        path=ns.PathConfig(one_way_delay=delay, queue_capacity=queue),
        policy=dl.DecodePolicy(beta), cc=cc, cc_initial_bps=cc_initial,
        fps=fps, k_patch=k_patch, seed=seed, table=table)
    return ns.simulate(config)


def _session_rows(report: ns.SessionReport) -> list:
    return [(report.scheme, f.frame_index, f.encode_start, f.decode_end,
             f.delay, f.packets_sent, f.packets_received, f.packets_late,
             f.bytes_sent, f.quality, f.ssim, int(f.skipped))
            for f in report.frames]


@cli.command("simulate")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--video", default=None)
@click.option("--scheme", default=None,
              type=click.Choice(ns.SCHEMES, case_sensitive=False))
@click.option("--trace", default=None,
              help="file, constant:RATE[:PERIOD], or step:DUR:RATE[,...]")
@click.option("--delay", type=float, default=None, help="one-way delay, ms")
@click.option("--queue", type=int, default=None, help="queue capacity, packets")
@click.option("--beta", type=float, default=None, help="dB per ms of waiting")
@click.option("--cc", default=None, type=click.Choice(("gcc", "salsify")))
@click.option("--cc-initial-bps", type=float, default=None)
@click.option("--fps", type=float, default=None)
@click.option("--k-patch", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-frames", type=int, default=None)
@click.option("--out", default=None)
def simulate(config, video, scheme, trace, delay, queue, beta, cc,
             cc_initial_bps, fps, k_patch, seed, max_frames, out):
    """Run one delivery session and write its per-frame records."""
    cfg = _load_config(config)
    clip = load_clip(_opt(cfg, "video", video, "synthetic:128x128x50"),
                     _opt(cfg, "max_frames", max_frames, None))
    variant = _opt(cfg, "scheme", scheme, "DataScalable")
    tr = load_trace_spec(_opt(cfg, "trace", trace, "constant:3000000"))
    report = _run_session(
        clip, variant, tr,
        float(_opt(cfg, "delay", delay, 100.0)),
        int(_opt(cfg, "queue", queue, 25)),
        float(_opt(cfg, "beta", beta, 0.02)),
        _opt(cfg, "cc", cc, "gcc"),
        float(_opt(cfg, "cc_initial_bps", cc_initial_bps, 1_000_000.0)),
        float(_opt(cfg, "fps", fps, 25.0)),
        int(_opt(cfg, "k_patch", k_patch,
                 _default_k_patch(clip[0].width, clip[0].height))),
        int(_opt(cfg, "seed", seed, 0)), None)
    _write_csv(_opt(cfg, "out", out, "session.csv"), "session",
               _session_rows(report))
    agg = report.aggregates()
    click.echo(f"{report.scheme}: p95_delay={agg['p95_delay']:.1f}ms "
               f"mean_quality={agg['mean_quality']:.2f}dB "
               f"delivered={agg['delivered_frames']}/{agg['total_frames']}")


def _sweep_job(args):
    (clip, variant, trace_spec, delay, queue, beta, cc, cc_initial, fps,
     k_patch, seed, table) = args
    trace = load_trace_spec(trace_spec)
    report = _run_session(clip, variant, trace, delay, queue, beta, cc,
                          cc_initial, fps, k_patch, seed, table)
    a = report.aggregates()
    return (variant, trace_spec, delay, queue, a["mean_quality"],
            a["display_quality"], a["mean_ssim"], a["p95_delay"],
            a["mean_delay"], a["delivered_frames"], a["total_frames"])


@cli.command("sweep")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--video", default=None)
@click.option("--schemes", default=None, help="comma-separated scheme names")
@click.option("--traces", default=None, help="comma-separated trace specs")
@click.option("--delays", default=None, help="comma-separated one-way delays, ms")
@click.option("--queues", default=None, help="comma-separated queue capacities")
@click.option("--beta", type=float, default=None)
@click.option("--cc", default=None, type=click.Choice(("gcc", "salsify")))
@click.option("--cc-initial-bps", type=float, default=None)
@click.option("--fps", type=float, default=None)
@click.option("--k-patch", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-frames", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", default=None)
def sweep(config, video, schemes, traces, delays, queues, beta, cc,
          cc_initial_bps, fps, k_patch, seed, max_frames, workers, out):
    """Cross product of schemes x traces x delays x queues; one row per
    session, ordered by grid index regardless of worker completion order."""
    cfg = _load_config(config)
    clip = load_clip(_opt(cfg, "video", video, "synthetic:128x128x50"),
                     _opt(cfg, "max_frames", max_frames, None))
    scheme_list = str(_opt(cfg, "schemes", schemes,
                           "DataScalable,FrameSkip")).split(",")
    for s in scheme_list:
        if s not in ns.SCHEMES:
            raise InvalidInputError(f"unknown scheme {s!r}")
    trace_list = str(_opt(cfg, "traces", traces, "constant:3000000")).split(",")
    delay_list = _parse_floats(_opt(cfg, "delays", delays, "100,300"))
    queue_list = _parse_ints(_opt(cfg, "queues", queues, "15,25,35"))
    table = None
    if any(s != "DataScalable" for s in scheme_list):
        table = ns.build_quality_table(clip, cd.default_levels())
    jobs = [(clip, s, t, d, q,
             float(_opt(cfg, "beta", beta, 0.02)),
             _opt(cfg, "cc", cc, "gcc"),
             float(_opt(cfg, "cc_initial_bps", cc_initial_bps, 1_000_000.0)),
             float(_opt(cfg, "fps", fps, 25.0)),
             int(_opt(cfg, "k_patch", k_patch,
                      _default_k_patch(clip[0].width, clip[0].height))),
             int(_opt(cfg, "seed", seed, 0)), table)
            for s, t, d, q in product(scheme_list, trace_list,
                                      delay_list, queue_list)]
    nworkers = int(_opt(cfg, "workers", workers, 1))
    if nworkers > 1:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    _write_csv(_opt(cfg, "out", out, "sweep.csv"), "sweep", rows)


@cli.command("train-toy")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--video", default=None)
@click.option("--patch-size", type=int, default=None, help="square patch side, px")
@click.option("--num-patches", type=int, default=None)
@click.option("--code-dim", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--distribution", type=click.Choice(("1", "2", "3")), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--weights-out", default=None)
@click.option("--curve-out", default=None)
def train_toy(config, video, patch_size, num_patches, code_dim, alpha,
              learning_rate, iterations, batch_size, distribution, seed,
              weights_out, curve_out):
    """Train the linear erasure-robust codec on luma patches."""
    cfg = _load_config(config)
    clip = load_clip(_opt(cfg, "video", video, "synthetic:128x128x20"))
    side = int(_opt(cfg, "patch_size", patch_size, 4))
    count = int(_opt(cfg, "num_patches", num_patches, 400))
    data = patch_dataset(clip, side, count)
    dist = {
        "1": lt.DISTRIBUTION_1, "2": lt.DISTRIBUTION_2, "3": lt.DISTRIBUTION_3,
    }[str(_opt(cfg, "distribution", distribution, "2"))]
    train_cfg = lt.TrainConfig(
        alpha=float(_opt(cfg, "alpha", alpha, 0.0)),
        learning_rate=float(_opt(cfg, "learning_rate", learning_rate, 1e-3)),
        iterations=int(_opt(cfg, "iterations", iterations, 2000)),
        batch_size=int(_opt(cfg, "batch_size", batch_size, 16)),
        seed=int(_opt(cfg, "seed", seed, 0)),
        erasure=dist,
        code_dim=_opt(cfg, "code_dim", code_dim, None))
    curve = _out_path(_opt(cfg, "curve_out", curve_out, "train_curve.csv"))
    codec = lt.train(data, train_cfg, curve_path=curve)
    codec.save(_out_path(_opt(cfg, "weights_out", weights_out, "toy_codec.bin")))
    click.echo(f"trained code_dim={codec.code_dim} patch_dim={codec.patch_dim}")


def patch_dataset(clip, side: int, count: int) -> np.ndarray:
    """Non-overlapping luma patches, zero-mean and scaled to unit-ish range."""
    rows = []
    for frame in clip:
        y = frame.luma.astype(np.float64)
        for r in range(0, frame.height - side + 1, side):
            for c in range(0, frame.width - side + 1, side):
                rows.append(y[r:r + side, c:c + side].ravel())
                if len(rows) >= count:
                    return (np.array(rows) - 128.0) / 64.0
    if not rows:
        raise InvalidInputError("clip too small for any patch")
    return (np.array(rows) - 128.0) / 64.0


@cli.command("report")
@click.argument("csvs", nargs=-1, type=click.Path(exists=True))
@click.option("--late-ms", type=float, default=200.0, show_default=True,
              help="frame delay counted as user-perceivable")
@click.option("--out", default=None, help="write summary CSV instead of stdout")
def report(csvs, late_ms, out):
    """Summarize per-frame session CSVs: one row per scheme, pooled over
    sessions (mean of means weighted by frame count)."""
    per_scheme: dict = {}
    session_count: dict = {}
    for path in csvs:
        schemes_here = set()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != CSV_SCHEMAS["session"]:
                raise FormatError(f"{path}: header does not match the "
                                  f"session schema")
            for row in reader:
                rec = dict(zip(header, row))
                schemes_here.add(rec["scheme"])
                agg = per_scheme.setdefault(rec["scheme"], {
                    "frames": 0, "psnr": [], "ssim": [], "delays": [],
                    "late": 0})
                agg["frames"] += 1
                delay = float(rec["delay"])
                if not math.isnan(delay):
                    agg["delays"].append(delay)
                    if delay > late_ms:
                        agg["late"] += 1
                if rec["skipped"] == "0":
                    if not math.isnan(float(rec["quality"])):
                        agg["psnr"].append(float(rec["quality"]))
                    if not math.isnan(float(rec["ssim"])):
                        agg["ssim"].append(float(rec["ssim"]))
        for s in schemes_here:
            session_count[s] = session_count.get(s, 0) + 1
    rows = []
    for scheme in sorted(per_scheme):
        a = per_scheme[scheme]
        mean_psnr = sum(a["psnr"]) / len(a["psnr"]) if a["psnr"] else math.nan
        mean_ssim = sum(a["ssim"]) / len(a["ssim"]) if a["ssim"] else math.nan
        p95 = ns.percentile_nearest_rank(a["delays"], 95.0)
        pct_late = 100.0 * a["late"] / a["frames"] if a["frames"] else math.nan
        rows.append((scheme, session_count.get(scheme, 0), a["frames"],
                     mean_psnr, mean_ssim, p95, pct_late))
    if out:
        _write_csv(out, "report", rows)
    else:
        click.echo(",".join(CSV_SCHEMAS["report"]))
        for row in rows:
            click.echo(",".join(_fmt(v) if not isinstance(v, str) else v
                                for v in row))


@cli.command("gen-trace")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--rate-bps", type=float, default=None,
              help="constant-rate trace at this bitrate")
@click.option("--duration-ms", type=int, default=None)
@click.option("--step", "steps", multiple=True,
              help="DUR_MS:RATE_BPS segment; repeatable")
@click.option("--repeat", type=int, default=None,
              help="repeat the step list this many times")
@click.option("--out", default=None)
def gen_trace(config, rate_bps, duration_ms, steps, repeat, out):
    """Write a trace file: one millisecond timestamp per line, each line
    one 1500-byte delivery opportunity, replayed cyclically."""
    cfg = _load_config(config)
    steps = list(steps) or list(cfg.get("step", []))
    nrep = int(_opt(cfg, "repeat", repeat, 1))
    if steps:
        sched = []
        for chunk in steps:
            dur, _, rate = str(chunk).partition(":")
            if not rate:
                raise InvalidInputError(f"bad step {chunk!r}; want DUR_MS:RATE_BPS")
            sched.append((float(dur), float(rate)))
        trace = ns.step_trace(sched * nrep)
    else:
        rate = float(_opt(cfg, "rate_bps", rate_bps, 3_000_000.0))
        duration = int(_opt(cfg, "duration_ms", duration_ms, 1000))
        trace = ns.constant_trace(rate, duration)
    path = _out_path(_opt(cfg, "out", out, "link.trace"))
    with open(path, "w") as f:
        f.write("\n".join(str(t) for t in trace.opportunities) + "\n")
    click.echo(f"wrote {len(trace.opportunities)} opportunities "
               f"({trace.mean_rate_bps() / 1e6:.2f} Mbps mean) to {path}")


CONFIG_ERRORS = (InvalidInputError, ns.ConfigError, ns.TraceFormatError,
                 FormatError, json.JSONDecodeError, FileNotFoundError)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except CONFIG_ERRORS as e:
        click.echo(f"config error: {e}", err=True)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        click.echo(f"runtime error: {type(e).__name__}: {e}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
