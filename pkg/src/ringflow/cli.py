"""Command-line front end.

Exit codes: 0 success, 1 input or domain error, 2 usage error, 3 a fit did
not converge (its report is still written).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import (
    ChannelParams,
    DispersionInputs,
    dispersion_coefficient,
    normal_concentration,
    peak_times,
    wrapped_concentration,
)
from .dataset import (
    read_report,
    read_trace,
    report_from_fit,
    report_params,
    report_timestamp,
    synth_dataset,
    mixture_dataset_spec,
    write_dataset,
    write_report,
    write_trace,
)
from .errors import CapacityError, GridMismatchError, RingflowError
from .fitting import (
    DEFAULT_DIST_STARTS,
    DEFAULT_SCALAR_STARTS,
    acc_space,
    dist_space,
    fit_acc,
    fit_dist,
    fit_injection,
    injection_space,
)
from .pbs import MAX_PARTICLE_STEPS, PbsConfig, observe_bin, run_pbs
from .signal import InjectionParams, IntensityTrace

SEED_ENV = "RINGFLOW_SEED"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3

_UNITS = {
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "min": 60.0, "h": 3600.0},
    "velocity": {"m/s": 1.0, "cm/s": 1e-2, "mm/s": 1e-3, "um/s": 1e-6, "µm/s": 1e-6},
    "diffusion": {"m2/s": 1.0, "m^2/s": 1.0, "cm2/s": 1e-4, "mm2/s": 1e-6, "um2/s": 1e-12},
}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([^\d\s].*)?$")


def parse_quantity(text, kind):
    """Parse ``"0.39mm"``-style input into an SI float.

    A bare number is taken to be SI already.
    """
    m = _QUANTITY.match(str(text))
    if not m:
        raise ValueError(f"not a {kind}: {text!r}")
    value = float(m.group(1))
    unit = (m.group(2) or "").strip()
    if not unit:
        return value
    table = _UNITS[kind]
    if unit not in table:
        raise ValueError(f"unknown {kind} unit {unit!r}; use one of {', '.join(table)}")
    return value * table[unit]


def _quantity(kind):
    def convert(text):
        try:
            return parse_quantity(text, kind)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    convert.__name__ = kind
    return convert


_length = _quantity("length")
_time = _quantity("time")
_velocity = _quantity("velocity")
_diffusion = _quantity("diffusion")


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise RingflowError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


# -- channel flags ---------------------------------------------------------------


def _add_channel_flags(p, need_x=True):
    g = p.add_argument_group("channel")
    g.add_argument("--l-eff", type=_length, required=True, help="loop circumference (e.g. 1mm)")
    g.add_argument("--v-eff", type=_velocity, required=True, help="mean flow velocity (e.g. 50um/s)")
    g.add_argument("--d-eff", type=_diffusion, help="effective diffusion coefficient")
    g.add_argument("--d-molecular", type=_diffusion,
                   help="molecular diffusion coefficient; with --r0 gives the effective value")
    g.add_argument("--r0", type=_length, help="vessel radius")
    if need_x:
        g.add_argument("--x", type=_length, required=True, help="receiver position along the loop")


def _effective_d(args, parser):
    if args.d_eff is not None:
        if args.d_molecular is not None:
            parser.error("give either --d-eff or --d-molecular/--r0, not both")
        return args.d_eff
    if args.d_molecular is None or args.r0 is None:
        parser.error("need --d-eff, or --d-molecular together with --r0")
    return dispersion_coefficient(DispersionInputs(args.d_molecular, args.r0, args.v_eff))


def _channel(args, parser, x):
    d_eff = _effective_d(args, parser)
    if not 0 <= x <= args.l_eff:
        raise RingflowError(f"x={x} m lies outside the loop [0, {args.l_eff}] m")
    return ChannelParams(d_eff, args.v_eff, args.l_eff, 0.0 if x == args.l_eff else x)


# -- analytic --------------------------------------------------------------------


def cmd_analytic(args, parser):
    q = _channel(args, parser, args.x)
    n = int(round(args.t_end / args.dt))
    if n < 2:
        raise RingflowError("t_end must span at least 2 time steps")
    t = args.dt * np.arange(1, n + 1)
    scale = q.l_eff if args.normalization == "steady-state" else 1.0
    meta = {
        "source": "analytic",
        "d_eff": repr(q.d_eff),
        "v_eff": repr(q.v_eff),
        "l_eff": repr(q.l_eff),
        "x": repr(args.x),
        "normalization": args.normalization,
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pn = IntensityTrace(args.dt, scale * normal_concentration(q, args.x, t), t0=t[0],
                        metadata={**meta, "model": "normal"})
    pwn = IntensityTrace(args.dt, scale * wrapped_concentration(q, args.x, t), t0=t[0],
                         metadata={**meta, "model": "wrapped"})
    write_trace(pn, out / f"{args.prefix}.pn.csv")
    write_trace(pwn, out / f"{args.prefix}.pwn.csv")
    summary = {
        "command": "analytic",
        "d_eff": q.d_eff,
        "files": [str(out / f"{args.prefix}.pn.csv"), str(out / f"{args.prefix}.pwn.csv")],
        "pwn_tail": float(pwn.samples[-1]),
    }
    if args.peaks is not None:
        if q.v_eff == 0:
            raise RingflowError("peak times need v_eff > 0")
        summary["peak_times"] = peak_times(q, args.peaks)
        _write_json(out / f"{args.prefix}.peaks.json", {"k": list(range(args.peaks + 1)),
                                                       "t_max": summary["peak_times"]})
    _emit(summary)
    return EXIT_OK


# -- simulate --------------------------------------------------------------------


def _suggest(cfg):
    scale = MAX_PARTICLE_STEPS / cfg.particle_steps
    particles = int(cfg.n_particles * scale)
    if particles >= 1:
        return f"--particles {particles} (keeping dt, t_end and realizations)"
    return f"--particles 1 --realizations {max(1, int(cfg.n_realizations * scale * cfg.n_particles))}"


def cmd_simulate(args, parser):
    seed = args.seed if args.seed is not None else _default_seed()
    cfg = PbsConfig(
        l_eff=args.l_eff,
        r0=args.r0,
        d_molecular=args.d_molecular,
        v_eff=args.v_eff,
        n_particles=args.particles,
        dt=args.dt,
        t_end=args.t_end,
        n_realizations=args.realizations,
        master_seed=seed,
        bin_width=args.bin_width,
        sample_interval=args.sample_interval,
    )
    if not 0 <= args.x <= cfg.l_eff:
        raise RingflowError(f"x={args.x} m lies outside the loop [0, {cfg.l_eff}] m")
    print(f"particle-step budget: {cfg.particle_steps:.3e} of {MAX_PARTICLE_STEPS:.0e} allowed",
          file=sys.stderr)
    if cfg.particle_steps > MAX_PARTICLE_STEPS:
        raise CapacityError(f"{cfg.particle_steps:.3e} particle-steps exceeds the budget; try {_suggest(cfg)}")
    result = run_pbs(cfg, threads=args.threads)
    trace = observe_bin(result, args.x, normalization=args.normalization)
    write_trace(trace, args.out)
    _emit({
        "command": "simulate",
        "file": str(args.out),
        "bin_center": result.bin_center(args.x),
        "bin_width": result.bin_width,
        "particle_steps": cfg.particle_steps,
        "seed": seed,
    })
    return EXIT_OK


# -- fit ------------------------------------------------------------------------


def _injection_from(args):
    if args.injection_report:
        rep = read_report(args.injection_report)
        if rep.kind != "injection":
            raise RingflowError(f"{args.injection_report} is a {rep.kind} report, not injection")
        return report_params(rep)
    if args.t_w is None:
        return None
    return InjectionParams(args.t_w, args.t_0)


def cmd_fit(args, parser):
    seed = args.seed if args.seed is not None else _default_seed()
    trace = read_trace(args.trace)
    injection = None
    if args.model == "injection":
        space = injection_space()
        starts = args.starts or DEFAULT_SCALAR_STARTS
        result = fit_injection(trace, space, starts=starts, seed=seed, threads=args.threads)
    elif args.model == "acc":
        space = acc_space()
        starts = args.starts or DEFAULT_SCALAR_STARTS
        result = fit_acc(trace, space, starts=starts, seed=seed, threads=args.threads)
    else:
        injection = _injection_from(args)
        if injection is None:
            parser.error("fit --model dist needs --t-w/--t-0 or --injection-report")
        include = []
        for path in args.nest_from or ():
            rep = read_report(path)
            if not rep.kind.startswith("dist-"):
                raise RingflowError(f"{path} is not a distribution report")
            include.append(report_params(rep))
        space = dist_space()
        starts = args.starts or DEFAULT_DIST_STARTS
        result = fit_dist(trace, args.n, injection, space, starts=starts, seed=seed,
                          threads=args.threads, include=include)
    report = report_from_fit(result, args.trace, space, injection=injection,
                             timestamp=report_timestamp(args.timestamp))
    write_report(report, args.out)
    if args.model_out:
        write_trace(result.model, args.model_out)
    _emit({
        "command": "fit",
        "kind": report.kind,
        "rmse": report.rmse,
        "converged": report.converged,
        "report": str(args.out),
        "warnings": report.warnings,
    })
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# -- compare ----------------------------------------------------------------------


def _steady_mismatch(a, b, tail_fraction=0.2, rtol=0.5):
    n_tail = max(1, math.ceil(tail_fraction * a.size))
    ta, tb = float(np.mean(a[-n_tail:])), float(np.mean(b[-n_tail:]))
    scale = max(abs(ta), abs(tb))
    return scale > 0 and abs(ta - tb) > rtol * scale


def cmd_compare(args, parser):
    trace = read_trace(args.trace)
    times = trace.times
    if args.reference:
        ref = read_trace(args.reference)
        if ref.same_grid(trace):
            values = ref.samples
        elif args.resample:
            values = np.interp(times, ref.times, ref.samples)
        else:
            raise GridMismatchError(
                f"{args.trace} and {args.reference} use different grids; pass --resample"
            )
        model = "reference"
    else:
        if args.l_eff is None or args.v_eff is None:
            parser.error("compare needs --reference or the channel flags --l-eff/--v-eff")
        x = args.x
        if x is None:
            if "x" not in trace.metadata:
                parser.error("--x is required when the trace has no 'x' metadata")
            x = float(trace.metadata["x"])
        q = _channel(args, parser, x)
        if np.any(times <= 0):
            raise RingflowError("analytic comparison needs sample times t > 0")
        func = wrapped_concentration if args.against == "pwn" else normal_concentration
        width = args.bin_width
        if width is None and args.window == "bin" and "bin_width" in trace.metadata:
            width = float(trace.metadata["bin_width"])
        if args.window == "bin" and width:
            centre = float(trace.metadata.get("bin_center", x))
            nodes, weights = np.polynomial.legendre.leggauss(8)
            xs = np.mod(centre + 0.5 * width * nodes, q.l_eff)
            values = sum(0.5 * w * func(q, xi, times) for xi, w in zip(xs, weights))
        else:
            values = func(q, x, times)
        if trace.metadata.get("normalization") == "steady-state":
            values = values * q.l_eff
        model = args.against
    dev = np.abs(trace.samples - values)
    peak = float(np.max(np.abs(values)))
    if peak == 0:
        raise RingflowError("comparison curve is identically zero")
    out = {
        "command": "compare",
        "trace": str(args.trace),
        "against": model,
        "peak": peak,
        "max_deviation": float(dev.max()) / peak,
        "mean_deviation": float(dev.mean()) / peak,
        "steady_state_mismatch": bool(_steady_mismatch(trace.samples, values)),
    }
    if args.tolerance is not None:
        out["tolerance"] = args.tolerance
        out["pass"] = out["max_deviation"] <= args.tolerance
    if args.out:
        _write_json(args.out, out)
    _emit(out)
    return EXIT_OK


# -- synth ---------------------------------------------------------------------


def cmd_synth(args, parser):
    seed = args.seed if args.seed is not None else _default_seed()
    spec = mixture_dataset_spec(args.n_traces, seed=seed, dt=args.dt, duration=args.duration,
                         noise=args.noise, accumulation=not args.no_acc,
                         acc_duration=args.acc_duration)
    traces, truth = synth_dataset(spec, seed)
    files = write_dataset(traces, truth, args.out_dir)
    _emit({"command": "synth", "traces": len(traces), "files": len(files), "seed": seed})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ringflow",
        description="Closed-loop transport: analytic curves, particle simulation and fitting.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analytic", help="write free-space and wrapped-normal traces at a receiver")
    _add_channel_flags(p)
    p.add_argument("--dt", type=_time, default=1e-3, help="time step (default 1ms)")
    p.add_argument("--t-end", type=_time, required=True, help="horizon")
    p.add_argument("--normalization", choices=("none", "steady-state"), default="none")
    p.add_argument("--peaks", type=int, metavar="K", help="also write peak times for k=0..K")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--prefix", default="analytic")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("simulate", help="particle simulation; writes the bin trace at --x")
    p.add_argument("--l-eff", type=_length, required=True)
    p.add_argument("--r0", type=_length, required=True)
    p.add_argument("--d-molecular", type=_diffusion, required=True)
    p.add_argument("--v-eff", type=_velocity, required=True)
    p.add_argument("--particles", type=int, required=True)
    p.add_argument("--dt", type=_time, required=True)
    p.add_argument("--t-end", type=_time, required=True)
    p.add_argument("--realizations", type=int, default=1)
    p.add_argument("--bin-width", type=_length, help="default l_eff/100")
    p.add_argument("--sample-interval", type=_time, help="default dt")
    p.add_argument("--x", type=_length, required=True)
    p.add_argument("--normalization", choices=("none", "steady-state"), default="none")
    p.add_argument("--seed", type=int, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to a trace file; writes a JSON report")
    p.add_argument("trace")
    p.add_argument("--model", choices=("injection", "dist", "acc"), required=True)
    p.add_argument("--n", type=int, default=1, help="mixture components for --model dist")
    p.add_argument("--starts", type=int, help="random starts (default 64 for dist, 8 otherwise)")
    p.add_argument("--t-w", type=_time, help="injection duration for --model dist")
    p.add_argument("--t-0", type=_time, default=0.0, help="injection start for --model dist")
    p.add_argument("--injection-report", help="take the injection from an injection fit report")
    p.add_argument("--nest-from", action="append",
                   help="dist report whose estimate is added as a start (repeatable)")
    p.add_argument("--seed", type=int, help=f"start-generation seed (default ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int)
    p.add_argument("--timestamp", help="'now' or epoch seconds (default $SOURCE_DATE_EPOCH, else none)")
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--model-out", help="also write the fitted model trace")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="deviation of a trace from an analytic or reference curve")
    p.add_argument("trace")
    p.add_argument("--reference", help="compare against this trace file instead of a model")
    p.add_argument("--resample", action="store_true", help="interpolate the reference onto the trace grid")
    p.add_argument("--against", choices=("pwn", "pn"), default="pwn")
    p.add_argument("--window", choices=("bin", "point"), default="bin",
                   help="average the model over the observation bin when its width is known")
    p.add_argument("--bin-width", type=_length)
    p.add_argument("--l-eff", type=_length)
    p.add_argument("--v-eff", type=_velocity)
    p.add_argument("--d-eff", type=_diffusion)
    p.add_argument("--d-molecular", type=_diffusion)
    p.add_argument("--r0", type=_length)
    p.add_argument("--x", type=_length, help="default: the trace's 'x' metadata")
    p.add_argument("--tolerance", type=float, help="also report pass/fail of max deviation")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic two-component dataset with ground truth")
    p.add_argument("--n-traces", type=int, default=69)
    p.add_argument("--dt", type=_time, default=0.04)
    p.add_argument("--duration", type=_time, default=60.0)
    p.add_argument("--acc-duration", type=_time, default=600.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--no-acc", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (RingflowError, ValueError, OSError) as exc:
        print(f"ringflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
