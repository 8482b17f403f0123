"""Trace files, fit reports and synthetic datasets.

Trace file format (version ``v1``)
----------------------------------
UTF-8 text. A header block of ``# key=value`` lines comes first, then a
column line ``index,value`` and one ``i,sample`` row per sample::

    # version=v1
    # dt=0.04
    # t0=0.0
    # kind=dist
    # egg=7
    # roi=2
    index,value
    0,0.0
    1,0.0013071895424836603

``version`` and ``dt`` are required; ``t0`` defaults to 0 and ``kind`` to
``raw``. All quantities are SI (``dt``, ``t0`` and ``injection_duration`` in
seconds, ``d_inj`` in metres). Known keys are written in the order
``version, dt, t0, kind, egg, roi, ded, d_inj, injection_duration``, any
other key follows in sorted order and is preserved verbatim. Floats use the
shortest round-trip decimal form, so reading and rewriting a canonical
file reproduces it byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .analytic import ChannelParams
from .errors import ConfigError, DomainError, RingflowError, TraceParseError
from .fitting import dist_model_values, rmse
from .signal import (
    AccumulationParams,
    DEFAULT_TAIL_FRACTION,
    InjectionParams,
    IntensityTrace,
    MixtureParams,
    TRACE_KINDS,
    injection_profile,
    model_acc,
)

__all__ = [
    "FORMAT_VERSION",
    "format_trace",
    "parse_trace",
    "read_trace",
    "write_trace",
    "FitReport",
    "report_from_fit",
    "report_params",
    "report_model",
    "read_report",
    "write_report",
    "validate_report",
    "report_timestamp",
    "SynthTrace",
    "SynthSpec",
    "synth_dataset",
    "write_dataset",
    "mixture_dataset_spec",
]

FORMAT_VERSION = "v1"
_ORDERED_KEYS = ("egg", "roi", "ded", "d_inj", "injection_duration")
_RESERVED = ("version", "dt", "t0", "kind")
_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
_COLUMNS = "index,value"


# -- trace files -----------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def _meta_value(key, value):
    if isinstance(value, (float, np.floating)):
        text = _fmt(value)
    else:
        text = str(value)
    if "\n" in text or "\r" in text or text != text.strip():
        raise DomainError(f"metadata value for {key!r} has line breaks or surrounding blanks")
    return text


def format_trace(trace):
    """Canonical text of a trace file."""
    if not isinstance(trace, IntensityTrace):
        raise DomainError("expected an IntensityTrace")
    if not np.all(np.isfinite(trace.samples)):
        raise DomainError("trace contains NaN or infinite samples")
    lines = [
        f"# version={FORMAT_VERSION}",
        f"# dt={_fmt(trace.dt)}",
        f"# t0={_fmt(trace.t0)}",
        f"# kind={trace.kind}",
    ]
    meta = dict(trace.metadata)
    for key in meta:
        if key in _RESERVED:
            raise DomainError(f"metadata key {key!r} is reserved")
        if not _KEY_RE.match(str(key)):
            raise DomainError(f"invalid metadata key {key!r}")
    keys = [k for k in _ORDERED_KEYS if k in meta]
    keys += sorted(k for k in meta if k not in _ORDERED_KEYS)
    lines += [f"# {k}={_meta_value(k, meta[k])}" for k in keys]
    lines.append(_COLUMNS)
    lines += [f"{i},{_fmt(v)}" for i, v in enumerate(trace.samples)]
    return "\n".join(lines) + "\n"


def _parse_float(text, what, line):
    try:
        value = float(text)
    except ValueError:
        raise TraceParseError(f"{what} is not a number: {text!r}", line) from None
    return value


def parse_trace(text, source="<string>"):
    """Parse trace-file text; errors carry the 1-based line number."""
    header = {}
    samples = []
    in_body = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if not in_body:
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" not in body:
                    raise TraceParseError(f"header line is not key=value: {raw!r}", lineno)
                key, value = body.split("=", 1)
                key = key.strip()
                if not _KEY_RE.match(key):
                    raise TraceParseError(f"invalid header key {key!r}", lineno)
                if key in header:
                    raise TraceParseError(f"duplicate header key {key!r}", lineno)
                header[key] = (value.strip(), lineno)
                continue
            if line.replace(" ", "") != _COLUMNS:
                raise TraceParseError(f"expected column line {_COLUMNS!r}, got {raw!r}", lineno)
            in_body = True
            continue
        if line.startswith("#"):
            raise TraceParseError("header line after the body started", lineno)
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceParseError(f"expected 'index,value', got {raw!r}", lineno)
        try:
            index = int(parts[0])
        except ValueError:
            raise TraceParseError(f"sample index is not an integer: {parts[0]!r}", lineno) from None
        if index != len(samples):
            raise TraceParseError(f"sample index {index} out of sequence, expected {len(samples)}", lineno)
        value = _parse_float(parts[1], "sample", lineno)
        if not math.isfinite(value):
            raise TraceParseError(f"non-finite sample {parts[1]!r}", lineno)
        samples.append(value)

    if "version" not in header:
        raise TraceParseError(f"{source}: missing required header field 'version'")
    version, vline = header.pop("version")
    if version != FORMAT_VERSION:
        raise TraceParseError(f"unsupported format version {version!r}", vline)
    if "dt" not in header:
        raise TraceParseError(f"{source}: missing required header field 'dt'")
    dt_text, dt_line = header.pop("dt")
    dt = _parse_float(dt_text, "dt", dt_line)
    if not (math.isfinite(dt) and dt > 0):
        raise DomainError(f"{source}: dt must be positive, got {dt_text}")
    t0 = 0.0
    if "t0" in header:
        t0_text, t0_line = header.pop("t0")
        t0 = _parse_float(t0_text, "t0", t0_line)
        if not math.isfinite(t0):
            raise TraceParseError(f"t0 must be finite, got {t0_text!r}", t0_line)
    kind = "raw"
    if "kind" in header:
        kind, kline = header.pop("kind")
        if kind not in TRACE_KINDS:
            raise TraceParseError(f"kind must be one of {TRACE_KINDS}, got {kind!r}", kline)
    if not in_body:
        raise TraceParseError(f"{source}: no '{_COLUMNS}' line; the trace has no body")
    if len(samples) < 2:
        raise DomainError(f"{source}: a trace needs at least 2 samples, found {len(samples)}")
    metadata = {k: v for k, (v, _) in header.items()}
    return IntensityTrace(dt=dt, samples=np.array(samples), kind=kind, t0=t0, metadata=metadata)


def read_trace(path):
    """Read a ``v1`` trace file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RingflowError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return parse_trace(text, source=str(path))
    except TraceParseError as exc:
        err = TraceParseError(f"{path}: {exc}")
        err.line = exc.line
        raise err from None


def _atomic_write(path, text):
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    except OSError as exc:
        raise RingflowError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise RingflowError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_trace(trace, path):
    """Write ``trace`` in canonical ``v1`` form.

    The text is fully validated before the file is touched; the file is
    replaced atomically.
    """
    _atomic_write(path, format_trace(trace))


# -- fit reports -------------------------------------------------------------


def report_timestamp(value=None):
    """ISO-8601 UTC timestamp for reports.

    ``value`` may be ``"now"``, an integer epoch or ``None``. With ``None``
    the ``SOURCE_DATE_EPOCH`` environment variable is used if set, otherwise
    no timestamp is recorded, which keeps reports byte-reproducible.
    """
    if value is None:
        value = os.environ.get("SOURCE_DATE_EPOCH")
        if value is None:
            return None
    if value == "now":
        moment = datetime.now(timezone.utc)
    else:
        try:
            moment = datetime.fromtimestamp(int(value), timezone.utc)
        except (TypeError, ValueError, OverflowError):
            raise ConfigError(f"bad timestamp {value!r}") from None
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class FitReport:
    """Serializable summary of one fit.

    ``params`` holds plain SI numbers; ``injection`` and ``tail_fraction``
    are only meaningful for ``dist-n`` reports and are needed to rebuild the
    fitted model.
    """

    trace: str
    kind: str
    params: dict
    rmse: float
    objective: float
    seed: int
    n_starts: int
    converged: bool
    at_bound: bool = False
    warnings: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    injection: dict | None = None
    tail_fraction: float = DEFAULT_TAIL_FRACTION
    timestamp: str | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        names = set(cls.__dataclass_fields__)
        unknown = set(data) - names
        if unknown:
            raise TraceParseError(f"unknown report fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise TraceParseError(f"incomplete report: {exc}") from None


def _params_dict(kind, p):
    if kind == "injection":
        return {"t_w": p.t_w, "t_0": p.t_0}
    if kind == "acc":
        return {"a": p.a, "b": p.b}
    if kind.startswith("dist-"):
        return {
            "components": [
                {"weight": a, "d_eff": q.d_eff, "v_eff": q.v_eff, "l_eff": q.l_eff, "d_rx": q.d_rx}
                for a, q in p.components
            ]
        }
    raise DomainError(f"unknown fit kind {kind!r}")


def report_from_fit(result, trace_ref, space=None, injection=None,
                    tail_fraction=DEFAULT_TAIL_FRACTION, timestamp=None):
    """Build a :class:`FitReport` from a fit result."""
    if result.kind.startswith("dist-") and injection is None:
        raise DomainError("distribution reports need the injection parameters")
    return FitReport(
        trace=str(trace_ref),
        kind=result.kind,
        params=_params_dict(result.kind, result.params),
        rmse=result.rmse,
        objective=result.objective,
        seed=result.seed,
        n_starts=result.n_starts,
        converged=result.converged,
        at_bound=result.at_bound,
        warnings=list(result.warnings),
        bounds={k: list(v) for k, v in space.bounds.items()} if space is not None else {},
        injection=_params_dict("injection", injection) if injection is not None else None,
        tail_fraction=tail_fraction,
        timestamp=timestamp,
    )


def report_params(report):
    """Parameter object encoded in a report."""
    p = report.params
    if report.kind == "injection":
        return InjectionParams(p["t_w"], p["t_0"])
    if report.kind == "acc":
        return AccumulationParams(p["a"], p["b"])
    if report.kind.startswith("dist-"):
        comps = tuple(
            (c["weight"], ChannelParams(c["d_eff"], c["v_eff"], c["l_eff"], c["d_rx"]))
            for c in p["components"]
        )
        return MixtureParams(comps)
    raise DomainError(f"unknown fit kind {report.kind!r}")


def report_model(report, trace):
    """Model samples of ``report`` on the grid of ``trace``."""
    p = report_params(report)
    n = len(trace)
    if report.kind == "injection":
        return injection_profile(p, trace.dt * np.arange(n))
    if report.kind == "acc":
        return model_acc(p, trace.dt, n).samples
    inj = InjectionParams(**report.injection)
    return dist_model_values(p, inj, trace.dt, n, report.tail_fraction)


def _check_bounds(report):
    lo_hi = report.bounds
    if not lo_hi:
        return []
    bad = []
    if report.kind.startswith("dist-"):
        items = []
        for c in report.params["components"]:
            items += [(k, c[k]) for k in ("d_eff", "v_eff", "l_eff", "d_rx")]
    else:
        items = list(report.params.items())
    for name, value in items:
        if name in lo_hi:
            lo, hi = lo_hi[name]
            if not lo <= value <= hi:
                bad.append(f"{name}={value!r} outside [{lo}, {hi}]")
    return bad


def validate_report(report, trace):
    """Recompute the RMSE of ``report`` against ``trace``.

    Returns the absolute discrepancy from the stored value. Raises
    :class:`DomainError` if the stored RMSE is negative or a parameter lies
    outside the recorded bounds.
    """
    if not report.rmse >= 0:
        raise DomainError(f"report rmse is negative: {report.rmse}")
    bad = _check_bounds(report)
    if bad:
        raise DomainError("parameters outside bounds: " + "; ".join(bad))
    return abs(rmse(trace.samples, report_model(report, trace)) - report.rmse)


def write_report(report, path):
    _atomic_write(path, report.to_json())


def read_report(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RingflowError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return FitReport.from_json(text)
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"{path}: {exc.msg}", exc.lineno) from None


# -- synthetic datasets ------------------------------------------------------


@dataclass(frozen=True)
class SynthTrace:
    """Ground truth of one synthetic measurement.

    The distribution phase has ``n_dist`` samples of the normalized mixture
    model; if ``accumulation`` is given, an accumulation phase of ``n_acc``
    samples follows. ``noise`` is the standard deviation of additive
    Gaussian noise in units of the steady-state level.
    """

    name: str
    mixture: MixtureParams
    injection: InjectionParams
    dt: float
    n_dist: int
    noise: float = 0.0
    accumulation: AccumulationParams | None = None
    n_acc: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not _KEY_RE.match(self.name) or "/" in self.name:
            raise ConfigError(f"trace name {self.name!r} is not a valid file stem")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_dist < 2:
            raise ConfigError("n_dist must be at least 2")
        if not (math.isfinite(self.noise) and self.noise >= 0):
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.accumulation is not None and self.n_acc < 2:
            raise ConfigError("an accumulation phase needs n_acc >= 2")


@dataclass(frozen=True)
class SynthSpec:
    traces: tuple

    def __post_init__(self):
        traces = tuple(self.traces)
        if not traces:
            raise ConfigError("a dataset spec needs at least one trace")
        names = [t.name for t in traces]
        if len(set(names)) != len(names):
            raise ConfigError("trace names must be unique")
        object.__setattr__(self, "traces", traces)


def _truth(item, seed, index):
    out = {
        "name": item.name,
        "seed": seed,
        "index": index,
        "noise": item.noise,
        "dt": item.dt,
        "n_dist": item.n_dist,
        "mixture": _params_dict(f"dist-{item.mixture.n}", item.mixture),
        "injection": _params_dict("injection", item.injection),
    }
    if item.accumulation is not None:
        out["accumulation"] = _params_dict("acc", item.accumulation)
        out["n_acc"] = item.n_acc
    return out


def synth_dataset(spec, seed):
    """Generate noisy traces from ground-truth parameters.

    Trace ``i`` draws its noise from a generator keyed by ``(seed, i)``.

    Returns
    -------
    traces : dict
        ``name -> {"dist": IntensityTrace, "acc": IntensityTrace}`` (the
        ``acc`` entry only when an accumulation phase is specified).
    truth : dict
        Sidecar content: ground truth per trace name.
    """
    if not isinstance(spec, SynthSpec):
        raise ConfigError("expected a SynthSpec")
    seed = int(seed)
    traces = {}
    truth = {}
    for i, item in enumerate(spec.traces):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        clean = dist_model_values(item.mixture, item.injection, item.dt, item.n_dist)
        if not np.any(clean):
            raise ConfigError(f"{item.name}: the model signal never reaches steady state")
        dist = clean + item.noise * rng.standard_normal(clean.size) if item.noise else clean
        meta = {k: _meta_value(k, v) for k, v in item.metadata.items()}
        meta["synthetic"] = item.name
        entry = {"dist": IntensityTrace(dt=item.dt, samples=dist, kind="dist", metadata=meta)}
        if item.accumulation is not None:
            acc_clean = model_acc(item.accumulation, item.dt, item.n_acc).samples
            acc = acc_clean + item.noise * rng.standard_normal(acc_clean.size) if item.noise else acc_clean
            entry["acc"] = IntensityTrace(
                dt=item.dt, samples=acc, kind="acc", t0=item.n_dist * item.dt, metadata=meta
            )
        traces[item.name] = entry
        truth[item.name] = _truth(item, seed, i)
    return traces, truth


def write_dataset(traces, truth, directory):
    """Write ``<name>.<kind>.csv`` files plus ``truth.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(traces):
        for kind in sorted(traces[name]):
            path = directory / f"{name}.{kind}.csv"
            write_trace(traces[name][kind], path)
            written.append(path)
    sidecar = directory / "truth.json"
    _atomic_write(sidecar, json.dumps(truth, sort_keys=True, indent=2, allow_nan=False) + "\n")
    written.append(sidecar)
    return written


# per-component means (D_eff m^2/s, v_eff m/s, L_eff m, d_rx m) of the
# reference well-fitting two-component estimates
_MEANS_2 = (
    (5.7e-6, 3.0e-3, 4.0e-2, 2.2e-2),
    (4.8e-6, 1.6e-3, 3.5e-2, 1.4e-2),
)


def mixture_dataset_spec(n_traces=69, seed=0, dt=0.04, duration=60.0, noise=0.01,
                         n_eggs=25, spread=0.2, accumulation=True, acc_duration=600.0):
    """Two-component dataset spec mimicking a 69-measurement study.

    Every trace is a two-component mixture whose parameters are log-normal
    perturbations (relative spread ``spread``) of the reference component
    means; the leading weight is uniform on [0.55, 0.9]. Traces are spread
    over ``n_eggs`` eggs with a development day between 9 and 15.
    """
    if n_traces < 1 or n_eggs < 1:
        raise ConfigError("n_traces and n_eggs must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2**31,)))
    ded = {e: int(rng.integers(9, 16)) for e in range(1, n_eggs + 1)}
    roi_count = {}
    items = []
    n_dist = int(round(duration / dt)) + 1
    n_acc = int(round(acc_duration / dt)) if accumulation else 0
    for i in range(n_traces):
        comps = []
        w1 = rng.uniform(0.55, 0.9)
        for mean, w in zip(_MEANS_2, (w1, 1.0 - w1)):
            d_eff, v_eff, l_eff, d_rx = (m * math.exp(spread * rng.standard_normal()) for m in mean)
            d_rx = min(d_rx, 0.95 * l_eff)
            comps.append((w, ChannelParams(d_eff, v_eff, l_eff, d_rx)))
        inj = InjectionParams(t_w=rng.uniform(2.0, 5.0), t_0=rng.uniform(0.5, 2.0))
        acc = None
        if accumulation:
            acc = AccumulationParams(a=rng.uniform(0.2, 0.8), b=math.exp(rng.uniform(math.log(1e-3), math.log(1e-2))))
        egg = 1 + i % n_eggs
        roi_count[egg] = roi_count.get(egg, 0) + 1
        items.append(SynthTrace(
            name=f"egg{egg:02d}_roi{roi_count[egg]}",
            mixture=MixtureParams(tuple(comps)),
            injection=inj,
            dt=dt,
            n_dist=n_dist,
            noise=noise,
            accumulation=acc,
            n_acc=n_acc,
            metadata={
                "egg": egg,
                "roi": roi_count[egg],
                "ded": ded[egg],
                "d_inj": float(rng.uniform(5e-3, 3e-2)),
                "injection_duration": inj.t_w,
            },
        ))
    return SynthSpec(tuple(items))
