"""Run configuration: a small INI-like text format, validation, rendering and hashing.

Grammar (one statement per line)::

    # comment                      (also allowed after a value)
    [section]                      starts a block
    key = value                    inside a block
    section.key = value            anywhere, overrides the current block

Values are scalars (``1.5``, ``32``, ``true``, ``cubic``) or comma lists
(``0.1, 0.01``).  ``auto`` is accepted where a field says so.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Any

SUBCOMMANDS = ("fixed-point", "manifold", "inertial", "converge", "appendix-demo", "check-conditions")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


# ---------------------------------------------------------------------------
# field schemas


def _spec(default, kind: str, check=None, why: str = "", **extra):
    """Dataclass field carrying its parse type and range check."""
    meta = {"kind": kind, "check": check, "why": why, **extra}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda d=default: type(d)(d), metadata=meta)
    return field(default=default, metadata=meta)


def _positive(v):
    return v > 0


MODEL_PARAMETERS: dict[str, dict[str, tuple]] = {
    # name -> {parameter: (kind, default, check, why)}
    "Saddle2": {},
    "AppendixPolar": {
        "h": ("float", 0.0, lambda v: v >= 0, "must be >= 0"),
        "prepared": ("bool", True, None, ""),
        "r_cap": ("float", 2.0, lambda v: v > 1, "must exceed 1"),
    },
    "KuramotoSivashinsky": {
        "L": ("float", 2 * math.pi * math.sqrt(2), _positive, "must be > 0"),
        "N": ("int", 32, lambda v: v >= 2, "must be >= 2"),
        "symmetry": ("choice", "odd", None, "", ("odd", "full")),
    },
    "NSETorus": {
        "nu": ("float", 0.05, _positive, "must be > 0"),
        "N": ("int", 8, lambda v: v >= 4 and v % 2 == 0, "must be an even integer >= 4"),
        "amplitude": ("float", 1.6, lambda v: v >= 0, "must be >= 0"),
        "forcing_k1": ("int", 4, None, ""),
        "forcing_k2": ("int", 0, None, ""),
        "symmetry_breaking": ("float", 0.2, lambda v: v >= 0, "must be >= 0"),
    },
}

DEFAULT_SCHEMES = {"Saddle2": "ExactDuhamel", "AppendixPolar": "RK4",
                   "KuramotoSivashinsky": "IMEXEuler", "NSETorus": "IMEXEuler"}


@dataclass
class ModelBlock:
    name: str = _spec("Saddle2", "choice", choices=tuple(MODEL_PARAMETERS))
    tau: float = _spec(math.log(2.0), "float", _positive, "must be > 0")
    scheme: str = _spec("auto", "choice", choices=("auto", "ExactDuhamel", "RK4", "IMEXEuler"))
    dt: float | None = _spec(None, "float?", _positive, "must be > 0")
    gamma: float = _spec(0.0, "float", lambda v: 0 <= v <= 1, "must lie in [0, 1]")
    parameters: dict = field(default_factory=dict)

    @property
    def resolved_scheme(self) -> str:
        return DEFAULT_SCHEMES[self.name] if self.scheme == "auto" else self.scheme


@dataclass
class SplittingBlock:
    mode: str = _spec("spectral", "choice", choices=("spectral", "index"))
    m: int | None = _spec(None, "int?", lambda v: v >= 1, "must be >= 1")
    K3: float = _spec(1.0, "float", _positive, "must be > 0")
    K4: float = _spec(1.0, "float", _positive, "must be > 0")
    beta: float = _spec(0.5, "float", lambda v: 0 <= v < 1, "must lie in [0, 1)")


@dataclass
class ManifoldBlock:
    rho: float = _spec(1.0, "float", _positive, "must be > 0")
    eps: float | None = _spec(None, "float?", _positive, "must be > 0")
    delta: float = _spec(0.5, "float", lambda v: 0 < v <= 1, "must satisfy 0 < delta <= 1")
    g: int = _spec(65, "int", lambda v: v >= 4, "must be >= 4")
    interpolation: str = _spec("cubic", "choice", choices=("multilinear", "cubic"))
    tol_c0: float = _spec(1e-10, "float", _positive, "must be > 0")
    tol_c1: float = _spec(1e-8, "float", _positive, "must be > 0")
    max_iter: int = _spec(50, "int", lambda v: v >= 1, "must be >= 1")
    newton_tol: float = _spec(1e-10, "float", _positive, "must be > 0")


@dataclass
class PerturbationBlock:
    kind: str | None = _spec(None, "choice?", choices=("ModeTruncation", "TimeDiscretization", "AnalyticE"))
    h: list = _spec([], "float list", lambda v: v > 0, "entries must be > 0")
    modes: list = _spec([], "int list", lambda v: v >= 1, "entries must be >= 1")
    dt: list = _spec([], "float list", _positive, "entries must be > 0")
    analytic_form: str = _spec("c1**2; sin(c1)", "str")


@dataclass
class ExperimentBlock:
    seed: int = _spec(0, "int", lambda v: v >= 0, "must be >= 0")
    guess: list = _spec([], "float list")
    continuation: bool = _spec(False, "bool")
    fixed_point_method: str = _spec("map", "choice", choices=("map", "generator"))
    margin: float = _spec(1e-6, "float", _positive, "must be > 0")
    cutoff_R: float | None = _spec(None, "float?", _positive, "must be > 0")
    trajectories: int = _spec(20, "int", lambda v: v >= 1, "must be >= 1")
    transient: float = _spec(200.0, "float", lambda v: v >= 0, "must be >= 0")
    initial_amplitude: float = _spec(1.0, "float", _positive, "must be > 0")
    samples: int = _spec(21, "int", lambda v: v >= 1, "must be >= 1")
    theta1: float = _spec(0.9, "float", lambda v: 0 < v < 1, "must lie in (0, 1)")
    h_values: list = _spec([0.2, 0.1, 0.05, 0.025], "float list", _positive, "entries must be > 0")
    iterations: int = _spec(120, "int", lambda v: v >= 0, "must be >= 0")
    density: int = _spec(201, "int", lambda v: v >= 2, "must be >= 2")
    R0: float = _spec(1.0, "float", _positive, "must be > 0")
    bound_box: float | None = _spec(None, "float?", _positive, "must be > 0")


@dataclass
class OutputBlock:
    directory: str | None = _spec(None, "str?")
    formats: list = _spec(["csv", "json"], "str list", lambda v: v in ("csv", "json"), "entries must be csv or json")


_BLOCKS = {
    "model": ModelBlock,
    "splitting": SplittingBlock,
    "manifold": ManifoldBlock,
    "perturbation": PerturbationBlock,
    "experiment": ExperimentBlock,
    "output": OutputBlock,
}


@dataclass
class RunConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    splitting: SplittingBlock = field(default_factory=SplittingBlock)
    manifold: ManifoldBlock = field(default_factory=ManifoldBlock)
    perturbation: PerturbationBlock = field(default_factory=PerturbationBlock)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self)

    @property
    def eps(self) -> float:
        m = self.manifold
        return m.eps if m.eps is not None else 2.0 * m.rho * m.delta


# ---------------------------------------------------------------------------
# parsing

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _scalar(kind: str, text: str, choices=None):
    base = kind.rstrip("?")
    if kind.endswith("?") and text.lower() in ("auto", "none", ""):
        return None
    if base == "float":
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("not finite")
        return v
    if base == "int":
        if not re.fullmatch(r"[+-]?\d+", text):
            raise ValueError("not an integer")
        return int(text)
    if base == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError("not a boolean")
    if base == "choice":
        if text not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}")
        return text
    return text


def _convert(kind: str, text: str, choices=None):
    if kind.endswith(" list"):
        item = kind[: -len(" list")]
        return [] if text == "" else [_scalar(item, t.strip()) for t in text.split(",")]
    return _scalar(kind, text, choices)


def _checked(value, meta, line, key):
    check = meta.get("check")
    if check is None or value is None:
        return value
    items = value if isinstance(value, list) else [value]
    for v in items:
        if not check(v):
            raise ConfigError(f"out of range ({meta.get('why') or 'invalid'}): {v!r}", line, key)
    return value


def _strip_comment(raw: str) -> str:
    # '#' starts a comment unless it sits inside a quoted analytic form
    out, quoted = [], False
    for ch in raw:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).strip()


def parse_config(text: str, base_dir: str | None = None) -> RunConfig:
    """Parse and validate; every missing field takes its documented default."""
    entries: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        head = re.fullmatch(r"\[\s*([A-Za-z_][\w.]*)\s*\]", line)
        if head:
            section = head.group(1)
            if section not in _BLOCKS and section != "parameters":
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] == '"':
            value = value[1:-1]
        if "." in key:
            sec, name = key.split(".", 1)
            if sec == "model" and name.startswith("parameters."):
                sec, name = "parameters", name[len("parameters."):]
        elif section is None:
            raise ConfigError("key outside any section", lineno, key)
        else:
            sec, name = section, key
        if sec not in _BLOCKS and sec != "parameters":
            raise ConfigError(f"unknown section '{sec}'", lineno, key)
        if (sec, name) in entries:
            first = entries[(sec, name)][1]
            raise ConfigError(f"duplicate key (first set on line {first}, again on line {lineno})", lineno,
                              f"{sec}.{name}")
        entries[(sec, name)] = (value, lineno)

    cfg = RunConfig()
    for sec, cls in _BLOCKS.items():
        block = getattr(cfg, sec)
        known = {f.name: f for f in fields(cls) if f.metadata}
        for (s, name), (value, lineno) in entries.items():
            if s != sec:
                continue
            if name not in known:
                raise ConfigError("unknown key", lineno, f"{sec}.{name}")
            meta = known[name].metadata
            try:
                parsed = _convert(meta["kind"], value, meta.get("choices"))
            except ValueError as exc:
                raise ConfigError(f"type mismatch, expected {meta['kind']} ({exc})", lineno, f"{sec}.{name}") from None
            setattr(block, name, _checked(parsed, meta, lineno, f"{sec}.{name}"))

    schema = MODEL_PARAMETERS[cfg.model.name]
    params = {}
    for pname, spec in schema.items():
        params[pname] = spec[1]
    for (s, name), (value, lineno) in entries.items():
        if s != "parameters":
            continue
        if name not in schema:
            raise ConfigError(f"unknown parameter for {cfg.model.name}", lineno, f"parameters.{name}")
        kind, _, check, why, *rest = schema[name]
        try:
            parsed = _scalar(kind, value, rest[0] if rest else None)
        except ValueError as exc:
            raise ConfigError(f"type mismatch, expected {kind} ({exc})", lineno, f"parameters.{name}") from None
        if check is not None and not check(parsed):
            raise ConfigError(f"out of range ({why}): {parsed!r}", lineno, f"parameters.{name}")
        params[name] = parsed
    cfg.model.parameters = params
    _cross_checks(cfg, entries, base_dir)
    return cfg


def _line_of(entries, sec, name):
    return entries.get((sec, name), (None, None))[1]


def _cross_checks(cfg: RunConfig, entries, base_dir):
    mb = cfg.model
    scheme = mb.resolved_scheme
    if scheme == "ExactDuhamel" and mb.name != "Saddle2":
        raise ConfigError("ExactDuhamel is only available for Saddle2", _line_of(entries, "model", "scheme"),
                          "model.scheme")
    if scheme != "ExactDuhamel" and mb.dt is None:
        mb.dt = mb.tau / 64
    if mb.dt is not None and mb.dt > mb.tau:
        raise ConfigError("dt must not exceed tau", _line_of(entries, "model", "dt"), "model.dt")
    pb = cfg.perturbation
    # ModeTruncation may omit h: it is then derived from the resolution
    count = len(pb.h) if pb.h else len(pb.modes)
    if pb.modes and len(pb.modes) != count:
        raise ConfigError("modes must list one entry per h", _line_of(entries, "perturbation", "modes"),
                          "perturbation.modes")
    if pb.dt and len(pb.dt) != count:
        raise ConfigError("dt must list one entry per h", _line_of(entries, "perturbation", "dt"), "perturbation.dt")
    if pb.kind in ("AnalyticE", "TimeDiscretization") and not pb.h:
        raise ConfigError(f"{pb.kind} needs an h list", _line_of(entries, "perturbation", "kind"), "perturbation.h")
    if pb.kind == "ModeTruncation" and not pb.modes:
        raise ConfigError("ModeTruncation needs a modes list", _line_of(entries, "perturbation", "kind"),
                          "perturbation.modes")
    if pb.kind == "TimeDiscretization" and not pb.dt:
        pb.dt = list(pb.h)
    hs = pb.h
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ConfigError("h values must be strictly decreasing", _line_of(entries, "perturbation", "h"),
                          "perturbation.h")
    hv = cfg.experiment.h_values
    if any(b >= a for a, b in zip(hv, hv[1:])):
        raise ConfigError("h_values must be strictly decreasing", _line_of(entries, "experiment", "h_values"),
                          "experiment.h_values")
    if cfg.output.directory is not None:
        d = cfg.output.directory
        if base_dir is not None and not os.path.isabs(d):
            d = os.path.join(base_dir, d)
            cfg.output.directory = d
        parent = os.path.dirname(os.path.abspath(d))
        if not os.path.isdir(parent):
            raise ConfigError(f"parent directory {parent} does not exist", _line_of(entries, "output", "directory"),
                              "output.directory")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not UTF-8: {exc}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# rendering and hashing


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, str) and "#" in v:
        return f'"{v}"'
    return str(v)


def render(cfg: RunConfig) -> str:
    """Text that parses back to an equal config (every field written out)."""
    lines = []
    for sec in _BLOCKS:
        block = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in fields(block):
            if f.metadata:
                lines.append(f"{f.name} = {_fmt(getattr(block, f.name))}")
        lines.append("")
    lines.append("[parameters]")
    for k, v in cfg.model.parameters.items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _canonical(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float):
        return repr(obj)  # exact and platform independent
    return obj


def config_hash(cfg: RunConfig) -> str:
    """sha256 of canonical JSON (sorted keys), so key order in the file does not matter."""
    d = _canonical(cfg.to_dict())
    d["output"].pop("directory", None)  # where results go does not change what they are
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
