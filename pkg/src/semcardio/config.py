"""Run configuration: a flat dataclass serialized as a sectioned ``key = value`` file.

Example::

    [mesh]
    extent = 20.0 7.0 3.0
    cells = 40 16 8

    [discretization]
    p = 2
    flavor = LGL

Every key has a documented default, unknown sections or keys are errors,
and :func:`dump_config` followed by :func:`parse_config` reproduces the
same :class:`RunConfig`.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, fields

from .basis import FLAVORS
from .ionic import MODELS, SurrogateParams
from .mesh import SLAB_EXTENT
from .stepper import MODES, PRECONDITIONERS, STIMULUS_AMPLITUDE, STIMULUS_DURATION, STIMULUS_EDGE

THREADS_ENV = "SOLVER_THREADS"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``section.key``."""


def default_threads() -> int:
    """``SOLVER_THREADS`` if set, else the CPUs available to this process."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


_SP = SurrogateParams()


@dataclass
class RunConfig:
    """All settings of one slab simulation.

    Defaults reproduce the slab benchmark: Table 1 conductivities along the
    long axis, a 1.5 mm corner stimulus of 3 ms, ``dt = 0.1 ms``, BDF2,
    ``p = 2`` SEM-NI, matrix-free operator with GMG-preconditioned CG.
    ``threads = 0`` means "use :func:`default_threads`".
    """

    # [mesh]
    extent: tuple = SLAB_EXTENT
    cells: tuple = (40, 16, 8)
    # [discretization]
    p: int = 2
    flavor: str = "LGL"
    # [time]
    dt: float = 0.1
    t_final: float = 100.0
    scheme: str = "BDF2"
    # [solver]
    solver: str = "mf"
    precond: str = "gmg"
    tol_abs: float = 1e-15
    tol_rel: float = 1e-7
    max_iter: int = 500
    batch_width: int = 512
    threads: int = 0
    max_coarse_dofs: int = 4000
    coarse_preconditioner: str = "jacobi"
    # [ionic]
    model: str = "surrogate"
    k: float = _SP.k
    a: float = _SP.a
    eps0: float = _SP.eps0
    mu1: float = _SP.mu1
    mu2: float = _SP.mu2
    # [stimulus]
    amplitude: float = STIMULUS_AMPLITUDE
    duration: float = STIMULUS_DURATION
    lower: tuple = (0.0, 0.0, 0.0)
    upper: tuple = (STIMULUS_EDGE,) * 3
    # [output]
    probe: str = "auto"
    snapshot_stride: int = 0
    activation_threshold: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key, msg):
            raise ConfigError(f"{SECTION_OF[key]}.{key}: {msg}")

        if len(self.extent) != 3 or any(e <= 0 for e in self.extent):
            bad("extent", "expected three positive lengths")
        if len(self.cells) != 3 or any(int(c) < 1 for c in self.cells):
            bad("cells", "expected three positive cell counts")
        if not 1 <= self.p <= 8:
            bad("p", "polynomial degree must be in 1..8")
        if self.flavor.upper() not in FLAVORS:
            bad("flavor", f"expected one of {FLAVORS}")
        if not self.dt > 0:
            bad("dt", "must be positive")
        if self.t_final < 0:
            bad("t_final", "must be non-negative")
        if self.scheme.upper() not in ("BDF1", "BDF2", "BDF3"):
            bad("scheme", "expected BDF1, BDF2 or BDF3")
        if self.solver not in MODES:
            bad("solver", f"expected one of {MODES}")
        if self.precond not in PRECONDITIONERS:
            bad("precond", f"expected one of {PRECONDITIONERS}")
        if self.solver == "mb" and self.precond == "gmg":
            bad("precond", "gmg is matrix-free only; use jacobi or none with solver = mb")
        if self.coarse_preconditioner not in ("none", "jacobi"):
            bad("coarse_preconditioner", "expected none or jacobi")
        if self.threads < 0:
            bad("threads", "must be >= 0")
        if self.batch_width < 1:
            bad("batch_width", "must be >= 1")
        if self.model not in MODELS:
            bad("model", f"expected one of {tuple(MODELS)}")
        try:
            self.surrogate_params().validate()
        except ValueError as exc:
            bad("k", str(exc))
        if len(self.lower) != 3 or len(self.upper) != 3:
            bad("lower", "stimulus box corners need three coordinates")
        if self.probe != "auto":
            try:
                pt = tuple(float(x) for x in self.probe.split())
            except ValueError:
                bad("probe", "expected 'auto' or three coordinates")
            if len(pt) != 3:
                bad("probe", "expected 'auto' or three coordinates")
        if self.activation_threshold != "none":
            try:
                float(self.activation_threshold)
            except ValueError:
                bad("activation_threshold", "expected 'none' or a number")

    def surrogate_params(self) -> SurrogateParams:
        return SurrogateParams(self.k, self.a, self.eps0, self.mu1, self.mu2)

    @property
    def resolved_threads(self) -> int:
        return self.threads if self.threads > 0 else default_threads()

    @property
    def probe_point(self):
        return None if self.probe == "auto" else tuple(float(x) for x in self.probe.split())

    @property
    def threshold(self):
        return None if self.activation_threshold == "none" else float(self.activation_threshold)

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        for key in changes:
            if key not in d:
                raise ConfigError(f"unknown key {key!r}")
        d.update(changes)
        return RunConfig(**d)


SECTIONS = {
    "mesh": ("extent", "cells"),
    "discretization": ("p", "flavor"),
    "time": ("dt", "t_final", "scheme"),
    "solver": ("solver", "precond", "tol_abs", "tol_rel", "max_iter", "batch_width", "threads",
               "max_coarse_dofs", "coarse_preconditioner"),
    "ionic": ("model", "k", "a", "eps0", "mu1", "mu2"),
    "stimulus": ("amplitude", "duration", "lower", "upper"),
    "output": ("probe", "snapshot_stride", "activation_threshold"),
}
SECTION_OF = {k: s for s, keys in SECTIONS.items() for k in keys}
_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_INT_TUPLES = {"cells"}


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind is tuple:
            parts = text.replace(",", " ").split()
            return tuple(int(x) for x in parts) if key in _INT_TUPLES else tuple(float(x) for x in parts)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{SECTION_OF[key]}.{key}: cannot parse {text!r} as {kind.__name__}") from None


def _new_parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    return cp


def config_from_parser(cp: configparser.ConfigParser, base: RunConfig | None = None) -> RunConfig:
    values = asdict(base) if base is not None else {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {tuple(SECTIONS)}")
        for key, text in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            values[key] = _parse_value(key, text)
    return RunConfig(**values)


def parse_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a file path (or text) plus overrides.

    ``source`` is a path, a string starting with ``[`` (inline text) or
    ``None`` for defaults.  ``overrides`` maps key names to parsed values
    (e.g. from command-line flags); ``None`` values are ignored.
    """
    cp = _new_parser()
    if source is not None:
        text = str(source)
        if text.lstrip().startswith("["):
            cp.read_string(text)
        else:
            if not os.path.exists(text):
                raise ConfigError(f"config file {text!r} does not exist")
            with open(text) as fh:
                try:
                    cp.read_file(fh)
                except configparser.Error as exc:
                    raise ConfigError(f"{text}: {exc}") from None
    cfg = config_from_parser(cp)
    if overrides:
        cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize every key, in section order."""
    d = asdict(cfg)
    out = io.StringIO()
    for section, keys in SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format(d[key])}\n")
        out.write("\n")
    return out.getvalue()


# -- sweep plans ----------------------------------------------------------

_PLAN_KEYS = {"p": int, "cells": tuple, "flavor": str, "solver": str, "precond": str, "dt": float,
              "t_final": float, "scheme": str, "threads": int}


def parse_plan(source):
    """Parse a sweep plan file into a :class:`~semcardio.bench.SweepPlan`.

    ``[plan]`` holds shared settings (``output_dir``, ``repetitions`` and
    defaults for any run key); each ``[run.NAME]`` section is one run; an
    optional ``[reference]`` section defines the self-convergence reference.
    """
    from .bench import SlabRun, SweepPlan

    cp = _new_parser()
    text = str(source)
    if text.lstrip().startswith("["):
        cp.read_string(text)
    else:
        if not os.path.exists(text):
            raise ConfigError(f"plan file {text!r} does not exist")
        cp.read(text)
    def run_keys(section, items, base):
        out = dict(base)
        for key, val in items:
            if key not in _PLAN_KEYS:
                raise ConfigError(f"unknown key {section}.{key}")
            kind = _PLAN_KEYS[key]
            try:
                out[key] = (tuple(int(x) for x in val.replace(",", " ").split()) if kind is tuple else kind(val))
            except ValueError:
                raise ConfigError(f"{section}.{key}: cannot parse {val!r}") from None
        return out

    def make_run(label, kw):
        kw = dict(kw)
        if "solver" in kw:
            kw["solver_mode"] = kw.pop("solver")
        if "precond" in kw:
            kw["preconditioner"] = kw.pop("precond")
        return SlabRun(label=label, **kw)

    shared, output_dir, reps = {}, None, 1
    if cp.has_section("plan"):
        items = dict(cp.items("plan"))
        output_dir = items.pop("output_dir", None)
        try:
            reps = int(items.pop("repetitions", 1))
        except ValueError:
            raise ConfigError("plan.repetitions must be an integer") from None
        shared = run_keys("plan", items.items(), {})
    runs, reference = [], None
    for section in cp.sections():
        if section == "plan":
            continue
        if section == "reference":
            reference = make_run("reference", run_keys(section, cp.items(section), shared))
        elif section.startswith("run."):
            runs.append(make_run(section[4:], run_keys(section, cp.items(section), shared)))
        else:
            raise ConfigError(f"unknown section [{section}] in plan")
    if not runs:
        raise ConfigError("plan defines no [run.NAME] sections")
    return SweepPlan(runs, output_dir=output_dir, repetitions=reps, reference=reference)
