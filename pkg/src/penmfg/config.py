"""Run configuration: a flat sectioned key-value format and its builders.

The format is deliberately small: `[section]` headers, `key = value` lines,
`#` comments, UTF-8.  Values are scalars, space-separated float lists, or
';'-separated rows of floats (polytope matrices).  Sections:

    [run]          command, seed, output directory
    [domain]       kind plus the kind's geometry parameters
    [model]        preset plus the preset's coefficients
    [sim]          particle-system discretization (SimConfig fields)
    [dp]           best-response grid resolution and optional bounds
    [fixed_point]  outer-loop damping, iteration cap, tolerances
    [sweep]        penalty levels / switching periods for the study commands

`parse_config` validates everything it can see: unknown sections or keys,
type mismatches, and range violations all fail with the offending line
number, and the domain / model / sim configs are actually constructed so
their own guards (e.g. the explicit-scheme penalty*dt stability limit) fire
at parse time.  Defaults that were applied are recorded on the returned
config so run logs can echo them.

`serialize` writes the canonical form; parse(serialize(cfg)) == cfg, and the
manifest hash is the digest of that canonical text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import domain as dom_mod
from .dp import DPGrid
from .equilibrium import FixedPointConfig
from .errors import ConfigError, PenmfgError
from .measures import format_float
from .model import ModelSpec, make_preset, preset_names
from .simulate import SimConfig

COMMANDS = ("simulate", "cost", "dp", "equilibrium", "sweep-n", "chatter",
            "diagnose")

DOMAIN_KINDS = {
    "box": ("lower", "upper"),
    "ball": ("center", "radius"),
    "half_space": ("normal", "offset"),
    "polytope": ("normals", "offsets"),
}

# value kinds: "int", "float", "str", "floats" (space-separated),
# "ints", "rows" (';'-separated float rows)
_SCHEMA = {
    "run": {"command": ("str", "simulate"), "seed": ("int", 0),
            "out": ("str", "out")},
    "sim": {"n_particles": ("int", None), "dt": ("float", None),
            "scheme": ("str", "penalized_splitting"),
            "penalty": ("int", None), "interaction": ("str", "self")},
    "dp": {"hx": ("float", None), "lower": ("floats", None),
           "upper": ("floats", None)},
    "fixed_point": {"damping": ("float", 0.5), "max_iters": ("int", 30),
                    "tol": ("float", 5e-2), "tol_exploit": ("float", 5e-2)},
    "sweep": {"n_list": ("ints", (8, 32, 128)),
              "deltas": ("floats", (0.2, 0.1, 0.05)),
              "n0": ("float", 8.0), "epsilon": ("float", 0.1)},
}
_SECTIONS = ("run", "domain", "model", "sim", "dp", "fixed_point", "sweep")


@dataclass(eq=True)
class RunConfig:
    """Validated run description; dict fields hold normalized scalar values."""

    command: str = "simulate"
    seed: int = 0
    out: str = "out"
    domain: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    dp: dict = field(default_factory=dict)
    fixed_point: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    defaults_applied: tuple = field(default=(), compare=False, repr=False)


# ------------------------------------------------------------------ parsing


def _parse_scalar(raw: str, kind: str, line: int):
    try:
        if kind == "int":
            v = int(raw)
            return v
        if kind == "float":
            return float(raw)
        if kind == "floats":
            return tuple(float(p) for p in raw.split())
        if kind == "ints":
            return tuple(int(p) for p in raw.split())
        if kind == "rows":
            rows = [tuple(float(p) for p in row.split())
                    for row in raw.split(";")]
            if len({len(r) for r in rows}) != 1:
                raise ConfigError("matrix rows have unequal lengths", line)
            return tuple(rows)
    except ValueError:
        raise ConfigError(f"expected {kind}, got {raw!r}", line) from None
    return raw  # "str"


def _model_value(raw: str, line: int):
    """Model parameters are preset-defined: float, float list, or string."""
    parts = raw.split()
    try:
        if len(parts) > 1:
            return tuple(float(p) for p in parts)
        return float(raw)
    except ValueError:
        return raw


def _raw_sections(text: str) -> dict:
    """section -> {key: (raw value, line number)}; structure errors here."""
    out: dict = {}
    current = None
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        stripped = rawline.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", lineno)
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(
                    f"unknown section [{name}]; expected one of "
                    f"{', '.join(_SECTIONS)}", lineno)
            current = out.setdefault(name, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value, got {stripped!r}", lineno)
        if current is None:
            raise ConfigError("key outside any [section]", lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in current:
            raise ConfigError(f"duplicate key {key!r} in section", lineno)
        current[key] = (value, lineno)
    return out


def _typed_section(name: str, raw: dict, defaults_log: list) -> dict:
    schema = _SCHEMA[name]
    unknown = set(raw) - set(schema)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {key!r} in [{name}]", raw[key][1])
    values = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            values[key] = _parse_scalar(raw[key][0], kind, raw[key][1])
        elif default is not None:
            values[key] = default
            defaults_log.append(f"{name}.{key} = {_render(default)}")
    return values


def _domain_section(raw: dict) -> dict:
    if "kind" not in raw:
        raise ConfigError("[domain] needs a kind (box, ball, half_space, "
                          "polytope)")
    kind, kind_line = raw["kind"]
    if kind not in DOMAIN_KINDS:
        raise ConfigError(f"unknown domain kind {kind!r}", kind_line)
    wanted = DOMAIN_KINDS[kind]
    unknown = set(raw) - set(wanted) - {"kind"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(
            f"unknown key {key!r} for domain kind {kind!r}", raw[key][1])
    values = {"kind": kind}
    kinds = {"radius": "float", "offset": "float", "normals": "rows"}
    for key in wanted:
        if key not in raw:
            raise ConfigError(f"domain kind {kind!r} needs key {key!r}",
                              kind_line)
        values[key] = _parse_scalar(raw[key][0], kinds.get(key, "floats"),
                                    raw[key][1])
    return values


def _model_section(raw: dict) -> tuple[dict, dict]:
    if "preset" not in raw:
        raise ConfigError(f"[model] needs a preset; known: {preset_names()}")
    values = {"preset": raw["preset"][0]}
    lines = {"preset": raw["preset"][1]}
    for key, (value, lineno) in raw.items():
        if key == "preset":
            continue
        values[key] = _model_value(value, lineno)
        lines[key] = lineno
    return values, lines


def _model_param_line(exc: PenmfgError, lines: dict) -> int | None:
    for key, lineno in lines.items():
        if f"'{key}'" in str(exc):
            return lineno
    return lines.get("preset")


def parse_config(text: str) -> RunConfig:
    """Parse and validate; errors carry the offending line number."""
    raw = _raw_sections(text)
    defaults_log: list = []
    run = _typed_section("run", raw.get("run", {}), defaults_log)
    if run["command"] not in COMMANDS:
        line = raw.get("run", {}).get("command", (None, None))[1]
        raise ConfigError(
            f"unknown command {run['command']!r}; expected one of "
            f"{', '.join(COMMANDS)}", line)
    if run["seed"] < 0:
        raise ConfigError("seed must be nonnegative",
                          _section_line(raw, "run", "seed"))
    if "domain" not in raw:
        raise ConfigError("missing [domain] section")
    if "model" not in raw:
        raise ConfigError("missing [model] section")
    domain = _domain_section(raw["domain"])
    model, model_lines = _model_section(raw["model"])
    sim = _typed_section("sim", raw.get("sim", {}), defaults_log)
    dp = _typed_section("dp", raw.get("dp", {}), defaults_log)
    fixed_point = _typed_section("fixed_point", raw.get("fixed_point", {}),
                                 defaults_log)
    sweep = _typed_section("sweep", raw.get("sweep", {}), defaults_log)
    cfg = RunConfig(
        command=run["command"], seed=run["seed"], out=run["out"],
        domain=domain, model=model, sim=sim, dp=dp,
        fixed_point=fixed_point, sweep=sweep,
        defaults_applied=tuple(defaults_log),
    )
    _validate_builds(cfg, raw, model_lines)
    return cfg


def _section_line(raw: dict, name: str, key: str | None = None) -> int | None:
    section = raw.get(name, {})
    if key is not None and key in section:
        return section[key][1]
    return min((ln for _, ln in section.values()), default=None)


def _validate_builds(cfg: RunConfig, raw: dict, model_lines: dict) -> None:
    try:
        dom = build_domain(cfg)
    except PenmfgError as exc:
        raise ConfigError(f"[domain] {exc}",
                          _section_line(raw, "domain")) from exc
    try:
        build_model(cfg, dom)
    except PenmfgError as exc:
        raise ConfigError(f"[model] {exc}",
                          _model_param_line(exc, model_lines)) from exc
    needs_sim = cfg.command != "diagnose"
    if needs_sim or cfg.sim.get("n_particles") is not None:
        for key in ("n_particles", "dt"):
            if cfg.sim.get(key) is None:
                raise ConfigError(f"[sim] needs key {key!r}",
                                  _section_line(raw, "sim"))
        try:
            sim = build_sim(cfg)
        except PenmfgError as exc:
            line = _section_line(raw, "sim", "penalty") \
                or _section_line(raw, "sim")
            raise ConfigError(f"[sim] {exc}", line) from exc
        try:
            build_fixed_point(cfg, sim)
        except PenmfgError as exc:
            raise ConfigError(f"[fixed_point] {exc}",
                              _section_line(raw, "fixed_point")) from exc
    if cfg.dp.get("hx") is not None and cfg.dp["hx"] <= 0:
        raise ConfigError("[dp] hx must be positive",
                          _section_line(raw, "dp", "hx"))
    if cfg.sweep.get("epsilon") is not None \
            and not 0.0 <= cfg.sweep["epsilon"] <= 0.5:
        raise ConfigError("[sweep] epsilon must lie in [0, 1/2]",
                          _section_line(raw, "sweep", "epsilon"))


def parse_config_file(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply `section.key=value` strings on top of a parsed config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, value = (part.strip() for part in item.split("=", 1))
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, key = dotted.split(".", 1)
        if section == "run" and key in ("command", "seed", "out"):
            kind = _SCHEMA["run"][key][0]
            cfg = replace(cfg, **{key: _parse_scalar(value, kind, 0)})
        elif section in ("sim", "dp", "fixed_point", "sweep"):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"override {item!r}: unknown key {key!r} in [{section}]")
            kind = _SCHEMA[section][key][0]
            updated = dict(getattr(cfg, section))
            updated[key] = _parse_scalar(value, kind, 0)
            cfg = replace(cfg, **{section: updated})
        elif section == "model":
            updated = dict(cfg.model)
            updated[key] = value if key == "preset" \
                else _model_value(value, 0)
            cfg = replace(cfg, model=updated)
        elif section == "domain":
            raise ConfigError(
                f"override {item!r}: edit the [domain] section instead")
        else:
            raise ConfigError(f"override {item!r}: unknown section "
                              f"{section!r}")
    # re-validate the patched config through the canonical text; keep the
    # original default log for the run report
    validated = parse_config(serialize(cfg))
    return replace(validated, defaults_applied=cfg.defaults_applied)


# ------------------------------------------------------------ serialization


def _render(value) -> str:
    if isinstance(value, bool):
        raise ConfigError(f"cannot render {value!r}")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, str):
        return value
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(" ".join(_render(v) for v in row) for row in value)
    if isinstance(value, tuple):
        return " ".join(_render(v) for v in value)
    raise ConfigError(f"cannot render {value!r}")


def serialize(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines = ["[run]", f"command = {cfg.command}", f"seed = {cfg.seed}",
             f"out = {cfg.out}", "", "[domain]"]
    for key in ("kind", *DOMAIN_KINDS[cfg.domain["kind"]]):
        lines.append(f"{key} = {_render(cfg.domain[key])}")
    lines += ["", "[model]", f"preset = {cfg.model['preset']}"]
    for key in sorted(k for k in cfg.model if k != "preset"):
        lines.append(f"{key} = {_render(cfg.model[key])}")
    for section in ("sim", "dp", "fixed_point", "sweep"):
        body = getattr(cfg, section)
        keys = [k for k in _SCHEMA[section] if body.get(k) is not None]
        if not keys:
            continue
        lines += ["", f"[{section}]"]
        lines += [f"{key} = {_render(body[key])}" for key in keys]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Digest of what the run computes; the output path is normalized away."""
    canonical = serialize(replace(cfg, out="out"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ----------------------------------------------------------------- builders


def build_domain(cfg: RunConfig) -> dom_mod.ConvexDomain:
    d = cfg.domain
    if d["kind"] == "box":
        return dom_mod.box(d["lower"], d["upper"])
    if d["kind"] == "ball":
        return dom_mod.ball(d["center"], d["radius"])
    if d["kind"] == "half_space":
        return dom_mod.half_space(d["normal"], d["offset"])
    return dom_mod.polytope([list(r) for r in d["normals"]], d["offsets"])


def build_model(cfg: RunConfig, dom=None) -> ModelSpec:
    dom = build_domain(cfg) if dom is None else dom
    params = {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in cfg.model.items() if k != "preset"}
    return make_preset(cfg.model["preset"], dom, params)


def build_sim(cfg: RunConfig) -> SimConfig:
    return SimConfig(
        n_particles=cfg.sim["n_particles"], dt=cfg.sim["dt"],
        scheme=cfg.sim.get("scheme", "penalized_splitting"),
        penalty=cfg.sim.get("penalty"), seed=cfg.seed,
        interaction=cfg.sim.get("interaction", "self"),
    )


def build_grid(cfg: RunConfig, ms: ModelSpec) -> DPGrid | None:
    """Domain-fitting DP grid, or None when [dp] gives no hx."""
    hx = cfg.dp.get("hx")
    if hx is None:
        return None
    if cfg.dp.get("lower") is not None or cfg.dp.get("upper") is not None:
        if cfg.dp.get("lower") is None or cfg.dp.get("upper") is None:
            raise ConfigError("[dp] bounds need both lower and upper")
        return DPGrid.regular(cfg.dp["lower"], cfg.dp["upper"], hx)
    return DPGrid.for_model(ms, hx, cfg.sim.get("dt", 1e-3))


def build_fixed_point(cfg: RunConfig, sim: SimConfig | None = None,
                      grid: DPGrid | None = None) -> FixedPointConfig:
    fp = cfg.fixed_point
    return FixedPointConfig(
        sim=build_sim(cfg) if sim is None else sim, grid=grid,
        damping=fp.get("damping", 0.5), max_iters=fp.get("max_iters", 30),
        tol=fp.get("tol", 5e-2), tol_exploit=fp.get("tol_exploit", 5e-2),
    )
