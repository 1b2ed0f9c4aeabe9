"""Scenario documents: a versioned JSON key-tree with typed leaves.

:func:`load_scenario` validates every field (errors carry the offending
field path), fills in defaults and returns a frozen :class:`Scenario`;
:func:`write_scenario` emits the fully materialized document, so that
``load_scenario(write_scenario(s)) == s``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .constraints import RISK_MAX, RISK_MIN, Obstacle
from .models import MODEL_NAMES, SdeModel, build_model
from .projection import GermMap
from .scp import ScpConfig

SCHEMA_VERSION = 1
METHODS = ("gpc-scp", "gpc-scp-pc")
FLAVORS = ("dr", "gaussian")
TERMINAL_KINDS = ("dr", "3sigma", "none")
BUNDLED_DIR = Path(__file__).resolve().parent / "scenarios"


class ScenarioError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple
    cov: tuple
    radius: float

    def to_obstacle(self) -> Obstacle:
        return Obstacle(np.array(self.center), np.array(self.cov), self.radius)


@dataclass(frozen=True)
class TerminalSet:
    """Terminal mean and the set ``(x - mean)^T diag(q_xf) (x - mean) <= c_f``."""

    mean: tuple
    q_xf: tuple
    c_f: float
    eps_f: float
    kind: str


@dataclass(frozen=True)
class CostSpec:
    control_norm: float = 2
    control_weight: float = 1.0
    q_running: Optional[tuple] = None
    q_terminal: Optional[tuple] = None


@dataclass(frozen=True)
class PlannerSpec:
    enabled: bool
    node_budget: int
    max_edge_steps: int
    goal_position_tol: float
    goal_velocity_tol: float
    sample_low: tuple
    sample_high: tuple


@dataclass(frozen=True)
class ValidationSpec:
    rollouts: int
    mode: str
    kp: float
    kd: float
    substeps: int
    reference: str


@dataclass(frozen=True)
class Scenario:
    """Validated planning scenario; every default is materialized."""

    name: str
    model: str
    model_params: tuple
    sigma: Optional[float]
    p_gpc: int
    d_xi: int
    x0_mean: tuple
    x0_stdev: tuple
    terminal: TerminalSet
    obstacles: tuple
    r_rob: float
    eps_col: float
    horizon: int
    dt: float
    flavor: str
    method: str
    cost: CostSpec
    scp: ScpConfig
    planner: PlannerSpec
    validation: ValidationSpec
    propagate_rollouts: int
    collision_indices: tuple

    def build_model(self) -> SdeModel:
        return build_model(self.model, dict(self.model_params), self.sigma)

    def obstacle_list(self) -> tuple:
        return tuple(o.to_obstacle() for o in self.obstacles)

    def germ_map(self) -> GermMap:
        return GermMap.build(self.build_model().d_w, self.x0_stdev)

    def with_overrides(self, **changes) -> "Scenario":
        """Copy with top-level fields replaced and re-validated."""
        doc = scenario_to_dict(replace(self, **changes))
        return parse_scenario(doc)


# -- field readers -----------------------------------------------------------


def _get(doc: dict, key: str, path: str, default: Any = ...) -> Any:
    if key in doc:
        return doc[key]
    if default is ...:
        raise ScenarioError(f"{path}.{key}" if path else key, "required field missing")
    return default


def _real(v: Any, path: str, positive: bool = False, nonneg: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(path, f"expected a number, got {type(v).__name__}")
    v = float(v)
    if not math.isfinite(v):
        raise ScenarioError(path, "must be finite")
    if positive and not v > 0:
        raise ScenarioError(path, "must be positive")
    if nonneg and v < 0:
        raise ScenarioError(path, "must be non-negative")
    return v


def _int(v: Any, path: str, minimum: int = 0) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(path, f"expected an integer, got {type(v).__name__}")
    if v < minimum:
        raise ScenarioError(path, f"must be at least {minimum}")
    return int(v)


def _vec(v: Any, path: str, size: Optional[int] = None, nonneg: bool = False) -> tuple:
    if not isinstance(v, list):
        raise ScenarioError(path, "expected a list of numbers")
    out = tuple(_real(x, f"{path}[{i}]", nonneg=nonneg) for i, x in enumerate(v))
    if size is not None and len(out) != size:
        raise ScenarioError(path, f"expected {size} entries, got {len(out)}")
    return out


def _choice(v: Any, path: str, options: tuple) -> str:
    if v not in options:
        raise ScenarioError(path, f"must be one of {list(options)}, got {v!r}")
    return v


def _risk(v: Any, path: str) -> float:
    v = _real(v, path)
    if not RISK_MIN <= v <= RISK_MAX:
        raise ScenarioError(path, f"risk {v} outside [{RISK_MIN}, {RISK_MAX}]")
    return v


def _mapping(v: Any, path: str) -> dict:
    if not isinstance(v, dict):
        raise ScenarioError(path, "expected an object")
    return v


def _no_extra(doc: dict, allowed: set, path: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise ScenarioError(where, "unknown field")


def _norm(v: Any, path: str) -> float:
    if v == "inf":
        return math.inf
    v = _real(v, path)
    if v not in (1.0, 2.0):
        raise ScenarioError(path, "must be 1, 2 or \"inf\"")
    return v


def _default_box(model: SdeModel, x0: tuple, goal: tuple, obstacles: tuple, idx: tuple) -> tuple[tuple, tuple]:
    """Sampling box: span of start, goal and obstacles, padded."""
    pts = np.array([x0, goal], dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.full(model.d_x, 0.15)
    pad[list(model.position_indices)] = 0.5
    lo, hi = lo - pad, hi + pad
    for o in obstacles:
        c = np.array(o.center)
        lo[list(idx)] = np.minimum(lo[list(idx)], c - o.radius)
        hi[list(idx)] = np.maximum(hi[list(idx)], c + o.radius)
    return tuple(float(v) for v in lo), tuple(float(v) for v in hi)


# -- parsing -----------------------------------------------------------------

_TOP = {
    "schema_version", "name", "model", "sigma", "p_gpc", "d_xi", "x0", "terminal",
    "obstacles", "r_rob", "eps_col", "horizon", "dt", "flavor", "method", "cost",
    "scp", "planner", "validation", "propagate", "collision_indices",
}


def parse_scenario(doc: Any) -> Scenario:
    """Validate a decoded document and materialize defaults."""
    doc = _mapping(doc, "<root>")
    _no_extra(doc, _TOP, "")
    version = _int(_get(doc, "schema_version", ""), "schema_version", 1)
    if version != SCHEMA_VERSION:
        raise ScenarioError("schema_version", f"unsupported version {version}")
    name = _get(doc, "name", "", "unnamed")
    if not isinstance(name, str):
        raise ScenarioError("name", "expected a string")

    mdoc = _mapping(_get(doc, "model", ""), "model")
    _no_extra(mdoc, {"name", "params"}, "model")
    mname = _choice(_get(mdoc, "name", "model"), "model.name", MODEL_NAMES)
    pdoc = _mapping(_get(mdoc, "params", "model", {}), "model.params")
    params = tuple(sorted((k, _real(v, f"model.params.{k}")) for k, v in pdoc.items()))
    sigma = _get(doc, "sigma", "", None)
    if sigma is not None:
        sigma = _real(sigma, "sigma", nonneg=True)
    try:
        model = build_model(mname, dict(params), sigma)
    except ValueError as exc:
        raise ScenarioError("model.params", str(exc)) from None

    p_gpc = _int(_get(doc, "p_gpc", ""), "p_gpc", 0)
    xdoc = _mapping(_get(doc, "x0", ""), "x0")
    _no_extra(xdoc, {"mean", "stdev"}, "x0")
    x0_mean = _vec(_get(xdoc, "mean", "x0"), "x0.mean", model.d_x)
    x0_stdev = _vec(_get(xdoc, "stdev", "x0", [0.0] * model.d_x), "x0.stdev", model.d_x, nonneg=True)
    d_xi_implied = GermMap.build(model.d_w, x0_stdev).d_xi
    d_xi = _int(_get(doc, "d_xi", "", d_xi_implied), "d_xi", 1)
    if d_xi != d_xi_implied:
        raise ScenarioError("d_xi", f"noise channels and uncertain initial states need {d_xi_implied}, got {d_xi}")

    collision_indices = tuple(
        _int(v, f"collision_indices[{i}]")
        for i, v in enumerate(_get(doc, "collision_indices", "", list(model.position_indices[:2])))
    )
    for i, v in enumerate(collision_indices):
        if v >= model.d_x:
            raise ScenarioError(f"collision_indices[{i}]", "outside the state")
    npos = len(collision_indices)

    tdoc = _mapping(_get(doc, "terminal", ""), "terminal")
    _no_extra(tdoc, {"mean", "q_xf", "c_f", "eps_f", "kind"}, "terminal")
    terminal = TerminalSet(
        mean=_vec(_get(tdoc, "mean", "terminal"), "terminal.mean", model.d_x),
        q_xf=_vec(_get(tdoc, "q_xf", "terminal", [1.0] * model.d_x), "terminal.q_xf", model.d_x, nonneg=True),
        c_f=_real(_get(tdoc, "c_f", "terminal", 0.005), "terminal.c_f", positive=True),
        eps_f=_risk(_get(tdoc, "eps_f", "terminal", 0.05), "terminal.eps_f"),
        kind=_choice(_get(tdoc, "kind", "terminal", "dr"), "terminal.kind", TERMINAL_KINDS),
    )

    obstacles = []
    olist = _get(doc, "obstacles", "", [])
    if not isinstance(olist, list):
        raise ScenarioError("obstacles", "expected a list")
    for j, odoc in enumerate(olist):
        p = f"obstacles[{j}]"
        odoc = _mapping(odoc, p)
        _no_extra(odoc, {"center", "cov", "radius"}, p)
        center = _vec(_get(odoc, "center", p), f"{p}.center", npos)
        cov_raw = _get(odoc, "cov", p, [[0.0] * npos for _ in range(npos)])
        if not isinstance(cov_raw, list) or len(cov_raw) != npos:
            raise ScenarioError(f"{p}.cov", f"expected a {npos}x{npos} matrix")
        cov = tuple(_vec(row, f"{p}.cov[{i}]", npos) for i, row in enumerate(cov_raw))
        c = np.array(cov)
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
            raise ScenarioError(f"{p}.cov", "must be symmetric positive semidefinite")
        radius = _real(_get(odoc, "radius", p), f"{p}.radius", positive=True)
        obstacles.append(ObstacleSpec(center, cov, radius))
    obstacles = tuple(obstacles)

    r_rob = _real(_get(doc, "r_rob", "", 0.0), "r_rob", nonneg=True)
    eps_col = _risk(_get(doc, "eps_col", "", 0.05), "eps_col")
    horizon = _int(_get(doc, "horizon", ""), "horizon", 2)
    dt = _real(_get(doc, "dt", ""), "dt", positive=True)
    if not math.isfinite(horizon * dt):
        raise ScenarioError("dt", "horizon * dt must be finite")
    flavor = _choice(_get(doc, "flavor", "", "dr"), "flavor", FLAVORS)
    method = _choice(_get(doc, "method", "", "gpc-scp"), "method", METHODS)

    cdoc = _mapping(_get(doc, "cost", "", {}), "cost")
    _no_extra(cdoc, {"control_norm", "control_weight", "q_running", "q_terminal"}, "cost")
    q_run = cdoc.get("q_running")
    q_term = cdoc.get("q_terminal")
    cost = CostSpec(
        control_norm=_norm(cdoc.get("control_norm", 2), "cost.control_norm"),
        control_weight=_real(cdoc.get("control_weight", 1.0), "cost.control_weight", nonneg=True),
        q_running=None if q_run is None else _vec(q_run, "cost.q_running", model.d_x, nonneg=True),
        q_terminal=None if q_term is None else _vec(q_term, "cost.q_terminal", model.d_x, nonneg=True),
    )

    sdoc = _mapping(_get(doc, "scp", "", {}), "scp")
    known = {f.name: f for f in fields(ScpConfig)}
    _no_extra(sdoc, set(known), "scp")
    scp_kwargs = {}
    for key, value in sdoc.items():
        if known[key].type in ("int", int):
            scp_kwargs[key] = _int(value, f"scp.{key}", 1)
        else:
            scp_kwargs[key] = _real(value, f"scp.{key}", nonneg=True)
    try:
        scp = ScpConfig(**scp_kwargs)
    except ValueError as exc:
        raise ScenarioError("scp", str(exc)) from None

    pl = _mapping(_get(doc, "planner", "", {}), "planner")
    _no_extra(
        pl,
        {"enabled", "node_budget", "max_edge_steps", "goal_position_tol", "goal_velocity_tol", "sample_low", "sample_high"},
        "planner",
    )
    enabled = pl.get("enabled", bool(model.d_u))
    if not isinstance(enabled, bool):
        raise ScenarioError("planner.enabled", "expected true or false")
    lo_def, hi_def = _default_box(model, x0_mean, terminal.mean, obstacles, collision_indices)
    planner = PlannerSpec(
        enabled=enabled,
        node_budget=_int(pl.get("node_budget", 5000), "planner.node_budget", 1),
        max_edge_steps=_int(pl.get("max_edge_steps", 10), "planner.max_edge_steps", 1),
        goal_position_tol=_real(pl.get("goal_position_tol", 0.2), "planner.goal_position_tol", positive=True),
        goal_velocity_tol=_real(pl.get("goal_velocity_tol", 0.1), "planner.goal_velocity_tol", positive=True),
        sample_low=_vec(pl.get("sample_low", list(lo_def)), "planner.sample_low", model.d_x),
        sample_high=_vec(pl.get("sample_high", list(hi_def)), "planner.sample_high", model.d_x),
    )
    if any(a > b for a, b in zip(planner.sample_low, planner.sample_high)):
        raise ScenarioError("planner.sample_high", "must not lie below sample_low")

    vd = _mapping(_get(doc, "validation", "", {}), "validation")
    _no_extra(vd, {"rollouts", "mode", "kp", "kd", "substeps", "reference"}, "validation")
    validation = ValidationSpec(
        rollouts=_int(vd.get("rollouts", 1000), "validation.rollouts", 0),
        mode=_choice(vd.get("mode", "closed"), "validation.mode", ("open", "closed")),
        kp=_real(vd.get("kp", 2.0), "validation.kp", positive=True),
        kd=_real(vd.get("kd", 3.0), "validation.kd", positive=True),
        substeps=_int(vd.get("substeps", 10), "validation.substeps", 1),
        reference=_choice(vd.get("reference", "sampled"), "validation.reference", ("sampled", "mean")),
    )
    prd = _mapping(_get(doc, "propagate", "", {}), "propagate")
    _no_extra(prd, {"rollouts"}, "propagate")
    propagate_rollouts = _int(prd.get("rollouts", 10000), "propagate.rollouts", 0)

    return Scenario(
        name=name,
        model=mname,
        model_params=params,
        sigma=sigma,
        p_gpc=p_gpc,
        d_xi=d_xi,
        x0_mean=x0_mean,
        x0_stdev=x0_stdev,
        terminal=terminal,
        obstacles=obstacles,
        r_rob=r_rob,
        eps_col=eps_col,
        horizon=horizon,
        dt=dt,
        flavor=flavor,
        method=method,
        cost=cost,
        scp=scp,
        planner=planner,
        validation=validation,
        propagate_rollouts=propagate_rollouts,
        collision_indices=collision_indices,
    )


def _jsonable(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def scenario_to_dict(s: Scenario) -> dict:
    """Fully materialized document of ``s``."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": s.name,
        "model": {"name": s.model, "params": {k: v for k, v in s.model_params}},
        "sigma": s.sigma,
        "p_gpc": s.p_gpc,
        "d_xi": s.d_xi,
        "x0": {"mean": list(s.x0_mean), "stdev": list(s.x0_stdev)},
        "terminal": {k: _jsonable(v) for k, v in asdict(s.terminal).items()},
        "obstacles": [
            {"center": list(o.center), "cov": [list(r) for r in o.cov], "radius": o.radius} for o in s.obstacles
        ],
        "r_rob": s.r_rob,
        "eps_col": s.eps_col,
        "horizon": s.horizon,
        "dt": s.dt,
        "flavor": s.flavor,
        "method": s.method,
        "cost": {k: _jsonable(v) for k, v in asdict(s.cost).items()},
        "scp": asdict(s.scp),
        "planner": {k: _jsonable(v) for k, v in asdict(s.planner).items()},
        "validation": asdict(s.validation),
        "propagate": {"rollouts": s.propagate_rollouts},
        "collision_indices": list(s.collision_indices),
    }
    if s.sigma is None:
        del doc["sigma"]
    return doc


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2, sort_keys=False) + "\n"


def write_scenario(s: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(dumps_scenario(s), encoding="utf-8")
    return path


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file.

    ``path`` may also name a bundled scenario (``"fig5"`` or
    ``"fig5.scenario"``) when no such file exists.

    Raises:
        FileNotFoundError: If neither a file nor a bundled scenario matches.
        ScenarioError: On any schema violation.
    """
    p = Path(path)
    if not p.exists():
        stem = p.name[: -len(".scenario")] if p.name.endswith(".scenario") else p.name
        bundled = BUNDLED_DIR / f"{stem}.scenario"
        if p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"scenario '{path}' not found")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError("<root>", f"invalid JSON: {exc}") from None
    return parse_scenario(doc)


def bundled_scenarios() -> list[str]:
    return sorted(f.stem for f in BUNDLED_DIR.glob("*.scenario"))
