"""Scenario files: loading, validation, canonical hashing and the experiment runner."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
import sys
import tempfile
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import _kernels
from . import controls as _controls
from . import cost as _cost
from . import diagnostics as _diagnostics
from . import fbsde as _fbsde
from . import optimizer as _optimizer
from .builtins import BUILTINS, get_builtin
from .controls import ActionSpace, RelaxedControl, StrictControl, TimeGrid, chattering_approximation
from .cost import evaluate_cost
from .errors import FBSDEError, ScenarioError
from .expressions import matrix_callback, scalar_callback, uses_name, vector_callback
from .fbsde import COUPLED, DECOUPLED, CoefficientSet, PicardConfig, solve
from .optimizer import OptimizerConfig, minimize_relaxed, strictify
from .regression import RegressionSpec

__version__ = "0.1.0"

MODULE_VERSIONS = {
    "controls": _controls.__version__,
    "fbsde": _fbsde.__version__,
    "cost": _cost.__version__,
    "optimizer": _optimizer.__version__,
    "diagnostics": _diagnostics.__version__,
    "scenarios_cli": __version__,
}

OUT_ENV = "FBSDE_RELAX_OUT"

_TOP_KEYS = {
    "name", "builtin", "params", "coefficients", "coupling", "action_space", "T", "N", "x0", "n_paths",
    "seed", "regression", "control", "optimizer", "picard", "diagnostics", "strictify", "quadrature",
    "n_bootstrap", "relaxation", "antithetic", "output_dir", "sample_paths",
}
_COEF_KEYS = {"d", "m", "k", "b", "sigma", "h", "phi", "l", "psi", "g", "bound", "lipschitz"}
_DIAG_KEYS = {"enabled", "levels", "n_paths", "pairs"}
_REG_KEYS = {"basis", "degree", "bins", "ridge"}
_PICARD_KEYS = {"max_iters", "tol", "damping"}
_CONTROL_KINDS = {"default", "uniform", "dirac", "weights", "chattering", "pattern"}

_DEFAULTS = {
    "coupling": DECOUPLED,
    "T": 1.0,
    "N": 32,
    "x0": 0.0,
    "n_paths": 10000,
    "seed": 0,
    "regression": {"basis": "polynomial", "degree": 2, "ridge": 0.0},
    "control": {"kind": "default"},
    "optimizer": None,
    "picard": None,
    "diagnostics": {"enabled": True, "levels": [16, 32, 64], "n_paths": 20000, "pairs": 8},
    "strictify": False,
    "quadrature": "left",
    "n_bootstrap": 50,
    "relaxation": "auto",
    "antithetic": False,
    "sample_paths": 16,
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-3``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    __import__("re").compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", __import__("re").X),
    list("-+0123456789."),
)


def _marks(node, prefix=(), out=None):
    """Map key paths to (line, column) of their YAML nodes (1-based)."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _marks(v, path, out)
    return out


def parse_text(text, source="<string>"):
    """Parse YAML/JSON text into (mapping, key-position index)."""
    if source.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{source}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                                line=exc.lineno, column=exc.colno) from None
    try:
        node = yaml.compose(text, Loader=_Loader)
        if not source.endswith(".json"):
            data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise ScenarioError(f"{source}: parse error at line {line}, column {col}: {exc.problem}",
                            line=line, column=col) from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{source}: parse error: {exc}") from None
    except RecursionError:
        raise ScenarioError(f"{source}: document nested too deeply") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}: a scenario must be a mapping at top level", line=1, column=1)
    return data, (_marks(node) if node is not None else {})


def _fail(msg, path, marks):
    line, col = marks.get(tuple(path), (None, None))
    where = f" (line {line}, column {col})" if line else ""
    raise ScenarioError(f"{'.'.join(map(str, path))}: {msg}{where}", field=".".join(map(str, path)),
                        line=line, column=col)


def _check_keys(d, allowed, path, marks):
    if not isinstance(d, dict):
        _fail("expected a mapping", path, marks)
    for k in d:
        if k not in allowed:
            _fail(f"unknown key {k!r}", list(path) + [k], marks)


def _positive_int(v, path, marks):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < 1:
        _fail(f"must be a positive integer, got {v!r}", path, marks)
    return int(v)


def _positive_float(v, path, marks):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v) or v <= 0:
        _fail(f"must be a positive number, got {v!r}", path, marks)
    return float(v)


def _number(v, path, marks):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        _fail(f"must be a finite number, got {v!r}", path, marks)
    return float(v)


@dataclass
class Scenario:
    """A validated, fully resolved experiment description."""

    config: dict
    output_dir: Optional[str] = None
    source: Optional[str] = None
    _built: dict = field(default_factory=dict, repr=False)

    # canonical form -------------------------------------------------------
    def canonical(self):
        return json.dumps(self.config, sort_keys=True, separators=(",", ":"), allow_nan=False)

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_dict(self):
        d = copy.deepcopy(self.config)
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        return d

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def __getattr__(self, name):
        cfg = self.__dict__.get("config", {})
        if name in cfg:
            return cfg[name]
        raise AttributeError(name)

    def with_overrides(self, **kw):
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            if k == "diagnostics":
                d.setdefault("diagnostics", {})["enabled"] = bool(v)
            elif k == "optimize":
                if v and not d.get("optimizer"):
                    d["optimizer"] = {}
            else:
                d[k] = v
        return scenario_from_dict(d, source=self.source)

    # problem construction -------------------------------------------------
    def build(self):
        """Return (coefficients, action space, grid, initial control, oracle)."""
        if self._built:
            return self._built["value"]
        cfg = self.config
        grid = TimeGrid.uniform(cfg["T"], cfg["N"])
        oracle = None
        if cfg.get("builtin"):
            c, space, control_factory, oracle = get_builtin(cfg["builtin"]).make(cfg.get("params"))
            default_control = control_factory(grid)
        else:
            c, space = _expression_problem(cfg)
            default_control = RelaxedControl.uniform(space, grid)
        if cfg.get("action_space") is not None:
            space = ActionSpace(cfg["action_space"])
        control = _make_control(cfg["control"], space, grid, default_control)
        value = (c, space, grid, control, oracle)
        self._built["value"] = value
        return value


def _expression_problem(cfg):
    co = cfg["coefficients"]
    d, m, k = co.get("d", 1), co.get("m", 1), co.get("k", 1)
    coupled = cfg["coupling"] == COUPLED
    sigma_spec = co.get("sigma", [["0"] * m for _ in range(d)] if d * m > 1 else "0")
    if coupled and uses_name(sigma_spec, "u"):
        raise ScenarioError("coefficients.sigma: a coupled system needs an uncontrolled diffusion",
                            field="coefficients.sigma")
    kwargs = dict(
        b=vector_callback(co.get("b", ["0"] * d), d),
        sigma=matrix_callback(sigma_spec, d, m),
        h=vector_callback(co.get("h", ["0"] * k), k),
        phi=vector_callback(co.get("phi", ["0"] * k), k, with_state=False),
        d=d, m=m, k=k,
        coupling=cfg["coupling"],
        bound=float(co.get("bound", np.inf)),
        lipschitz=float(co.get("lipschitz", 0.0)),
        sigma_controlled=uses_name(sigma_spec, "u"),
        name=cfg.get("name", "expressions"),
    )
    for key, kind in (("l", "running"), ("psi", "terminal"), ("g", "initial")):
        if key in co:
            kwargs[key] = scalar_callback(co[key], kind)
    if not coupled and (uses_name(co.get("b", "0"), "y") or uses_name(sigma_spec, "y")):
        raise ScenarioError("coefficients: forward coefficients use y; set coupling: coupled",
                            field="coefficients.b")
    space = ActionSpace(cfg["action_space"] if cfg.get("action_space") is not None else [0.0])
    return CoefficientSet(**kwargs), space


def _make_control(spec, space, grid, default):
    kind = spec.get("kind", "default")
    if kind == "default":
        return default
    if kind == "uniform":
        return RelaxedControl.uniform(space, grid)
    if kind == "dirac":
        return StrictControl(space, grid, np.full(grid.N, int(spec.get("atom", 0))))
    if kind == "weights":
        w = np.asarray(spec["weights"], dtype=np.float64)
        if w.ndim == 1:
            return RelaxedControl.constant(space, grid, w)
        cells = TimeGrid.uniform(grid.T, w.shape[0])
        return RelaxedControl(space, cells, w)
    if kind == "chattering":
        w = np.asarray(spec.get("weights", [1.0 / space.m] * space.m), dtype=np.float64)
        base = RelaxedControl(space, TimeGrid.uniform(grid.T, int(spec.get("cells", 1))),
                              np.tile(w, (int(spec.get("cells", 1)), 1)))
        return chattering_approximation(base, int(spec["n"]))
    pattern = np.asarray(spec["atoms"], dtype=np.int64)
    return StrictControl(space, TimeGrid.uniform(grid.T, pattern.size), pattern)


def _validate(raw, marks, source):
    _check_keys(raw, _TOP_KEYS, [], marks)
    if ("builtin" in raw) == ("coefficients" in raw):
        raise ScenarioError(f"{source}: give exactly one of 'builtin' or 'coefficients'", field="builtin")
    cfg = copy.deepcopy(_DEFAULTS)
    out_dir = raw.get("output_dir")
    if "builtin" in raw:
        name = raw["builtin"]
        if name not in BUILTINS:
            _fail(f"unknown builtin {name!r}; available: {', '.join(sorted(BUILTINS))}", ["builtin"], marks)
        b = BUILTINS[name]
        for k, v in copy.deepcopy(b.defaults).items():
            if k == "optimizer_defaults":
                continue
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
        cfg["builtin"] = name
        cfg["coupling"] = COUPLED if name == "coupled-linear" else DECOUPLED
        params = raw.get("params", {}) or {}
        _check_keys(params, set(b.params), ["params"], marks)
        cfg["params"] = {**b.params, **params}
    elif "params" in raw:
        _fail("params only apply to builtins", ["params"], marks)
    for k, v in raw.items():
        if k in ("builtin", "params", "output_dir"):
            continue
        if k == "diagnostics" and isinstance(v, dict):
            _check_keys(v, _DIAG_KEYS, ["diagnostics"], marks)
            cfg["diagnostics"] = {**cfg["diagnostics"], **v}
        elif k == "diagnostics" and isinstance(v, bool):
            cfg["diagnostics"] = {**cfg["diagnostics"], "enabled": v}
        elif k == "optimizer" and isinstance(v, dict) and cfg.get("builtin"):
            cfg["optimizer"] = {**BUILTINS[cfg["builtin"]].defaults.get("optimizer_defaults", {}), **v}
        else:
            cfg[k] = copy.deepcopy(v)
    cfg.setdefault("name", cfg.get("builtin", "scenario"))

    # field-level validation
    cfg["T"] = _positive_float(cfg["T"], ["T"], marks)
    cfg["N"] = _positive_int(cfg["N"], ["N"], marks)
    cfg["n_paths"] = _positive_int(cfg["n_paths"], ["n_paths"], marks)
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        _fail(f"must be an integer in [0, 2^64), got {seed!r}", ["seed"], marks)
    x0 = cfg["x0"]
    cfg["x0"] = [_number(v, ["x0"], marks) for v in x0] if isinstance(x0, list) else _number(x0, ["x0"], marks)
    if cfg["coupling"] not in (DECOUPLED, COUPLED):
        _fail(f"must be {DECOUPLED!r} or {COUPLED!r}", ["coupling"], marks)
    if cfg["quadrature"] not in _cost.QUADRATURES:
        _fail(f"must be one of {_cost.QUADRATURES}", ["quadrature"], marks)
    if cfg["relaxation"] not in ("auto", "sample", "average"):
        _fail("must be auto, sample or average", ["relaxation"], marks)
    if isinstance(cfg["n_bootstrap"], bool) or not isinstance(cfg["n_bootstrap"], int) or cfg["n_bootstrap"] < 0:
        _fail("must be a nonnegative integer", ["n_bootstrap"], marks)
    cfg["sample_paths"] = _positive_int(cfg["sample_paths"], ["sample_paths"], marks)
    for key in ("strictify", "antithetic"):
        if not isinstance(cfg[key], bool):
            _fail("must be true or false", [key], marks)

    _check_keys(cfg["regression"], _REG_KEYS, ["regression"], marks)
    try:
        cfg["regression"] = RegressionSpec.from_dict(cfg["regression"]).to_dict()
    except FBSDEError as exc:
        _fail(str(exc), ["regression"], marks)

    if cfg["picard"] is not None:
        _check_keys(cfg["picard"], _PICARD_KEYS, ["picard"], marks)
        try:
            cfg["picard"] = PicardConfig(**cfg["picard"]).to_dict()
        except (FBSDEError, TypeError) as exc:
            _fail(str(exc), ["picard"], marks)
    if cfg["optimizer"] is not None:
        _check_keys(cfg["optimizer"], set(OptimizerConfig.__dataclass_fields__), ["optimizer"], marks)
        opt = {"n_paths": min(cfg["n_paths"], 2000), "seed": cfg["seed"], "quadrature": cfg["quadrature"]}
        opt.update(cfg["optimizer"])
        try:
            cfg["optimizer"] = OptimizerConfig(**opt).to_dict()
        except (FBSDEError, TypeError) as exc:
            _fail(str(exc), ["optimizer"], marks)

    diag = cfg["diagnostics"]
    if not isinstance(diag.get("enabled"), bool):
        _fail("must be true or false", ["diagnostics", "enabled"], marks)
    levels = diag.get("levels")
    if not isinstance(levels, list) or not levels:
        _fail("must be a nonempty list of step counts", ["diagnostics", "levels"], marks)
    diag["levels"] = [_positive_int(v, ["diagnostics", "levels"], marks) for v in levels]
    diag["n_paths"] = _positive_int(diag["n_paths"], ["diagnostics", "n_paths"], marks)
    diag["pairs"] = _positive_int(diag["pairs"], ["diagnostics", "pairs"], marks)

    ctrl = cfg["control"]
    if not isinstance(ctrl, dict) or ctrl.get("kind", "default") not in _CONTROL_KINDS:
        _fail(f"control.kind must be one of {sorted(_CONTROL_KINDS)}", ["control"], marks)
    if cfg.get("action_space") is not None:
        try:
            cfg["action_space"] = ActionSpace(cfg["action_space"]).atoms.tolist()
        except FBSDEError as exc:
            _fail(str(exc), ["action_space"], marks)

    if "coefficients" in cfg:
        co = cfg["coefficients"]
        _check_keys(co, _COEF_KEYS, ["coefficients"], marks)
        for dim in ("d", "m", "k"):
            co[dim] = _positive_int(co.get(dim, 1), ["coefficients", dim], marks)

    if cfg.get("builtin"):
        for key in ("T", "x0"):
            if key in cfg["params"] and key not in (raw.get("params") or {}):
                cfg["params"][key] = cfg[key]
    sc = Scenario(cfg, output_dir=out_dir, source=source)
    try:
        sc.build()
    except ScenarioError:
        raise
    except FBSDEError as exc:
        raise ScenarioError(f"{source}: {exc}", field=getattr(exc, "field", None)) from exc
    return sc


def scenario_from_dict(d, source="<dict>"):
    if not isinstance(d, dict):
        raise ScenarioError(f"{source}: a scenario must be a mapping")
    return _validate(copy.deepcopy(d), {}, source)


def load_scenario(path) -> Scenario:
    """Read a YAML or JSON scenario file; a bare builtin name loads that builtin's defaults."""
    p = Path(path)
    if not p.exists():
        if str(path) in BUILTINS:
            return scenario_from_dict({"builtin": str(path)}, source=f"builtin:{path}")
        raise ScenarioError(f"scenario file {str(path)!r} not found", field="path")
    raw, marks = parse_text(p.read_text(), str(p))
    return _validate(raw, marks, str(p))


def builtin_scenario(name, **overrides) -> Scenario:
    d = {"builtin": name}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return scenario_from_dict(d, source=f"builtin:{name}")


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _weights_csv(q, h):
    rows = [f"# scenario_hash: {h}", "cell,t_left,t_right,atom,atom_value,weight"]
    atoms = q.space.atoms
    b = q.grid.boundaries
    for i in range(q.grid.N):
        for j in range(q.space.m):
            val = ";".join(repr(float(a)) for a in atoms[j])
            rows.append(f"{i},{float(b[i])!r},{float(b[i + 1])!r},{j},{val},{float(q.weights[i, j])!r}")
    return "\n".join(rows) + "\n"


def default_output_root():
    return os.environ.get(OUT_ENV, "fbsde_runs")


def output_dir_for(sc: Scenario, out=None):
    if out is not None:
        return Path(out)
    if sc.output_dir is not None:
        return Path(sc.output_dir)
    return Path(default_output_root()) / f"{sc.config['name']}-{sc.hash}"


def execute(sc: Scenario):
    """Run the scenario in memory; returns a dict of result objects."""
    cfg = sc.config
    c, space, grid, control, oracle = sc.build()
    reg = RegressionSpec.from_dict(cfg["regression"])
    pc = PicardConfig(**cfg["picard"]) if cfg.get("picard") else PicardConfig()
    res = {"coefficients": c, "grid": grid}
    if cfg.get("optimizer") is not None:
        ocfg = OptimizerConfig.from_dict(cfg["optimizer"])
        q, trace = minimize_relaxed(c, grid, cfg["x0"], space, ocfg, reg, pc)
        res["trace"] = trace
        control = q
    res["control"] = control
    ens = solve(c, control, grid, cfg["x0"], cfg["n_paths"], cfg["seed"], reg, pc,
                relaxation=cfg["relaxation"], antithetic=cfg["antithetic"])
    res["ens"] = ens
    res["cost"] = evaluate_cost(c, ens, control, quadrature=cfg["quadrature"], n_bootstrap=cfg["n_bootstrap"],
                                reg=reg)
    if cfg["strictify"]:
        res["strict"] = strictify(c, control, ens, cfg["x0"], cfg["n_paths"], int(cfg["seed"]) + 1, reg, pc,
                                  quadrature=cfg["quadrature"])
    diag = cfg["diagnostics"]
    if diag["enabled"]:
        cv = _diagnostics.conditional_variation(ens, reg)
        bound = _diagnostics.cv_bound(c, ens, control)
        rem, floor = _diagnostics.orthogonal_remainder(ens, reg, control, c)
        res["cv"] = {"value": cv.value, "noise_floor": cv.noise_floor, "bound": bound,
                     "ok": cv.value <= bound + cv.noise_floor, "partitions": cv.per_partition,
                     "conditioning": cv.conditioning}
        res["remainder"] = {"value": rem, "noise_floor": floor}
        res["tightness"] = _diagnostics.meyer_zheng_table(
            diag["levels"], c, control, reg, min(diag["n_paths"], cfg["n_paths"]),
            cfg["seed"], cfg["x0"], pc, cfg["T"], cfg["relaxation"], diag["pairs"])
    if oracle is not None:
        res["oracle"] = oracle(res)
    return res


def run(sc: Scenario, out=None):
    """Execute and write artifacts; returns ``(exit_status, output_dir)``.

    Numeric artifacts depend only on the scenario and the package version;
    the wall-clock timestamp lives in ``run_info.json`` alone.
    """
    out_dir = output_dir_for(sc, out)
    h = sc.hash
    started = time.time()
    info = {"scenario_hash": h, "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
            "backend": _kernels.BACKEND, "python": sys.version.split()[0], "platform": platform.platform()}
    files = ["scenario.json"]
    try:
        _write_atomic(out_dir / "scenario.json", _json({"scenario_hash": h, "scenario": sc.config}))
        res = execute(sc)
        ens, rep = res["ens"], res["cost"].with_hash(h)
        _write_atomic(out_dir / "cost_report.json", _json(rep.to_dict()))
        files.append("cost_report.json")
        if "trace" in res:
            tr = res["trace"]
            _write_atomic(out_dir / "trace.json", _json({"scenario_hash": h, **tr.to_dict()}))
            _write_atomic(out_dir / "trace.csv", f"# scenario_hash: {h}\n" + tr.to_csv())
            files += ["trace.json", "trace.csv"]
        if "strict" in res:
            st = res["strict"]
            st.scenario_hash = h
            _write_atomic(out_dir / "strictification.json", _json(st.to_dict()))
            files.append("strictification.json")
        if "tightness" in res:
            tt = res["tightness"]
            tt.scenario_hash = h
            _write_atomic(out_dir / "tightness.csv", tt.to_csv())
            _write_atomic(out_dir / "tightness.json", _json(tt.to_dict()))
            files += ["tightness.csv", "tightness.json"]
        k = min(int(sc.config["sample_paths"]), ens.n_paths)
        _write_atomic(out_dir / "paths.csv", f"# scenario_hash: {h}\n" + ens.take(np.arange(k)).to_columnar())
        _write_atomic(out_dir / "weights.csv", _weights_csv(_controls.as_relaxed(res["control"]), h))
        files += ["paths.csv", "weights.csv"]
        summary = {
            "scenario_hash": h,
            "name": sc.config["name"],
            "status": "ok",
            "module_versions": MODULE_VERSIONS,
            "Y0": [float(v) for v in ens.Y[:, 0].mean(axis=0)],
            "J": rep.estimate,
            "J_std_error": rep.std_error,
            "control_hash": _controls.as_relaxed(res["control"]).digest(),
            "oracle": res.get("oracle", {}),
            "files": files + ["summary.json"],
        }
        if "picard_trace" in ens.meta:
            summary["picard_trace"] = list(ens.meta["picard_trace"])
            summary["picard_converged_at"] = ens.meta["converged_at"]
        if "trace" in res:
            summary["optimizer"] = {"J_initial": float(res["trace"].J[0]), "J_final": float(res["trace"].J[-1]),
                                    "accepted": len(res["trace"]), "evaluations": res["trace"].evaluations}
        if "strict" in res:
            st = res["strict"]
            summary["strictification"] = {"realization_gap": st.realization_gap, "cost_gap": st.cost_gap,
                                          "combined_se": st.combined_se}
        if "cv" in res:
            summary["conditional_variation"] = {k: v for k, v in res["cv"].items() if k != "partitions"}
            summary["orthogonal_remainder"] = res["remainder"]
            summary["tightness_all_bounded"] = res["tightness"].all_bounded
        _write_atomic(out_dir / "summary.json", _json(summary))
        status = 0
    except Exception as exc:  # every failure becomes a machine-readable record
        record = {
            "scenario_hash": h,
            "status": "failed",
            "error_type": type(exc).__name__,
            "message": str(exc),
            "details": {k: v for k, v in vars(exc).items() if isinstance(v, (int, float, str, type(None)))},
            "module_versions": MODULE_VERSIONS,
        }
        info["traceback"] = traceback.format_exc()
        _write_atomic(out_dir / "failure.json", _json(record))
        status = 1
    info["elapsed_s"] = time.time() - started
    _write_atomic(out_dir / "run_info.json", _json(info))
    return status, out_dir
