"""Batch experiment runner: ``geoxray run <config>``, ``geoxray list-examples``, ``geoxray validate <config>``.

Configs are INI files.  Section ``[experiment]`` names the manifold, grid,
order and the ordered operation list; ``[manifold]``, ``[family]``,
``[trace]``, ``[tolerances]``, ``[baseline]`` and ``[assert]`` refine it.
Every artifact goes to the output directory together with ``manifest.json``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import json
import operator
import sys
import time
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import injectivity_probe, random_solenoidal, reconstruct, solenoidal_basis, stability_constant
from .decomposition import TOL_CG, decompose
from .family import completeness_check, cosphere_grid, fan_family, torus_family, wall_family
from .fields import Grid, SymmetricTensorField
from .formats import census_rows, path_rows, write_csv, write_gxrt1, write_triplets
from .geodesics import PhasePoint, conjugate_points, trace, unit_covector
from .manifold import BUILTIN_MANIFOLDS, boundary_frame, builtin_chart
from .symbols import TOL_ELL, ellipticity_scan
from .transform import assemble

OPERATIONS = ("trace", "family", "transform", "decompose", "symbol-scan", "probe", "stability", "reconstruct")
FAMILIES = {"fan": fan_family, "wall": wall_family, "torus": torus_family}

# Defaults overridable in [tolerances]; the README table mirrors this dict.
DEFAULT_TOLERANCES = {
    "h_ode": 1e-3,
    "tol_cg": TOL_CG,
    "tol_ell": TOL_ELL,
    "tol_rec": 1e-8,
    "max_iter": 500,
    "noise": 0.0,
    "w_collar": 0.15,
    "trials": 200,
}

_CMP = {">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le,
        "==": operator.eq, "!=": operator.ne}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment config (exit status 2)."""


class AssertionFailure(RuntimeError):
    """A declared invariant failed (exit status 1)."""


# ----------------------------------------------------------------------
def _number(text: str, what: str):
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        raise ConfigError(f"{what}: cannot parse value {text!r}") from None


def _eval_expr(text: str, names: dict) -> float:
    """Arithmetic over numbers and names (``+ - * /``, parentheses, unary minus)."""
    ops = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}

    def ev(node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ConfigError(f"unknown name {node.id!r} in expression {text!r}")
            return float(names[node.id])
        if isinstance(node, ast.BinOp) and type(node.op) in ops:
            return ops[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        raise ConfigError(f"unsupported expression {text!r}")

    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError:
        raise ConfigError(f"cannot parse expression {text!r}") from None
    return ev(tree.body)


@dataclass
class Assertion:
    name: str
    metric: str
    op: str
    rhs: str

    def check(self, metrics: dict, baseline: dict) -> tuple[bool, str]:
        """Evaluate; the right side may use metric names and ``baseline_<key>`` values."""
        if self.metric not in metrics:
            return False, f"{self.name}: metric {self.metric!r} was not produced"
        lhs = float(metrics[self.metric])
        names = {k: v for k, v in metrics.items() if v is not None}
        names.update({f"baseline_{k}": v for k, v in baseline.items()})
        rhs = _eval_expr(self.rhs, names)
        ok = bool(_CMP[self.op](lhs, rhs))
        return ok, f"{self.name}: {self.metric} = {lhs:.6g} {self.op} {rhs:.6g}"


@dataclass
class ExperimentConfig:
    """Parsed experiment description."""

    name: str
    manifold: str
    manifold_params: dict
    grid: int
    order: int
    layout: str
    operations: list
    family: dict
    trace: dict
    tolerances: dict
    seed: int = 0
    output: Optional[Path] = None
    baseline: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def parse_config(text: str, name: str = "config") -> ExperimentConfig:
    """Parse and validate config text; raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    if not cp.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    ex = cp["experiment"]
    key = ex.get("manifold")
    if key is None:
        raise ConfigError("[experiment] needs a manifold key")
    if key not in BUILTIN_MANIFOLDS:
        raise ConfigError(f"unknown manifold key {key!r}; known: {', '.join(sorted(BUILTIN_MANIFOLDS))}")
    ops = [o.strip() for o in ex.get("operations", "").split(",") if o.strip()]
    bad = [o for o in ops if o not in OPERATIONS]
    if bad:
        raise ConfigError(f"unknown operation(s) {bad}; choose from {', '.join(OPERATIONS)}")
    grid = int(_number(ex.get("grid", "16"), "grid"))
    if grid <= 0:
        raise ConfigError(f"grid resolution must be positive, got {grid}")
    order = int(_number(ex.get("order", "2"), "order"))
    if order not in (0, 1, 2):
        raise ConfigError(f"order must be 0, 1 or 2, got {order}")
    layout = ex.get("layout", "spline")
    if layout not in ("cubic", "spline", "spline2"):
        raise ConfigError(f"unknown layout {layout!r}")
    seed = int(_number(ex.get("seed", "0"), "seed"))

    def section(nm):
        return {k: _number(v, f"[{nm}] {k}") for k, v in cp[nm].items()} if cp.has_section(nm) else {}

    fam = {}
    if cp.has_section("family"):
        fam = {k: (v if k == "kind" else _number(v, f"[family] {k}")) for k, v in cp["family"].items()}
        kind = fam.get("kind", "fan")
        if kind not in FAMILIES:
            raise ConfigError(f"unknown family kind {kind!r}; choose from {', '.join(FAMILIES)}")
    tol = dict(DEFAULT_TOLERANCES)
    for k, v in section("tolerances").items():
        if k not in DEFAULT_TOLERANCES:
            raise ConfigError(f"unknown tolerance {k!r}")
        tol[k] = v
    asserts = []
    if cp.has_section("assert"):
        for nm, expr in cp["assert"].items():
            parts = expr.split()
            if len(parts) < 3 or parts[1] not in _CMP:
                raise ConfigError(f"[assert] {nm}: expected '<metric> <op> <expression>', got {expr!r}")
            asserts.append(Assertion(nm, parts[0], parts[1], " ".join(parts[2:])))
    needs_family = {"family", "transform", "symbol-scan", "probe", "stability", "reconstruct"}
    if needs_family & set(ops) and not fam:
        raise ConfigError("operations need a [family] section")
    out = ex.get("output")
    return ExperimentConfig(
        name=ex.get("name", name), manifold=key, manifold_params=section("manifold"), grid=grid,
        order=order, layout=layout, operations=ops, family=fam, trace=section("trace"),
        tolerances=tol, seed=seed, output=Path(out) if out else None, baseline=section("baseline"),
        assertions=asserts, text=text)


def bundled_configs() -> dict:
    root = resources.files("geoxray") / "configs"
    return {p.name[:-4]: p for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".ini")}


def load_config(ref: str) -> ExperimentConfig:
    """Read a config from a path or a bundled config name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
        return parse_config(text, path.stem)
    bundled = bundled_configs()
    if ref in bundled:
        return parse_config(bundled[ref].read_text(encoding="utf-8"), ref)
    raise ConfigError(f"config {ref!r} is neither a readable file nor a bundled config "
                      f"({', '.join(bundled)})")


# ----------------------------------------------------------------------
class Runner:
    """Executes the operation list, collecting metrics and artifacts."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.rng = np.random.default_rng(cfg.seed)
        self.metrics: dict = {}
        self.artifacts: list = []
        self.chart = builtin_chart(cfg.manifold, **cfg.manifold_params)
        self.grid = Grid.over(self.chart, cfg.grid)
        self._family = None
        self._A = None
        self._basis = None

    def _write(self, name: str, writer, *args):
        writer(self.out / name, *args)
        self.artifacts.append(name)

    def _text(self, name: str, text: str):
        (self.out / name).write_text(text + "\n", encoding="utf-8")
        self.artifacts.append(name)

    @property
    def family(self):
        if self._family is None:
            spec = dict(self.cfg.family)
            kind = spec.pop("kind", "fan")
            spec.setdefault("h_ode", self.cfg.tolerances["h_ode"])
            self._family = FAMILIES[kind](self.chart, **spec)
        return self._family

    @property
    def A(self):
        if self._A is None:
            self._A = assemble(self.family, self.grid, self.cfg.order, layout=self.cfg.layout)
        return self._A

    @property
    def basis(self):
        if self._basis is None:
            self._basis = solenoidal_basis(self.chart, self.grid, self.cfg.order, layout=self.cfg.layout)
        return self._basis

    # operations ------------------------------------------------------
    def op_trace(self):
        t = self.cfg.trace
        x = np.asarray(t.get("x", [0.0] * self.chart.dim), dtype=float)
        v = np.asarray(t.get("v", [1.0] + [0.0] * (self.chart.dim - 1)), dtype=float)
        T = float(t.get("t", 1.0))
        path = trace(self.chart, PhasePoint(x, unit_covector(self.chart, x, v)), (0.0, T),
                     h_ode=self.cfg.tolerances["h_ode"])
        self._write("path.csv", write_csv, *path_rows(path))
        conj = conjugate_points(path)
        self.metrics["energy_drift"] = float(path.energy_drift)
        self.metrics["conjugate_count"] = len(conj)
        self.metrics["first_conjugate"] = float(conj[0]) if conj else float("inf")
        self.metrics["length_in_M"] = float(path.length_in_M)

    def op_family(self):
        fam = self.family
        self._write("census.csv", write_csv, *census_rows(fam))
        self.metrics["rays"] = fam.n_rays
        self.metrics["rays_in_support"] = int(sum(np.sum(fc.alpha > 0) for fc in fam.charts))
        self.metrics["max_length_in_M"] = float(max(
            fc.length_in_M[fc.alpha > 0].max(initial=0.0) for fc in fam.charts))
        if self.chart.dim == 2:
            x, xi = cosphere_grid(self.chart, 8, 12)
            rep = completeness_check(fam, self.chart, x, xi, dist_tol=2.5 * float(self.grid.spacing.max()))
            self.metrics["coverage"] = rep.fraction
            self._text("coverage.txt", rep.summary())
        self._text("family.json", json.dumps([fc.manifest() for fc in fam.charts], indent=2))

    def op_transform(self):
        A = self.A
        self._write("transform.gxtri", write_triplets, A.matrix, self.cfg.order, self.family.identity())
        f = random_solenoidal(A.space, self.rng)[:, 0]
        self._write("field.gxrt1", write_gxrt1, A.space.to_field(f))
        self._write("rays.csv", write_csv, *A.apply(f).rows())
        self.metrics["nnz"] = int(A.matrix.nnz)
        self.metrics["ray_norm"] = A.apply(f).norm()

    def op_decompose(self):
        if self.cfg.order != 2:
            raise ConfigError("decompose needs order = 2")
        space = self.basis.space
        coeffs = random_solenoidal(space, self.rng)[:, 0]
        f = space.to_field(coeffs)
        dec = decompose(f, self.chart, method="direct")
        self._write("f.gxrt1", write_gxrt1, f)
        self._write("f_s.gxrt1", write_gxrt1, dec.f_s)
        self._text("decomposition.txt", dec.summary())
        for k, v in dec.residual.items():
            self.metrics[k] = v

    def op_symbol_scan(self):
        x, xi = cosphere_grid(self.chart, 6, 12)
        scan = ellipticity_scan(self.chart, self.family, x, xi, self.cfg.order,
                                dist_tol=2.5 * float(self.grid.spacing.max()), tol=self.cfg.tolerances["tol_ell"])
        self._write("symbol_scan.csv", write_csv, *scan.rows())
        self._text("symbol_scan.txt", scan.summary())
        self.metrics["fraction_elliptic"] = scan.fraction_elliptic
        self.metrics["symbol_min"] = scan.global_min
        self.metrics["agreement"] = scan.agreement

    def op_probe(self):
        rep = injectivity_probe(self.A, self.basis)
        self._text("injectivity.txt", rep.summary())
        self._write("spectrum.csv", write_csv, *rep.rows())
        self.metrics["sigma_min"] = rep.sigma_min
        self.metrics["sigma_max"] = rep.sigma_max
        self.metrics["separation"] = rep.separation

    def op_stability(self):
        frame = boundary_frame(self.chart, self.cfg.tolerances["w_collar"]) if self.cfg.order == 2 else None
        rep = stability_constant(self.A, self.chart, frame, trials=int(self.cfg.tolerances["trials"]),
                                 basis=self.basis, rng=self.rng)
        self._text("stability.txt", rep.summary())
        self._write("stability_history.csv", write_csv, ["trial", "max_ratio"],
                    [[k, v] for k, v in enumerate(rep.history)])
        self.metrics["C"] = rep.C
        self.metrics["max_trial_ratio"] = max(rep.history) if rep.history else 0.0

    def op_reconstruct(self):
        A = self.A
        truth = random_solenoidal(self.basis, self.rng)[:, 0]
        tol = self.cfg.tolerances
        rec = reconstruct(A, A.matrix @ truth, max_iter=int(tol["max_iter"]), noise=tol["noise"],
                          truth=truth, tol=tol["tol_rec"], rng=self.rng)
        self._write("truth.gxrt1", write_gxrt1, A.space.to_field(truth))
        self._write("reconstruction.gxrt1", write_gxrt1, rec.field)
        self._write("cg_residuals.csv", write_csv, ["iteration", "relative_residual"],
                    [[k + 1, r] for k, r in enumerate(rec.residuals)])
        self._text("reconstruction.txt", rec.summary())
        self.metrics["rel_error"] = rec.rel_error
        self.metrics["cg_iterations"] = rec.iterations


def run(cfg: ExperimentConfig, out: Optional[Path] = None, stream=None) -> int:
    """Execute a parsed config; returns the exit status (0 ok, 1 failed assertion, 3 runtime error)."""
    stream = stream or sys.stdout
    out = Path(out or cfg.output or Path("geoxray_out") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"name": cfg.name, "config_sha256": cfg.digest, "version": __version__, "seed": cfg.seed,
                "operations": cfg.operations, "steps": [], "metrics": {}, "assertions": [],
                "status": "running", "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    status = 3
    runner = None
    try:
        runner = Runner(cfg, out)
        for op in cfg.operations:
            t0 = time.perf_counter()
            getattr(runner, "op_" + op.replace("-", "_"))()
            dt = time.perf_counter() - t0
            manifest["steps"].append({"operation": op, "seconds": round(dt, 6)})
            print(f"[{op}] done in {dt:.2f} s", file=stream)
        failed = []
        for a in cfg.assertions:
            ok, msg = a.check(runner.metrics, cfg.baseline)
            manifest["assertions"].append({"name": a.name, "passed": ok, "detail": msg})
            print(("PASS " if ok else "FAIL ") + msg, file=stream)
            if not ok:
                failed.append(msg)
        if failed:
            manifest["status"] = "assertion failed: " + "; ".join(failed)
            status = 1
        else:
            manifest["status"] = "ok"
            status = 0
    except ConfigError as exc:
        manifest["status"] = f"config error: {exc}"
        print(f"config error: {exc}", file=sys.stderr)
        status = 2
    except Exception as exc:  # noqa: BLE001  (recorded in the manifest, then reported)
        manifest["status"] = f"error: {type(exc).__name__}: {exc}"
        manifest["traceback"] = traceback.format_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 3
    finally:
        if runner is not None:
            manifest["metrics"] = {k: _jsonable(v) for k, v in sorted(runner.metrics.items())}
            manifest["artifacts"] = sorted(runner.artifacts)
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return status


def _jsonable(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else str(v)


def list_examples(stream=None) -> None:
    stream = stream or sys.stdout
    print("built-in manifolds:", file=stream)
    for key, (_, dim, ref) in BUILTIN_MANIFOLDS.items():
        print(f"  {key:<26} n={dim}  {ref}", file=stream)
    print("bundled configs:", file=stream)
    for name, path in bundled_configs().items():
        first = path.read_text(encoding="utf-8").splitlines()[0].lstrip("#; ").strip()
        print(f"  {name:<26} {first}", file=stream)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="geoxray", description="Geodesic X-ray transform experiments.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run a config (path or bundled name)")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", type=Path, default=None, help="output directory")
    sub.add_parser("list-examples", help="list built-in manifolds and bundled configs")
    p_val = sub.add_parser("validate", help="parse a config without running it")
    p_val.add_argument("config")
    args = ap.parse_args(argv)
    if args.cmd == "list-examples":
        list_examples()
        return 0
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.cmd == "run" and args.output is not None:
            args.output.mkdir(parents=True, exist_ok=True)
            (args.output / "manifest.json").write_text(json.dumps(
                {"config": args.config, "version": __version__, "steps": [],
                 "status": f"config error: {exc}"}, indent=2) + "\n", encoding="utf-8")
        return 2
    if args.cmd == "validate":
        print(f"{cfg.name}: ok ({cfg.manifold}, grid {cfg.grid}, operations {', '.join(cfg.operations)})")
        return 0
    return run(cfg, args.output)


if __name__ == "__main__":
    sys.exit(main())
