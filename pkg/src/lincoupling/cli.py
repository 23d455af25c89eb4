"""Command-line driver: curve | product | perturb | verify | all.

Exit codes: 0 success, 1 a target or statistical test failed, 2 usage or
configuration error. Every run writes ``summary.json`` into the output
directory next to its CSV files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .coupling_curve import (
    CurveConstructionError,
    build_curve,
    build_quantile_grid,
    verify_curve,
    write_curve_csv,
    write_quantile_grid_csv,
)
from .marginal_models import DomainError, density_from_record
from .perturbation import (
    INTERPRETATIONS,
    InfeasibleSpecError,
    assemble_measure_description,
    build_rectangle_sequence,
)
from .product_density import ProductDensityModel, write_product_csv
from .sampling import ks_marginal_test, product_law_test, sample_base, sample_perturbed, write_reports

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MIN_VERIFY_SAMPLES = 1000

WINDOW_COLUMNS = ("z", "g0", "g1", "L0", "L1")
SUMMARY_COLUMNS = ("n", "a", "b", "delta", "epsilon", "nu", "Lmin", "Lmax")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    marginal1: dict = field(default_factory=lambda: {"family": "exponential", "params": [1.0]})
    marginal2: dict = field(default_factory=lambda: {"family": "exponential", "params": [1.0]})
    curve_method: str = "quantile"
    rects: int = 5
    a: list | float | None = None
    b: list | float | None = None
    delta: list | float | None = None
    epsilon: list | float | None = None
    nu: list | float | None = None
    magnitudes: list | None = None
    interpretation: str = "z"
    seed: int = 20240601
    output_dir: str = "out"
    z_min: float = 1e-3
    z_max: float = 1e3
    z_points: int = 601
    curve_points: int = 401
    grid_levels: int = 10
    window_resolution: int = 16
    samples: int = 100_000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for rec in (self.marginal1, self.marginal2):
            if not isinstance(rec, dict):
                raise ConfigError("marginals must be objects with a 'family' field")
            try:
                density_from_record(rec)
            except (ValueError, TypeError, KeyError) as exc:
                raise ConfigError(f"bad marginal {rec!r}: {exc}") from exc
        if self.curve_method not in ("quantile", "ode"):
            raise ConfigError("curve_method must be 'quantile' or 'ode'")
        if self.interpretation not in INTERPRETATIONS:
            raise ConfigError(f"interpretation must be one of {INTERPRETATIONS}")
        if int(self.rects) < 1:
            raise ConfigError("rects must be at least 1")
        if self.magnitudes is not None and len(self.magnitudes) != int(self.rects):
            raise ConfigError("magnitudes needs one entry per rectangle")
        if int(self.z_points) < 1 or not (0 < self.z_min < self.z_max):
            raise ConfigError("z-grid is empty: need z_points >= 1 and 0 < z_min < z_max")
        if int(self.curve_points) < 2:
            raise ConfigError("curve_points must be at least 2")
        if not 0 <= int(self.grid_levels) <= 20:
            raise ConfigError("grid_levels must lie in [0, 20]")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def magnitude_schedule(self) -> list[float]:
        if self.magnitudes is not None:
            return [float(m) for m in self.magnitudes]
        return [10.0 * n for n in range(1, int(self.rects) + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_json(text)


# pipeline pieces ------------------------------------------------------------


class _Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.f1 = density_from_record(cfg.marginal1)
        self.f2 = density_from_record(cfg.marginal2)
        self._product = None
        self._sequence = None
        self.summary: dict = {"config": cfg.to_dict(), "results": {}}

    @property
    def product(self) -> ProductDensityModel:
        if self._product is None:
            self._product = ProductDensityModel(build_curve(self.f1, self.f2, self.cfg.curve_method))
        return self._product

    @property
    def sequence(self):
        if self._sequence is None:
            cfg = self.cfg
            self._sequence = build_rectangle_sequence(
                self.product,
                int(cfg.rects),
                magnitudes=cfg.magnitude_schedule,
                interpretation=cfg.interpretation,
                a=cfg.a,
                b=cfg.b,
                delta=cfg.delta,
                epsilon=cfg.epsilon,
                nu=cfg.nu,
            )
        return self._sequence

    def say(self, msg: str) -> None:
        print(msg, flush=True)


def cmd_curve(run: _Run) -> int:
    cfg = run.cfg
    curve = run.product.curve
    lo, hi = float(run.f1.quantile(1e-6)), float(run.f1.isf(1e-6))
    xs = np.geomspace(lo, hi, int(cfg.curve_points))
    write_curve_csv(run.out / "curve.csv", curve, xs)
    grids = [build_quantile_grid(run.f1, run.f2, lvl) for lvl in range(1, int(cfg.grid_levels) + 1)]
    write_quantile_grid_csv(run.out / "quantile_grid.csv", grids)
    report = verify_curve(curve, run.f1, run.f2, xs).to_dict()
    (run.out / "curve_report.json").write_text(json.dumps(report, indent=2))
    run.summary["results"]["curve"] = report
    run.say(f"curve: {len(xs)} points, slope residual {report['max_slope_residual']:.3g}, "
            f"quantile residual {report['max_quantile_residual']:.3g}")
    return EXIT_OK


def cmd_product(run: _Run) -> int:
    cfg = run.cfg
    zs = np.geomspace(cfg.z_min, cfg.z_max, int(cfg.z_points))
    write_product_csv(run.out / "product.csv", run.product, zs)
    norm = run.product.normalization()
    run.summary["results"]["product"] = {"normalization": norm, "z_points": len(zs)}
    run.say(f"product: {len(zs)} points, normalization {norm:.12f}")
    return EXIT_OK


def _write_window(path: Path, result, resolution: int) -> None:
    pm = result.measure
    lo, hi = pm.spec.window
    n = max(int(math.ceil(resolution * (hi - lo) * pm.spec.nu / math.pi)) + 1, 201)
    zs = np.linspace(lo, hi, n)
    g0 = np.asarray(pm.product.density(zs))
    g1 = np.asarray(pm.product_density(zs))
    l0 = np.asarray(pm.product.lin(zs))
    l1 = np.asarray(pm.lin(zs))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WINDOW_COLUMNS)
        for row in zip(zs, g0, g1, l0, l1):
            w.writerow([repr(float(v)) for v in row])


def cmd_perturb(run: _Run) -> int:
    seq = run.sequence
    rows = seq.summary()
    with (run.out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for r in seq.rectangles:
        _write_window(run.out / f"window_{r.index}.csv", r, int(run.cfg.window_resolution))
    desc = assemble_measure_description(seq)
    (run.out / "measure.json").write_text(desc.to_json())
    run.summary["results"]["perturb"] = {
        "rectangles": [dict(row, target=r.target, met=r.met) for row, r in zip(rows, seq.rectangles)],
        "all_met": seq.all_met,
    }
    for r in seq.rectangles:
        flag = "met" if r.met else "UNMET"
        run.say(f"rect {r.index}: nu={r.spec.nu:.6g} L in [{r.extrema.lmin:.4g}, {r.extrema.lmax:.4g}] "
                f"target {r.target:g} {flag}")
    return EXIT_OK if seq.all_met else EXIT_FAIL


def cmd_verify(run: _Run) -> int:
    cfg = run.cfg
    n = int(cfg.samples)
    if n < MIN_VERIFY_SAMPLES:
        raise ConfigError(f"verify needs at least {MIN_VERIFY_SAMPLES} samples, got {n}")
    product = run.product
    base = sample_base(product.curve, run.f1, n, int(cfg.seed))
    reports = [
        ks_marginal_test(base, "x1", run.f1),
        ks_marginal_test(base, "x2", run.f2),
        product_law_test(base, product),
    ]
    measure = assemble_measure_description(run.sequence).build()
    pert = sample_perturbed(measure, n, int(cfg.seed))
    reports += [
        ks_marginal_test(pert, "x1", run.f1),
        ks_marginal_test(pert, "x2", run.f2),
        product_law_test(pert, measure),
    ]
    write_reports(run.out / "verify_report.txt", reports)
    write_reports(run.out / "verify_report.json", reports)
    failed = [r for r in reports if not r.passed]
    run.summary["results"]["verify"] = {"reports": [r.to_dict() for r in reports], "passed": not failed}
    for r in reports:
        run.say(r.to_text())
    for r in failed:
        label = r.ks.label if hasattr(r, "ks") else r.label
        print(f"verify: failed test: {label}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {"curve": cmd_curve, "product": cmd_product, "perturb": cmd_perturb, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lincoupling", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=[*COMMANDS, "all"])
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--rects", type=int)
    parser.add_argument("--interpretation", choices=INTERPRETATIONS)
    parser.add_argument("--nu-override", type=float)
    parser.add_argument("--epsilon-override", type=float)
    parser.add_argument("--samples", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    overrides = {
        "seed": args.seed,
        "output_dir": args.out,
        "rects": args.rects,
        "interpretation": args.interpretation,
        "nu": args.nu_override,
        "epsilon": args.epsilon_override,
        "samples": args.samples,
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if args.rects is not None and data.get("magnitudes") is not None and len(data["magnitudes"]) != args.rects:
        data["magnitudes"] = None
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        run = _Run(cfg)
        names = list(COMMANDS) if args.command == "all" else [args.command]
        code = EXIT_OK
        for name in names:
            code = max(code, COMMANDS[name](run))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleSpecError as exc:
        print(f"infeasible perturbation: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CurveConstructionError, DomainError) as exc:
        print(f"construction failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    run.summary["command"] = args.command
    run.summary["exit_code"] = code
    (run.out / "summary.json").write_text(json.dumps(run.summary, indent=2, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
