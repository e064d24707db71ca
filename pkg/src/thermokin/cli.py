"""Command-line orchestration: configuration ingestion, run execution, and
artifact persistence.

Four modes share one JSON configuration document:

* ``steady``   solve for the stationary state and dump the state fields;
* ``evolve``   solve for the stationary state, march the canonical
  admissible perturbation, and record the time series;
* ``gap``      estimate the coercivity constant of the linearized operator;
* ``validate`` run the randomized probe battery: kernel-row bound,
  tail-smallness and bilinear-continuity constants, determinant/image
  bounds of the small drift exponentials, and the spectral gap.

Artifacts land under ``output_dir``: ``summary.json`` (format version,
resolved configuration, results), ``series.csv`` for evolve runs, raw
little-endian float64 field dumps with JSON sidecars under ``fields/``,
and per-probe reports under ``probes/``.  Every artifact is a pure
function of the configuration document: no timestamps, no environment
echoes, floats rendered in shortest round-trip form.  The ``--threads``
override caps the compiled kernels' worker count only; every parallel
region writes disjoint output slots, so the worker count never reorders a
floating-point reduction and outputs are byte-identical at any setting.

Exit codes: 0 success; 2 unparseable or invalid configuration; 3 the
solver failed to converge; 4 a constraint or admissibility violation;
5 numeric blow-up during time stepping.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .collision import KernelSpec
from .dynamics import FlowConfig, decay_fit, evolve
from .grid import build_grid, maxwellian, moments5, weighted_sup_norm
from .linalg3 import det_bound_check, image_bound_check
from .linop import (LinearizedOperator, calk_smallness_probe,
                    gamma_bilinear_probe)
from .steady import SteadyOptions, steady_solve

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_CONSTRAINT = 4
EXIT_BLOWUP = 5

_CSV_HEADER = "t,mass,mom_x,mom_y,mom_z,energy,work,beta,sup_dev,l2_dev,a,c"

_MODES = ("steady", "evolve", "validate", "gap")

_DEFAULTS = {
    "alpha": 0.04,
    "A": [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    "gamma": 0.0,
    "grid": {"n_per_axis": 11, "v_max": 5.0},
    "angular": {"n_theta": 4, "n_phi": 6},
    "kernel": {"b0_form": "abs_cos", "b0_scale": 1.0, "fold": True},
    "weight_l": 0,
    "cutoff_M": None,
    "solver": {},
    "time": {"dt": 0.2, "t_end": 8.0, "beta_mode": "fixed_steady",
             "interpolation": "tricubic"},
    "output_dir": "thermokin-out",
    "seed": 1234,
}

# solver-group keys that collide with dedicated top-level settings
_RESERVED_SOLVER_KEYS = ("l", "M", "weight_exponent", "m_cut")


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Resolved run settings; one document drives every mode."""

    mode: str
    alpha: float
    a: np.ndarray
    gamma: float
    n_per_axis: int
    v_max: float
    n_theta: int
    n_phi: int
    b0_form: str
    b0_scale: float
    fold: bool
    weight_l: int
    cutoff_m: Optional[float]
    solver: dict
    dt: float
    t_end: float
    beta_mode: str
    interpolation: str
    output_dir: str
    seed: int

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        """Merge over the defaults, rejecting unknown keys at every level."""
        raw = dict(raw)
        mode = raw.pop("mode", None)
        if mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
        unknown = set(raw) - set(_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        doc = {}
        for key, default in _DEFAULTS.items():
            given = raw.get(key, default)
            if isinstance(default, dict) and key != "solver":
                given = dict(given)
                bad = set(given) - set(default)
                if bad:
                    raise ValueError(
                        f"unknown keys in {key!r} group: {sorted(bad)}")
                doc[key] = {**default, **given}
            else:
                doc[key] = given

        solver = dict(doc["solver"])
        reserved = [k for k in _RESERVED_SOLVER_KEYS if k in solver]
        if reserved:
            raise ValueError(
                f"solver keys {reserved} are owned by the top-level "
                "weight_l / cutoff_M settings")

        a = np.asarray(doc["A"], dtype=float)
        if a.shape != (3, 3) or not np.all(np.isfinite(a)):
            raise ValueError("A must be a finite 3x3 matrix")
        n = doc["grid"]["n_per_axis"]
        if int(n) != n or n < 3 or n % 2 == 0:
            raise ValueError("grid.n_per_axis must be an odd integer >= 3")
        v_max = float(doc["grid"]["v_max"])
        if not v_max > 0.0:
            raise ValueError("grid.v_max must be positive")
        weight_l = doc["weight_l"]
        if int(weight_l) != weight_l or weight_l < 0:
            raise ValueError("weight_l must be a non-negative integer")
        cutoff = doc["cutoff_M"]
        if cutoff is not None:
            cutoff = float(cutoff)
            if not cutoff > 0.0:
                raise ValueError("cutoff_M must be positive when given")
        seed = doc["seed"]
        if int(seed) != seed:
            raise ValueError("seed must be an integer")

        cfg = cls(
            mode=mode,
            alpha=float(doc["alpha"]),
            a=a,
            gamma=float(doc["gamma"]),
            n_per_axis=int(n),
            v_max=v_max,
            n_theta=int(doc["angular"]["n_theta"]),
            n_phi=int(doc["angular"]["n_phi"]),
            b0_form=str(doc["kernel"]["b0_form"]),
            b0_scale=float(doc["kernel"]["b0_scale"]),
            fold=bool(doc["kernel"]["fold"]),
            weight_l=int(weight_l),
            cutoff_m=cutoff,
            solver=solver,
            dt=float(doc["time"]["dt"]),
            t_end=float(doc["time"]["t_end"]),
            beta_mode=str(doc["time"]["beta_mode"]),
            interpolation=str(doc["time"]["interpolation"]),
            output_dir=str(doc["output_dir"]),
            seed=int(seed),
        )
        # eager validation so malformed settings exit on the config path
        cfg.kernel_spec()
        SteadyOptions.from_mapping(cfg.steady_config())
        if cfg.mode == "evolve":
            cfg.flow()
        if not cfg.alpha > 0.0:
            raise ValueError("alpha must be positive")
        return cfg

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(gamma=self.gamma, b0_form=self.b0_form,
                          b0_scale=self.b0_scale, n_theta=self.n_theta,
                          n_phi=self.n_phi, fold=self.fold)

    def steady_config(self) -> dict:
        out = dict(self.solver)
        out["l"] = float(self.weight_l)
        if self.cutoff_m is not None:
            out["M"] = self.cutoff_m
        return out

    def flow(self) -> FlowConfig:
        return FlowConfig(alpha=self.alpha, a=self.a, dt=self.dt,
                          t_end=self.t_end, l=self.weight_l,
                          beta_mode=self.beta_mode,
                          interpolation=self.interpolation)

    def as_document(self) -> dict:
        """Resolved configuration in the on-disk document shape."""
        return {
            "mode": self.mode,
            "alpha": self.alpha,
            "A": self.a.tolist(),
            "gamma": self.gamma,
            "grid": {"n_per_axis": self.n_per_axis, "v_max": self.v_max},
            "angular": {"n_theta": self.n_theta, "n_phi": self.n_phi},
            "kernel": {"b0_form": self.b0_form, "b0_scale": self.b0_scale,
                       "fold": self.fold},
            "weight_l": self.weight_l,
            "cutoff_M": self.cutoff_m,
            "solver": dict(self.solver),
            "time": {"dt": self.dt, "t_end": self.t_end,
                     "beta_mode": self.beta_mode,
                     "interpolation": self.interpolation},
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def apply_override(doc: dict, spec: str) -> None:
    """Apply one ``--set group.key=value`` override onto the raw document.

    Values parse as JSON when possible and fall back to bare strings, so
    ``--set time.dt=0.1`` and ``--set time.beta_mode=dynamic`` both work.
    """
    key, sep, text = spec.partition("=")
    if not sep or not key:
        raise ValueError(f"--set expects KEY=VALUE, got {spec!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    target = doc
    for part in parts[:-1]:
        nxt = target.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ValueError(f"cannot descend into non-group key {part!r}")
        target = nxt
    target[parts[-1]] = value


# -- artifact writers ----------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_field(directory: Path, name: str, arr: np.ndarray, grid,
                 description: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr, dtype="<f8")
    (directory / f"{name}.f64").write_bytes(data.tobytes())
    _write_json(directory / f"{name}.json", {
        "name": name,
        "dtype": "<f8",
        "count": int(data.size),
        "layout": "lexicographic in (v1, v2, v3)",
        "grid": {"n_per_axis": int(grid.n_per_axis),
                 "v_max": float(grid.v_max), "h": float(grid.h)},
        "description": description,
    })


def _write_series(path: Path, series) -> None:
    rows = [_CSV_HEADER]
    for k in range(series.t.size):
        rows.append(",".join(repr(float(x)) for x in (
            series.t[k], series.mass[k], series.momentum[k, 0],
            series.momentum[k, 1], series.momentum[k, 2], series.energy[k],
            series.deformation_work[k], series.beta_used[k],
            series.sup_dev[k], series.l2_dev[k], series.coef_a[k],
            series.coef_c[k])))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


# -- mode handlers -------------------------------------------------------------


def _build_operator(cfg: RunConfig):
    grid = build_grid(cfg.n_per_axis, cfg.v_max)
    return grid, LinearizedOperator(grid, cfg.kernel_spec())


def _steady_results(steady, op) -> dict:
    betas = steady.betas
    return {
        "beta": {"alpha": betas.alpha, "beta0": betas.beta0,
                 "beta1": betas.beta1, "beta": betas.beta},
        "iterations": int(steady.iterations),
        "eps_schedule": [float(e) for e in steady.eps_schedule],
        "contraction_ratios": [float(r) for r in steady.contraction_ratios],
        "conservation_defects": [float(d) for d in steady.conservation_defects],
        "residual": {k: float(v) for k, v in steady.residual.items()},
        "nu_max": float(np.max(op.nu)),
    }


def canonical_initial_state(grid, steady, alpha: float,
                            weight_l: float) -> np.ndarray:
    """Stationary state plus the canonical admissible energy-mode bump.

    The bump rides the energy carrier (|v|^2 - 3) mu, windowed smoothly to
    zero beyond 0.72 v_max so the tail stays positive, projected to exact
    zero mass (momentum vanishes by parity), and scaled to 90% of the
    alpha^2 deviation budget in the configured weighted sup norm.
    """
    mu = maxwellian(grid)
    r2 = np.einsum("ij,ij->i", grid.nodes, grid.nodes)
    window = 0.5 * (1.0 - np.tanh((np.sqrt(r2) - 0.72 * grid.v_max) / 0.4))
    shape = (r2 - 3.0) * mu * window
    shape -= moments5(grid, shape)[0] / moments5(grid, mu)[0] * mu
    amp = 0.9 * alpha ** 2 / weighted_sup_norm(grid, shape, weight_l)
    return steady.g_st + amp * shape


def _run_steady(cfg: RunConfig, out: Path) -> dict:
    grid, op = _build_operator(cfg)
    steady = steady_solve(cfg.alpha, cfg.a, config=cfg.steady_config(), op=op)
    fields = out / "fields"
    _write_field(fields, "g_st", steady.g_st, grid, "stationary state")
    _write_field(fields, "g1", steady.g1, grid,
                 "first-order deformation response")
    return {"steady": _steady_results(steady, op)}


def _run_evolve(cfg: RunConfig, out: Path) -> dict:
    grid, op = _build_operator(cfg)
    steady = steady_solve(cfg.alpha, cfg.a, config=cfg.steady_config(), op=op)
    g0 = canonical_initial_state(grid, steady, cfg.alpha, cfg.weight_l)
    series = evolve(g0, steady, cfg.flow(), op)
    _write_series(out / "series.csv", series)
    fields = out / "fields"
    _write_field(fields, "g_st", steady.g_st, grid, "stationary state")
    _write_field(fields, "g0", g0, grid, "initial state (canonical bump)")
    window = (0.25 * cfg.t_end, 0.9 * cfg.t_end)
    try:
        rate, r_squared = decay_fit(series, window)
        fit_doc = {"rate": float(rate), "r_squared": float(r_squared),
                   "window": [window[0], window[1]]}
    except ValueError:
        fit_doc = None
    return {
        "steady": _steady_results(steady, op),
        "evolve": {
            "steps": int(series.t.size - 1),
            "initial_sup_dev": float(series.sup_dev[0]),
            "final_sup_dev": float(series.sup_dev[-1]),
            "final_moments": {
                "mass": float(series.mass[-1]),
                "momentum": [float(x) for x in series.momentum[-1]],
                "energy": float(series.energy[-1]),
            },
            "decay_fit": fit_doc,
            "series": "series.csv",
        },
    }


def _run_gap(cfg: RunConfig, out: Path) -> dict:
    grid, op = _build_operator(cfg)
    gap = op.spectral_gap_estimate(seed=cfg.seed)
    return {"gap": {
        "spectral_gap": float(gap),
        "nu_min": float(np.min(op.nu)),
        "nu_max": float(np.max(op.nu)),
        "n_per_axis": int(grid.n_per_axis),
    }}


def _run_validate(cfg: RunConfig, out: Path) -> dict:
    grid, op = _build_operator(cfg)
    probes = out / "probes"

    bound = op.kernel_row_bound(float(cfg.weight_l))
    kernel_doc = {"weight_l": cfg.weight_l, "max": float(np.max(bound)),
                  "mean": float(np.mean(bound))}
    _write_json(probes / "kernel_row_bound.json", kernel_doc)

    exponents = (4.0, 6.0, 8.0)
    cutoffs = tuple(round(f * cfg.v_max, 6) for f in (0.2, 0.4, 0.6, 0.7))
    table = calk_smallness_probe(op, exponents, cutoffs, seed=cfg.seed)
    calk_doc = [{"l": l, "M": m, "ratio": float(r)}
                for (l, m), r in sorted(table.items())]
    _write_json(probes / "calk_smallness.json", calk_doc)

    gamma_const = float(gamma_bilinear_probe(op, seed=cfg.seed))
    _write_json(probes / "gamma_bilinear.json",
                {"continuity_constant": gamma_const})

    rng = np.random.default_rng(cfg.seed)
    det_ok = image_ok = 0
    det_margin = image_margin = np.inf
    n_instances = 500
    for _ in range(n_instances):
        m_bar = rng.uniform(-1.0, 1.0, size=(3, 3))
        norm1 = float(np.max(np.sum(np.abs(m_bar), axis=0)))
        alpha = rng.uniform(0.0, 0.3) / max(norm1, 1e-12)
        eta = rng.uniform(1e-4, 1.0 / 3.0)
        det_rec = det_bound_check(m_bar, alpha, eta)
        det_ok += det_rec["ok"]
        det_margin = min(det_margin, det_rec["lhs"] / det_rec["rhs"])
        v = rng.normal(size=3)
        radius = float(np.linalg.norm(v)) * rng.uniform(1.0, 2.0)
        img_rec = image_bound_check(m_bar, alpha, eta, v, radius)
        image_ok += img_rec["ok"]
        if img_rec["lhs"] > 0.0:
            image_margin = min(image_margin, img_rec["rhs"] / img_rec["lhs"])
    expm_doc = {
        "instances": n_instances,
        "det_ok": int(det_ok),
        "det_min_margin": float(det_margin),
        "image_ok": int(image_ok),
        "image_min_margin": float(image_margin),
    }
    _write_json(probes / "expm_bounds.json", expm_doc)

    gap = float(op.spectral_gap_estimate(seed=cfg.seed))
    _write_json(probes / "spectral_gap.json", {"spectral_gap": gap})

    return {"validate": {
        "kernel_row_bound": kernel_doc,
        "calk_smallness": calk_doc,
        "gamma_bilinear": gamma_const,
        "expm_bounds": expm_doc,
        "spectral_gap": gap,
    }}


_HANDLERS = {
    "steady": _run_steady,
    "evolve": _run_evolve,
    "gap": _run_gap,
    "validate": _run_validate,
}


def run(cfg: RunConfig) -> dict:
    """Execute the configured mode and persist summary.json; returns it."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = _HANDLERS[cfg.mode](cfg, out)
    summary = {
        "format_version": FORMAT_VERSION,
        "mode": cfg.mode,
        "config": cfg.as_document(),
        "results": results,
    }
    _write_json(out / "summary.json", summary)
    return summary


# -- entry point ---------------------------------------------------------------


def _cap_threads(n: int) -> None:
    try:
        import numba
    except ImportError:
        return
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermokin",
        description="Deterministic thermostated-kinetics solver runs.")
    parser.add_argument("mode", choices=_MODES)
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON configuration document")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted path)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap the compiled kernels' worker count")
    return parser


def _exit_code_for(exc: Exception) -> int:
    """Map a run-phase failure onto the exit-code contract.

    ValueError covers argument/gate rejections: admissibility gates name
    the rejected data or its deviation budget and count as constraint
    violations, anything else is a configuration the solver cannot accept.
    RuntimeError covers failures of the run itself: blow-up during time
    stepping, stalled or residual-limited iterations (non-convergence),
    and otherwise violated constraints (moments, positivity, conservation).
    """
    message = str(exc)
    if isinstance(exc, ValueError):
        if "rejected" in message or "deviation" in message:
            return EXIT_CONSTRAINT
        return EXIT_CONFIG
    if "blow-up" in message:
        return EXIT_BLOWUP
    if ("converge" in message or "contracting" in message
            or "residual" in message or "stalled" in message):
        return EXIT_NO_CONVERGENCE
    return EXIT_CONSTRAINT


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.config is not None:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise ValueError("config document must be a JSON object")
        else:
            raw = {}
        raw["mode"] = args.mode
        for spec in args.overrides:
            apply_override(raw, spec)
        if args.threads is not None and args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = RunConfig.from_mapping(raw)
    except (OSError, json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        print(f"thermokin: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        _cap_threads(args.threads)
    try:
        run(cfg)
    except (ValueError, RuntimeError) as exc:
        print(f"thermokin: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
