"""Figure construction against the solver's documented artifact schemas.

Loaders validate the exact contracts the solver publishes (CSV header,
summary format version, field sidecar metadata) and raise FigureError on
any mismatch; optional enrichments -- the decay-fit overlay, individual
probe reports -- degrade to omission when absent.  The figure builders
return live matplotlib objects so tests can inspect the drawn data instead
of decoding pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

FORMAT_VERSION = 1
KINDS = ("decay", "moments", "slice", "probes")

SERIES_HEADER = "t,mass,mom_x,mom_y,mom_z,energy,work,beta,sup_dev,l2_dev,a,c"
SERIES_COLUMNS = tuple(SERIES_HEADER.split(","))


class FigureError(ValueError):
    """An input failed the documented artifact schema."""


@dataclass(frozen=True)
class PlotSpec:
    """One figure request: artifact directory, kind, destination image.

    log_y None picks the kind's natural axis (logarithmic for decay,
    linear elsewhere); an explicit flag overrides it.
    """

    kind: str
    input_dir: Path
    output: Path
    log_y: Optional[bool] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FigureError(f"figure kind must be one of {KINDS}, "
                              f"got {self.kind!r}")
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "output", Path(self.output))


# -- schema loaders ------------------------------------------------------------


def load_series(path: Path) -> dict:
    """Parse series.csv into named float columns, validating the header."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FigureError(f"cannot read series: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != SERIES_HEADER:
        raise FigureError(f"series header mismatch in {path}")
    if len(lines) < 2:
        raise FigureError(f"series in {path} has no rows")
    try:
        table = np.array([[float(x) for x in row.split(",")]
                          for row in lines[1:]])
    except ValueError as exc:
        raise FigureError(f"series row failed to parse: {exc}") from exc
    if table.ndim != 2 or table.shape[1] != len(SERIES_COLUMNS):
        raise FigureError(f"series in {path} is not rectangular")
    return {name: table[:, k] for k, name in enumerate(SERIES_COLUMNS)}


def load_summary(path: Path) -> Optional[dict]:
    """Parse summary.json; None when absent, FigureError when malformed."""
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FigureError(f"cannot parse summary: {exc}") from exc
    if not isinstance(doc, dict):
        raise FigureError("summary must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FigureError(
            f"summary format_version {doc.get('format_version')!r} is not "
            f"the supported {FORMAT_VERSION}")
    return doc


def load_field(directory: Path, name: str) -> tuple[np.ndarray, dict]:
    """Read one raw field dump and its sidecar; returns (cube, grid doc)."""
    sidecar_path = directory / f"{name}.json"
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FigureError(f"cannot parse field sidecar: {exc}") from exc
    grid = sidecar.get("grid", {})
    n = grid.get("n_per_axis")
    if (sidecar.get("dtype") != "<f8" or not isinstance(n, int)
            or sidecar.get("count") != n ** 3):
        raise FigureError(f"field sidecar {sidecar_path} violates the schema")
    try:
        raw = (directory / f"{name}.f64").read_bytes()
    except OSError as exc:
        raise FigureError(f"cannot read field {name}: {exc}") from exc
    data = np.frombuffer(raw, dtype="<f8")
    if data.size != n ** 3:
        raise FigureError(
            f"field {name}.f64 holds {data.size} values, expected {n ** 3}")
    return data.reshape(n, n, n), grid


def load_probes(directory: Path) -> dict:
    """Read whichever probe reports exist; error only when none do."""
    names = ("kernel_row_bound", "calk_smallness", "gamma_bilinear",
             "expm_bounds", "spectral_gap")
    out = {}
    for name in names:
        path = directory / f"{name}.json"
        if not path.exists():
            out[name] = None
            continue
        try:
            out[name] = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FigureError(f"cannot parse probe {name}: {exc}") from exc
    if all(v is None for v in out.values()):
        raise FigureError(f"no probe reports under {directory}")
    return out


# -- figure builders -----------------------------------------------------------


def decay_figure(series: dict, summary: Optional[dict],
                 log_y: Optional[bool]):
    """Deviation history with the summary's fitted exponential overlaid.

    The summary stores the fitted rate and window but no intercept; the
    overlay completes it by least squares on the plotted points inside the
    window (the slope is taken as given, nothing is refitted).
    """
    t, sup = series["t"], series["sup_dev"]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(t, sup, marker="o", markersize=2.5, linewidth=1.0,
            color="tab:blue", label="deviation sup norm")

    fit = None
    if summary is not None:
        results = summary.get("results", {})
        fit = (results.get("evolve") or {}).get("decay_fit")
    if fit is not None and np.isfinite(fit.get("rate", math.nan)):
        rate = float(fit["rate"])
        window = fit.get("window") or (float(t[0]), float(t[-1]))
        inside = (t >= window[0]) & (t <= window[1]) & (sup > 0.0)
        if np.any(inside):
            intercept = float(np.exp(np.mean(
                np.log(sup[inside]) - rate * t[inside])))
            tw = np.linspace(window[0], window[1], 64)
            label = f"fitted rate {rate:.4g}"
            r2 = fit.get("r_squared")
            if r2 is not None:
                label += f" (r$^2$ = {r2:.4f})"
            ax.plot(tw, intercept * np.exp(rate * tw), "--",
                    color="tab:red", linewidth=1.4, label=label)

    if log_y is None or log_y:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("weighted sup deviation")
    ax.legend(loc="best")
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    return fig


def moments_figure(series: dict, log_y: Optional[bool]):
    """Conserved-moment drifts and thermostat history, four panels."""
    t = series["t"]
    fig, axes = plt.subplots(2, 2, figsize=(9.0, 6.2), sharex=True)

    ax = axes[0, 0]
    ax.plot(t, series["mass"] - series["mass"][0], color="tab:blue")
    ax.set_ylabel("mass drift")

    ax = axes[0, 1]
    for name, color in (("mom_x", "tab:blue"), ("mom_y", "tab:orange"),
                        ("mom_z", "tab:green")):
        ax.plot(t, series[name], color=color, label=name)
    ax.set_ylabel("momentum")
    ax.legend(loc="best", fontsize=8)

    ax = axes[1, 0]
    ax.plot(t, series["energy"], color="tab:blue")
    ax.set_ylabel("energy")
    ax.set_xlabel("t")

    ax = axes[1, 1]
    ax.plot(t, series["beta"], color="tab:blue", label="thermostat")
    ax.plot(t, series["work"], color="tab:orange", linestyle="--",
            label="deformation work")
    ax.set_ylabel("thermostat / work")
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)

    if log_y:
        for ax in axes.flat:
            ax.set_yscale("log")
    for ax in axes.flat:
        ax.grid(True, alpha=0.25)
    fig.tight_layout()
    return fig


def slice_figure(cube: np.ndarray, grid: dict, log_y: Optional[bool]):
    """Mid-plane slice of the stationary state minus the unit Maxwellian.

    The Maxwellian is the closed-form display reference exp(-|v|^2/2) /
    (2 pi)^{3/2} on the sidecar's grid; at zero deformation the panel is
    identically zero.  Field layout is lexicographic in (v1, v2, v3), so
    the mid-plane v3 = 0 is the last-axis middle index.
    """
    n = int(grid["n_per_axis"])
    v_max = float(grid["v_max"])
    axis = np.linspace(-v_max, v_max, n)
    mid = n // 2
    v1, v2 = np.meshgrid(axis, axis, indexing="ij")
    mu = (2.0 * math.pi) ** -1.5 * np.exp(-0.5 * (v1 ** 2 + v2 ** 2))
    dev = cube[:, :, mid] - mu

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    cap = max(float(np.max(np.abs(dev))), 1e-300)
    image = ax.imshow(dev.T, origin="lower", cmap="RdBu_r",
                      vmin=-cap, vmax=cap,
                      extent=(-v_max, v_max, -v_max, v_max))
    fig.colorbar(image, ax=ax, label="G_st - Maxwellian")
    ax.set_xlabel("v1")
    ax.set_ylabel("v2")
    ax.set_title("mid-plane v3 = 0")
    fig.tight_layout()
    return fig


def probes_figure(probes: dict, log_y: Optional[bool]):
    """Tail-smallness ratios per (weight, cutoff) plus scalar constants."""
    fig, ax = plt.subplots(figsize=(6.8, 4.6))
    calk = probes.get("calk_smallness")
    if calk:
        weights = sorted({entry["l"] for entry in calk})
        markers = ("o", "s", "^", "D", "v", "P")
        for k, weight in enumerate(weights):
            pts = sorted((e["M"], e["ratio"]) for e in calk
                         if e["l"] == weight)
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker=markers[k % len(markers)], linewidth=1.0,
                    label=f"weight exponent {weight:g}")
        ax.set_xlabel("cutoff M")
        ax.set_ylabel("remainder smallness ratio")
        ax.legend(loc="best", fontsize=8)
        if log_y is None or log_y:
            ax.set_yscale("log")
    else:
        ax.set_axis_off()

    notes = []
    gap = probes.get("spectral_gap")
    if gap is not None:
        notes.append(f"spectral gap {gap['spectral_gap']:.4g}")
    bound = probes.get("kernel_row_bound")
    if bound is not None:
        notes.append(f"kernel row bound max {bound['max']:.4g}")
    bilinear = probes.get("gamma_bilinear")
    if bilinear is not None:
        notes.append(
            f"bilinear continuity {bilinear['continuity_constant']:.4g}")
    expm = probes.get("expm_bounds")
    if expm is not None:
        notes.append(f"det/image bounds {expm['det_ok']}+"
                     f"{expm['image_ok']} / {2 * expm['instances']} ok")
    if notes:
        ax.text(0.02, 0.02, "\n".join(notes), transform=ax.transAxes,
                fontsize=8, verticalalignment="bottom",
                bbox={"boxstyle": "round", "facecolor": "white",
                      "alpha": 0.8})
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    return fig


# -- entry ----------------------------------------------------------------------


def build(spec: PlotSpec):
    """Load the artifacts a kind needs and return its live figure."""
    root = spec.input_dir
    if spec.kind == "decay":
        series = load_series(root / "series.csv")
        summary = load_summary(root / "summary.json")
        return decay_figure(series, summary, spec.log_y)
    if spec.kind == "moments":
        return moments_figure(load_series(root / "series.csv"), spec.log_y)
    if spec.kind == "slice":
        cube, grid = load_field(root / "fields", "g_st")
        return slice_figure(cube, grid, spec.log_y)
    probes = load_probes(root / "probes")
    return probes_figure(probes, spec.log_y)


def render(spec: PlotSpec) -> Path:
    """Render one figure to disk and return the written path."""
    fig = build(spec)
    try:
        spec.output.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(spec.output, dpi=150, metadata={"Software": "plots"})
    finally:
        plt.close(fig)
    return spec.output
