"""Uniform node-centered velocity grid on [-v_max, v_max]^3 and field helpers.

Nodes are stored in lexicographic (i, j, k) order: the flat index of the node
(axis[i], axis[j], axis[k]) is i*n^2 + j*n + k.  Quadrature is the product
trapezoidal rule, i.e. the full cell weight h^3 halved once per axis that sits
on the boundary.  For fields with Gaussian-type decay this rule converges
super-algebraically, so the grid spacing is what controls moment accuracy.

Fields are plain 1-D float64 arrays of length n^3 in node order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass(frozen=True)
class VelocityGrid:
    n_per_axis: int
    v_max: float
    h: float
    axis: np.ndarray          # (n,) axis nodes, -v_max .. v_max
    nodes: np.ndarray         # (n^3, 3) node coordinates, lex-ijk order
    weights: np.ndarray       # (n^3,) trapezoidal product weights
    w1d: np.ndarray           # (n,) 1-D trapezoidal weights

    @property
    def size(self) -> int:
        return self.n_per_axis ** 3

    def require_field(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape != (self.size,) or f.dtype != np.float64:
            raise ValueError(
                f"field shape/dtype mismatch: expected ({self.size},) float64, "
                f"got {f.shape} {f.dtype}"
            )
        return f


def build_grid(n_per_axis: int, v_max: float) -> VelocityGrid:
    """Build the node-centered grid.  n_per_axis must be odd and >= 3 so the
    origin is a node and the node set is closed under v -> -v."""
    if int(n_per_axis) != n_per_axis or n_per_axis < 3:
        raise ValueError("n_per_axis must be an integer >= 3")
    n_per_axis = int(n_per_axis)
    if n_per_axis % 2 == 0:
        raise ValueError("n_per_axis must be odd (origin must be a node)")
    if not (v_max > 0.0):
        raise ValueError("v_max must be positive")
    v_max = float(v_max)
    h = 2.0 * v_max / (n_per_axis - 1)
    # Exact integer multiples of h: axis[i] and axis[n-1-i] are bitwise
    # negations of each other, so even fields evaluate identically at
    # mirrored nodes and odd moments cancel exactly.
    axis = (np.arange(n_per_axis) - (n_per_axis - 1) // 2) * h
    w1d = np.full(n_per_axis, h)
    w1d[0] *= 0.5
    w1d[-1] *= 0.5
    vx, vy, vz = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([vx.ravel(), vy.ravel(), vz.ravel()], axis=1)
    wx, wy, wz = np.meshgrid(w1d, w1d, w1d, indexing="ij")
    weights = (wx * wy * wz).ravel()
    return VelocityGrid(
        n_per_axis=n_per_axis,
        v_max=v_max,
        h=h,
        axis=axis,
        nodes=np.ascontiguousarray(nodes),
        weights=np.ascontiguousarray(weights),
        w1d=w1d,
    )


def maxwellian(grid: VelocityGrid) -> np.ndarray:
    """Standard Maxwellian with unit mass, zero mean and unit temperature."""
    v2 = np.sum(grid.nodes ** 2, axis=1)
    return (2.0 * np.pi) ** (-1.5) * np.exp(-0.5 * v2)


def weight_w(grid: VelocityGrid, l: float) -> np.ndarray:
    """Polynomial weight (1 + |v|^2)^l, l >= 0."""
    if l < 0:
        raise ValueError("weight order l must be >= 0")
    v2 = np.sum(grid.nodes ** 2, axis=1)
    return (1.0 + v2) ** l


def _reduce_sym(vals: np.ndarray) -> float:
    """Deterministic quadrature reduction, symmetrized under v -> -v.

    The flat node order reverses exactly under negation of the grid, so
    vals + vals[::-1] cancels antisymmetric integrands elementwise; odd
    moments of even fields therefore come out as exact zeros.  numpy's
    pairwise summation keeps the result bit-stable for a fixed length.
    """
    return 0.5 * float(np.add.reduce(vals + vals[::-1]))


def integrate_moment(grid: VelocityGrid, f: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Quadrature integral of f (optionally times a pointwise weight)."""
    f = grid.require_field(f)
    vals = grid.weights * f
    if weight is not None:
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != f.shape:
            raise ValueError("weight shape mismatch")
        vals = vals * weight
    return _reduce_sym(vals)


def moments5(grid: VelocityGrid, f: np.ndarray) -> np.ndarray:
    """[mass, momentum_x, momentum_y, momentum_z, energy] of a field,
    where energy is the raw second moment integral of |v|^2 f."""
    f = grid.require_field(f)
    base = grid.weights * f
    v = grid.nodes
    out = np.empty(5)
    out[0] = _reduce_sym(base)
    out[1] = _reduce_sym(base * v[:, 0])
    out[2] = _reduce_sym(base * v[:, 1])
    out[3] = _reduce_sym(base * v[:, 2])
    out[4] = _reduce_sym(base * np.sum(v ** 2, axis=1))
    return out


def deformation_work(grid: VelocityGrid, f: np.ndarray, a_mat: np.ndarray) -> float:
    """integral of v . (A v) f dv."""
    a_mat = np.asarray(a_mat, dtype=np.float64)
    if a_mat.shape != (3, 3):
        raise ValueError("A must be 3x3")
    v = grid.nodes
    quad = np.einsum("ni,ij,nj->n", v, a_mat, v)
    return integrate_moment(grid, f, weight=quad)


def weighted_sup_norm(grid: VelocityGrid, f: np.ndarray, l: float) -> float:
    """sup-norm of w_l * f over the grid."""
    f = grid.require_field(f)
    return float(np.max(np.abs(weight_w(grid, l) * f)))


def nu_weighted_l2_norm(grid: VelocityGrid, f: np.ndarray, nu: np.ndarray) -> float:
    """L2 norm weighted by a (strictly positive) collision frequency field."""
    f = grid.require_field(f)
    nu = grid.require_field(np.asarray(nu, dtype=np.float64))
    if np.any(nu <= 0.0):
        raise ValueError("nu must be strictly positive")
    return math.sqrt(max(_reduce_sym(grid.weights * nu * f * f), 0.0))


# --- field serialization ----------------------------------------------------
#
# A field dump is the raw little-endian float64 node values next to a JSON
# sidecar describing the grid, so external tools can reconstruct it without
# importing this package.

def dump_field(grid: VelocityGrid, f: np.ndarray, path: str | Path) -> None:
    f = grid.require_field(f)
    path = Path(path)
    f.astype("<f8").tofile(path)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "n_per_axis": grid.n_per_axis,
        "v_max": grid.v_max,
        "ordering": "lex-ijk",
        "dtype": "<f8",
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )


def load_field(path: str | Path) -> tuple[VelocityGrid, np.ndarray]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("ordering") != "lex-ijk":
        raise ValueError("unsupported field ordering in sidecar")
    grid = build_grid(int(sidecar["n_per_axis"]), float(sidecar["v_max"]))
    f = np.fromfile(path, dtype="<f8")
    return grid, grid.require_field(f.astype(np.float64))
