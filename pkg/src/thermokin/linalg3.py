"""Small dense matrix helpers: exponentials and bound checks for 3x3 drift matrices.

Everything here works on plain float64 numpy arrays.  The exponential uses
scaling-and-squaring with a fixed-order Taylor series, which is plenty for the
well-conditioned 3x3 drift matrices this package feeds it (norms well below 10).
"""

from __future__ import annotations

import math

import numpy as np

_TAYLOR_ORDER = 12
_SCALE_TARGET = 0.5


def expm(m: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring of a fixed Taylor series.

    The number of squarings is chosen from the 1-norm so the scaled matrix has
    norm <= 0.5; a degree-12 Taylor polynomial then gives ~1e-14 relative
    accuracy for the sizes used here.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expm expects a square matrix")
    norm1 = float(np.max(np.sum(np.abs(m), axis=0))) if m.size else 0.0
    n_sq = 0
    if norm1 > _SCALE_TARGET:
        n_sq = max(0, int(math.ceil(math.log2(norm1 / _SCALE_TARGET))))
    a = m / (2.0 ** n_sq)
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ a / k
        out = out + term
    for _ in range(n_sq):
        out = out @ out
    return out


def phi1(m: np.ndarray, terms: int = 24) -> np.ndarray:
    """phi1(M) = sum_k M^k/(k+1)!  =  M^{-1}(e^M - I) without the inversion."""
    m = np.asarray(m, dtype=np.float64)
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms + 1):
        term = term @ m / k
        out = out + term / (k + 1.0)
    return out


def invert3(m: np.ndarray) -> np.ndarray:
    """Inverse of a 3x3 matrix with an explicit conditioning guard."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("invert3 expects a 3x3 matrix")
    scale = float(np.max(np.abs(m)))
    det = float(np.linalg.det(m))
    if abs(det) <= 1e-14 * max(scale, 1e-300) ** 3:
        raise ValueError("matrix is numerically singular")
    return np.linalg.inv(m)


def det_bound_check(m_bar: np.ndarray, alpha: float, eta: float) -> dict:
    """Check the determinant lower bound for the scaled drift matrix.

    For M = alpha*m_bar with ||M|| small and 0 < eta <= 1/3 the quantity
    |det(M^{-1}(e^{eta M} - I))| = eta^3 |det(phi1(eta M))| must stay above
    eta^3/8.  Returns both sides and the verdict; raises on a violated
    precondition rather than on a violated bound.
    """
    m_bar = np.asarray(m_bar, dtype=np.float64)
    if m_bar.shape != (3, 3):
        raise ValueError("m_bar must be 3x3")
    if not (0.0 < eta <= 1.0 / 3.0 + 1e-15):
        raise ValueError("eta must lie in (0, 1/3]")
    m = alpha * m_bar
    if float(np.max(np.sum(np.abs(m), axis=0))) > 0.3 + 1e-12:
        raise ValueError("alpha*m_bar too large for the small-deformation bound")
    lhs = (eta ** 3) * abs(float(np.linalg.det(phi1(eta * m))))
    rhs = (eta ** 3) / 8.0
    return {"lhs": lhs, "rhs": rhs, "ok": bool(lhs >= rhs), "eta": eta, "alpha": alpha}


def image_bound_check(
    m_bar: np.ndarray,
    alpha: float,
    eta: float,
    v: np.ndarray,
    m_radius: float | None = None,
) -> dict:
    """Check |M^{-1}(e^{eta M} - I) v| <= eta * R * e^{3 C alpha eta} for |v| <= R.

    C = max|m_bar_ij| and M = alpha*m_bar.  When no radius R is given it
    defaults to |v| itself (the sharpest admissible choice).  eta = 0 is
    allowed and degenerates to 0 <= 0.
    """
    m_bar = np.asarray(m_bar, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m_bar.shape != (3, 3) or v.shape != (3,):
        raise ValueError("expects a 3x3 matrix and a 3-vector")
    if eta < 0.0:
        raise ValueError("eta must be >= 0")
    vnorm = float(np.linalg.norm(v))
    if m_radius is None:
        m_radius = vnorm
    elif vnorm > m_radius * (1.0 + 1e-12):
        raise ValueError("|v| exceeds the stated radius")
    c_m = float(np.max(np.abs(m_bar)))
    if eta == 0.0:
        return {"lhs": 0.0, "rhs": 0.0, "ok": True, "eta": 0.0}
    m = alpha * m_bar
    image = eta * (phi1(eta * m) @ v)
    lhs = float(np.linalg.norm(image))
    rhs = eta * float(m_radius) * math.exp(3.0 * c_m * alpha * eta)
    return {"lhs": lhs, "rhs": rhs, "ok": bool(lhs <= rhs + 1e-15), "eta": eta}
