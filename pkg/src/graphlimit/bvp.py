"""Limiting boundary-value problem on the star graph.

On every edge ``(1/2) M^{-1} (M abar v')' = fbar`` with bounded ``v`` at the
exterior vertex, ``v`` continuous at the root, the gluing balance

    Vol(E) fbar(O) + (1/2) sum_k p_k v_k'(0-) = 0

and ``v(identify(x_O)) = 0``.  The sign follows ``L u = f`` for the
Neumann problem, whose probabilistic representation is
``u(x) = -int E_x f(X_t) dt + int E_{x_O} f(X_t) dt``.

The explicit solver integrates the flux ``F = M abar v'`` outward from the
exterior vertex (where it vanishes) and then ``v`` inward from the root.
Both integrals are taken in ``s = sqrt(h - m_k)``, in which all integrands
are smooth.  :func:`solve_bvp_fd` is an independent finite-volume solve
with the gluing balance imposed as a matrix row.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .graph import GraphPoint, edge_cumulative

__all__ = ["GraphSolution", "CompatibilityError", "solve_bvp", "solve_bvp_fd", "evaluate",
           "ode_residual", "SOLUTION_SCHEMA"]

SOLUTION_SCHEMA = "graphlimit.graph_solution/1"
MA_FLOOR = 1e-14


class CompatibilityError(ValueError):
    """The forcing does not have zero mean, so no bounded solution exists."""


@dataclass
class GraphSolution:
    """Grid values ``v(k, h_i)`` and fluxes ``(M abar v')(h_i)`` per edge plus ``v(O)``."""

    m: np.ndarray
    h: list
    v: list
    flux: list
    v_O: float
    gluing_residual: float = float("nan")
    compatibility_residual: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._splines = {}

    @property
    def edge_count(self):
        return len(self.m)

    def spline(self, k):
        if k not in self._splines:
            s = np.sqrt(np.clip(self.h[k - 1] - self.m[k - 1], 0.0, None))
            self._splines[k] = CubicSpline(s, self.v[k - 1])
        return self._splines[k]

    def shifted(self, c):
        return GraphSolution(self.m, self.h, [v + c for v in self.v], self.flux, self.v_O + c,
                             self.gluing_residual, self.compatibility_residual, dict(self.meta))

    def rows(self):
        out = [(0, 0.0, self.v_O, float("nan"))]
        for k in range(1, self.edge_count + 1):
            out.extend((k, float(h), float(v), float(f))
                       for h, v, f in zip(self.h[k - 1], self.v[k - 1], self.flux[k - 1]))
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["k", "h", "v", "flux"])
        for k, h, v, f in self.rows():
            w.writerow([k, repr(h), repr(v), "" if np.isnan(f) else repr(f)])
        return buf.getvalue()

    def to_json(self):
        doc = {
            "schema": SOLUTION_SCHEMA,
            "m": [float(x) for x in self.m],
            "v_O": self.v_O,
            "gluing_residual": self.gluing_residual,
            "compatibility_residual": self.compatibility_residual,
            "edges": [{"k": k + 1, "h": self.h[k].tolist(), "v": self.v[k].tolist(),
                       "flux": self.flux[k].tolist()} for k in range(self.edge_count)],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != SOLUTION_SCHEMA:
            raise ValueError(f"unsupported schema {doc.get('schema')!r}")
        e = sorted(doc["edges"], key=lambda d: d["k"])
        return cls(np.array(doc["m"]), [np.array(d["h"]) for d in e], [np.array(d["v"]) for d in e],
                   [np.array(d["flux"]) for d in e], doc["v_O"], doc["gluing_residual"],
                   doc["compatibility_residual"], doc.get("meta", {}))


def evaluate(sol, y):
    """``v(y)``: cubic interpolation in ``s`` on the edge, exact at the grid nodes."""
    if y.is_root:
        return float(sol.v_O)
    k = y.edge
    if not 1 <= k <= sol.edge_count:
        raise ValueError(f"no edge {k}")
    m = sol.m[k - 1]
    if not m <= y.h <= 0:
        raise ValueError(f"h={y.h} outside [{m}, 0]")
    return float(sol.spline(k)(np.sqrt(y.h - m)))


def _scale(coeffs):
    tot = coeffs.vol_E * abs(coeffs.fbar_O)
    for k in range(1, coeffs.edge_count + 1):
        tot += abs(edge_cumulative(coeffs.h[k - 1], coeffs.m[k - 1],
                                   np.abs(coeffs.fbar[k - 1]) * coeffs.M[k - 1])[-1])
    return max(tot, 1.0)


def _limit_at_min(s, y, order=3):
    c = np.polyfit(s[1:order + 2], y[1:order + 2], order)
    return float(np.polyval(c, 0.0))


def _gluing(coeffs, dv0):
    return float(coeffs.vol_E * coeffs.fbar_O + 0.5 * sum(p * d for p, d in zip(coeffs.p, dv0)))


def solve_bvp(coeffs, x_O_point=None, tol=1e-6):
    """Explicit-integration solution; ``x_O_point`` defaults to the root.

    Raises :class:`CompatibilityError` when the forcing has nonzero mean
    (relative to the size of the forcing) beyond ``tol``.
    """
    x_O_point = GraphPoint.root() if x_O_point is None else x_O_point
    scale = _scale(coeffs)
    compat = coeffs.compatibility_residual()
    if abs(compat) > tol * scale:
        raise CompatibilityError(
            f"Vol(E) fbar(O) + sum int fbar M dh = {compat:.3e} (tolerance {tol * scale:.1e}); "
            "the forcing must have zero mean over G")
    hs, vs, fluxes, dv0 = [], [], [], []
    for k in range(1, coeffs.edge_count + 1):
        h, m = coeffs.h[k - 1], float(coeffs.m[k - 1])
        s = np.sqrt(np.clip(h - m, 0.0, None))
        Ma = coeffs.flux_coefficient(k)
        if np.any(Ma[1:] < MA_FLOOR):
            i = 1 + int(np.argmin(Ma[1:]))
            raise ValueError(f"M abar below {MA_FLOOR} at h={h[i]:.6g} on edge {k}")
        F = edge_cumulative(h, m, 2 * coeffs.fbar[k - 1] * coeffs.M[k - 1])
        q = np.empty_like(F)
        q[1:] = F[1:] / Ma[1:]
        q[0] = _limit_at_min(s, q)  # removable singularity: both vanish like s^2
        g = 2 * s * q  # dv/ds
        V = CubicSpline(s, g).antiderivative()(s)
        hs.append(np.array(h))
        vs.append(V - V[-1])
        fluxes.append(F)
        dv0.append(q[-1])
    sol = GraphSolution(np.asarray(coeffs.m, float), hs, vs, fluxes, 0.0, _gluing(coeffs, dv0), compat,
                        {"method": "explicit", "n": len(hs[0]) - 1})
    return sol.shifted(-evaluate(sol, x_O_point))


def solve_bvp_fd(coeffs, x_O_point=None, n=512):
    """Finite-volume oracle on a uniform grid in ``s`` with the gluing row at the root.

    Unknowns are the edge nodes ``s_j = j ds`` (``j < n``) and the root value;
    face coefficients ``(M abar)/(2 s)`` and cell sources
    ``int 4 s fbar M ds`` (Simpson per cell) come from the tabulated data.
    The singular system is solved in the least-squares sense with the root
    value pinned, then renormalized.
    """
    x_O_point = GraphPoint.root() if x_O_point is None else x_O_point
    K = coeffs.edge_count
    N = 1 + K * n
    A = np.zeros((N, N))
    b = np.zeros(N)
    b[0] = 2 * coeffs.vol_E * coeffs.fbar_O
    grids = []
    for k in range(1, K + 1):
        m = float(coeffs.m[k - 1])
        S = np.linspace(0.0, np.sqrt(-m), n + 1)
        ds = S[1] - S[0]
        Sf = 0.5 * (S[1:] + S[:-1])
        B = coeffs.interpolate(k, "Mabar", m + Sf ** 2) / (2 * Sf)

        def src(s, k=k, m=m):
            hh = m + s ** 2
            return 4 * s * coeffs.interpolate(k, "fbar", hh) * coeffs.interpolate(k, "M", hh)

        lo = np.r_[0.0, Sf]
        hi = np.r_[Sf, S[-1]]
        cell = (hi - lo) / 6 * (src(lo) + 4 * src(0.5 * (lo + hi)) + src(hi))
        idx = 1 + (k - 1) * n + np.arange(n)
        nb = np.r_[idx, 0]  # node n of the edge is the root
        for j in range(n):
            r = idx[j]
            if j > 0:
                A[r, nb[j - 1]] += B[j - 1] / ds
                A[r, r] -= B[j - 1] / ds
            A[r, nb[j + 1]] += B[j] / ds
            A[r, r] -= B[j] / ds
            b[r] = cell[j]
        A[0, idx[-1]] += B[-1] / ds
        A[0, 0] -= B[-1] / ds
        b[0] += cell[n]
        grids.append((S, idx, B, ds, cell))
    x = np.linalg.lstsq(A[:, 1:], b, rcond=None)[0]
    v = np.r_[0.0, x]
    hs, vs, fluxes, dv0 = [], [], [], []
    for k, (S, idx, B, ds, cell) in enumerate(grids, start=1):
        m = float(coeffs.m[k - 1])
        ve = np.r_[v[idx], v[0]]
        Ff = B * np.diff(ve) / ds
        F = np.interp(S, np.r_[0.0, 0.5 * (S[1:] + S[:-1]), S[-1]], np.r_[0.0, Ff, Ff[-1] + cell[-1]])
        hs.append(np.minimum(m + S ** 2, 0.0))
        vs.append(ve)
        fluxes.append(F)
        dv0.append(F[-1] / coeffs.p[k - 1])
    sol = GraphSolution(np.asarray(coeffs.m, float), hs, vs, fluxes, 0.0, _gluing(coeffs, dv0),
                        coeffs.compatibility_residual(), {"method": "finite-volume", "n": n})
    return sol.shifted(-evaluate(sol, x_O_point))


def ode_residual(sol, coeffs, k=1, margin=0.05):
    """``max |L_k v - fbar|`` by centred second differences on a uniform-h solution grid.

    Nodes closer than ``margin`` (relative to ``|m_k|``) to either end are skipped.
    """
    h = sol.h[k - 1]
    v = sol.v[k - 1]
    dh = np.diff(h)
    if not np.allclose(dh, dh[0]):
        raise ValueError("ode_residual needs a uniform h grid")
    dh = dh[0]
    m = float(coeffs.m[k - 1])
    mid = 0.5 * (h[1:] + h[:-1])
    Ma = coeffs.interpolate(k, "Mabar", mid)
    flux = Ma * np.diff(v) / dh
    Lv = 0.5 * np.diff(flux) / dh / coeffs.interpolate(k, "M", h[1:-1])
    keep = (h[1:-1] >= m - margin * m) & (h[1:-1] <= margin * m)
    return float(np.max(np.abs(Lv - coeffs.interpolate(k, "fbar", h[1:-1]))[keep]))
