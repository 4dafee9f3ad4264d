"""Finite-volume Markov chain for the limiting diffusion on the star graph.

Each edge ``[m_k, 0]`` is cut into ``n`` uniform cells; the root is a single
cell whose volume is ``Vol(E)``.  Cells ``i`` and ``j`` exchange the face
flux ``F_ij``, and the rate is ``q_ij = F_ij / vol_i``.  Since ``F`` is
symmetric, ``vol_i q_ij = vol_j q_ji`` and the stationary law is the
normalized volume vector.

Face fluxes:

* between neighbouring edge cells, ``(1/2) (M abar)(h_face) / dh``;
* between the last cell of edge ``k`` and the root, ``(1/2) p_k / (dh/2)``,
  because the cell centre sits half a cell away from ``h = 0``;
* no flux at ``h = m_k`` (the coefficient ``M abar`` vanishes there).

Applied to a smooth function this gives ``(1/2) M^{-1} (M abar v')'`` in
the edge interiors and ``-(2 Vol(E))^{-1} sum_k p_k v_k'(0-)`` at the root,
i.e. the gluing balance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .graph import GraphHistogram, GraphPoint

__all__ = ["GeneratorMatrix", "build_generator", "marginal_at", "stationary", "simulate_ctmc",
           "GENERATOR_SCHEMA"]

GENERATOR_SCHEMA = "graphlimit.generator/1"


@dataclass
class GeneratorMatrix:
    """Sparse generator ``Q`` on the cells ``[O, edge 1 cells..., edge 2 cells..., ...]``."""

    Q: sp.csr_matrix
    volumes: np.ndarray
    cell_edge: np.ndarray  # 0 for the root
    cell_h: np.ndarray  # cell centres (0 for the root)
    minima: tuple
    n_cells: int  # per edge
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.Q.shape[0]

    def dh(self, k):
        return -self.minima[k - 1] / self.n_cells

    def edge_slice(self, k):
        start = 1 + (k - 1) * self.n_cells
        return slice(start, start + self.n_cells)

    def cell_of(self, y):
        """Index of the cell containing a graph point (``Edge(k, 0)`` is the root)."""
        if y.is_root:
            return 0
        k = y.edge
        if not 1 <= k <= len(self.minima):
            raise ValueError(f"no edge {k}")
        m = self.minima[k - 1]
        if not m <= y.h <= 0:
            raise ValueError(f"h={y.h} outside [{m}, 0]")
        i = min(int((y.h - m) / self.dh(k)), self.n_cells - 1)
        return self.edge_slice(k).start + i

    def point_mass(self, y):
        p = np.zeros(self.size)
        p[self.cell_of(y)] = 1.0
        return p

    def row_sums(self):
        return np.asarray(self.Q.sum(axis=1)).ravel()

    def detailed_balance_residual(self):
        F = sp.diags(self.volumes) @ self.Q
        F = F - sp.diags(F.diagonal())
        d = (F - F.T).tocoo()
        return float(np.max(np.abs(d.data))) if d.nnz else 0.0

    def stationary_volume(self):
        return self.volumes / self.volumes.sum()

    def apply(self, values):
        """``(Q v)_i`` for a function given by its cell values."""
        return self.Q @ np.asarray(values, dtype=float)

    def sample_function(self, fn_edge, value_O):
        """Cell values of a function on the graph; ``fn_edge(k, h)`` on edges."""
        v = np.empty(self.size)
        v[0] = value_O
        for k in range(1, len(self.minima) + 1):
            sl = self.edge_slice(k)
            v[sl] = fn_edge(k, self.cell_h[sl])
        return v

    def histogram(self, p, n_bins=32):
        """Aggregate a cell law into the binned :class:`GraphHistogram`.

        Cell mass is spread uniformly over the cell when a cell straddles
        bin edges.
        """
        p = np.asarray(p, dtype=float)
        bins = GraphHistogram.edge_bins(self.minima, n_bins)
        mass = []
        for k, b in enumerate(bins, start=1):
            sl = self.edge_slice(k)
            dh = self.dh(k)
            lo = self.cell_h[sl] - dh / 2
            hi = lo + dh
            overlap = np.clip(np.minimum(hi[:, None], b[None, 1:]) - np.maximum(lo[:, None], b[None, :-1]),
                              0.0, None) / dh
            mass.append(p[sl] @ overlap)
        return GraphHistogram(float(p[0]), bins, mass)

    def to_json(self):
        coo = self.Q.tocoo()
        doc = {
            "schema": GENERATOR_SCHEMA,
            "n_cells_per_edge": self.n_cells,
            "minima": list(self.minima),
            "cells": [{"index": i, "edge": int(e), "h": float(h), "volume": float(v)}
                      for i, (e, h, v) in enumerate(zip(self.cell_edge, self.cell_h, self.volumes))],
            "rates": [[int(i), int(j), float(q)] for i, j, q in zip(coo.row, coo.col, coo.data)],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1)


def build_generator(coeffs, n_cells=256):
    """Finite-volume generator for the averaged coefficients ``coeffs``."""
    if n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    if not coeffs.vol_E > 0:
        raise ValueError(f"root volume must be positive, got {coeffs.vol_E}")
    K = coeffs.edge_count
    size = 1 + K * n_cells
    vol = np.empty(size)
    edge = np.zeros(size, np.int64)
    hc = np.zeros(size)
    vol[0] = coeffs.vol_E
    rows, cols, flux = [], [], []
    for k in range(1, K + 1):
        m = float(coeffs.m[k - 1])
        nodes = np.linspace(m, 0.0, n_cells + 1)
        dh = -m / n_cells
        centres = 0.5 * (nodes[1:] + nodes[:-1])
        M = coeffs.interpolate(k, "M", centres)
        Ma = coeffs.interpolate(k, "Mabar", nodes[1:-1])
        p = float(coeffs.p[k - 1])
        if np.any(M <= 0) or np.any(Ma <= 0) or p <= 0:
            raise ValueError(f"non-positive coefficient on edge {k}")
        start = 1 + (k - 1) * n_cells
        idx = np.arange(start, start + n_cells)
        vol[idx] = M * dh
        edge[idx] = k
        hc[idx] = centres
        F = 0.5 * Ma / dh
        rows += [idx[:-1], idx[1:], [idx[-1]], [0]]
        cols += [idx[1:], idx[:-1], [0], [idx[-1]]]
        fo = p / dh  # (1/2) p over half a cell
        flux += [F, F, [fo], [fo]]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    flux = np.concatenate(flux)
    Q = sp.coo_matrix((flux / vol[rows], (rows, cols)), shape=(size, size)).tocsr()
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    Q = Q.tocsr()
    Q.sort_indices()
    return GeneratorMatrix(Q, vol, edge, hc, tuple(float(v) for v in coeffs.m), n_cells,
                           {"n_cells": n_cells})


def _initial(gen, initial):
    if isinstance(initial, GraphPoint):
        return gen.point_mass(initial)
    p = np.asarray(initial, dtype=float)
    if p.shape != (gen.size,):
        raise ValueError("initial law has the wrong size")
    return p


def marginal_at(gen, initial, t, chunk=500.0, tail=1e-16):
    """Law of the chain at time ``t`` by scaled uniformization.

    ``[0, t]`` is split into pieces with ``Lambda * tau <= chunk`` so the
    Poisson weights never underflow; each piece sums the series until the
    remaining Poisson mass is below ``tail`` and is then rescaled to the
    initial mass.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    p = _initial(gen, initial).copy()
    if t == 0:
        return p
    lam = float(np.max(-gen.Q.diagonal()))
    if lam == 0:
        return p
    PT = (sp.identity(gen.size, format="csr") + gen.Q / lam).T.tocsr()
    pieces = max(1, math.ceil(lam * t / chunk))
    return _uniformize(PT.indptr.astype(np.int64), PT.indices.astype(np.int64), PT.data.astype(float),
                       p, lam * t / pieces, pieces, tail)


@njit(cache=True)
def _uniformize(indptr, indices, data, p, mu, pieces, tail):
    n = p.shape[0]
    term = np.empty(n)
    nxt = np.empty(n)
    acc = np.empty(n)
    kmax = int(10 * mu + 100)
    mass = 0.0
    for i in range(n):
        mass += p[i]
    for _ in range(pieces):
        w = math.exp(-mu)
        for i in range(n):
            term[i] = p[i]
            acc[i] = w * p[i]
        k = 0
        # past the mode the remaining Poisson mass is below w (k+1)/(k+1-mu)
        while k < kmax and not (k + 1 > mu and w * (k + 1) / (k + 1 - mu) < tail):
            k += 1
            for i in range(n):
                s = 0.0
                for q in range(indptr[i], indptr[i + 1]):
                    s += data[q] * term[indices[q]]
                nxt[i] = s
            term, nxt = nxt, term
            w *= mu / k
            for i in range(n):
                acc[i] += w * term[i]
        # remove the truncated tail and rounding drift
        total = 0.0
        for i in range(n):
            total += acc[i]
        for i in range(n):
            p[i] = acc[i] * (mass / total)
    return p


def stationary(gen):
    """Stationary law from the sparse linear system (one equation replaced by normalization)."""
    A = gen.Q.T.tolil()
    A[0, :] = np.ones(gen.size)
    b = np.zeros(gen.size)
    b[0] = 1.0
    from scipy.sparse.linalg import spsolve

    return spsolve(A.tocsr(), b)


@njit(cache=True)
def _jump_paths(indptr, indices, rates, start, T, rec_times, gen):
    n = start.shape[0]
    R = rec_times.shape[0]
    out = np.empty((n, R), np.int64)
    occ0 = np.zeros(n)
    jumps = np.zeros(n, np.int64)
    for p in range(n):
        s = start[p]
        t = 0.0
        j = 0
        while True:
            total = 0.0
            for q in range(indptr[s], indptr[s + 1]):
                if indices[q] != s:
                    total += rates[q]
            hold = np.inf if total <= 0 else gen.exponential() / total
            t_next = t + hold
            while j < R and rec_times[j] < t_next:
                out[p, j] = s
                j += 1
            if s == 0:
                occ0[p] += min(t_next, T) - t
            if t_next >= T:
                break
            u = gen.random() * total
            acc = 0.0
            nxt = s
            for q in range(indptr[s], indptr[s + 1]):
                if indices[q] != s:
                    acc += rates[q]
                    nxt = indices[q]
                    if u < acc:
                        break
            s = nxt
            t = t_next
            jumps[p] += 1
        while j < R:
            out[p, j] = s
            j += 1
    return out, occ0, jumps


@dataclass
class CTMCPaths:
    states: np.ndarray  # (n_paths, R) cell indices at record times
    times: np.ndarray
    root_occupation: np.ndarray  # fraction of [0, T] at the root, per path
    jumps: np.ndarray


def simulate_ctmc(gen, initial, T, n_paths, seed, record_times=None):
    """Exact jump-chain simulation with exponential holding times.

    ``initial`` is a :class:`GraphPoint` or a cell law to sample from.
    """
    if T <= 0 or n_paths < 1:
        raise ValueError("T must be positive and n_paths >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if isinstance(initial, GraphPoint):
        start = np.full(n_paths, gen.cell_of(initial), np.int64)
    else:
        start = rng.choice(gen.size, size=n_paths, p=_initial(gen, initial)).astype(np.int64)
    rec = np.asarray([T] if record_times is None else sorted(record_times), dtype=float)
    if np.any(rec < 0) or np.any(rec > T):
        raise ValueError("record times must lie in [0, T]")
    Q = gen.Q
    states, occ, jumps = _jump_paths(Q.indptr.astype(np.int64), Q.indices.astype(np.int64),
                                     np.asarray(Q.data, dtype=float), start, float(T), rec, rng)
    return CTMCPaths(states, rec, occ / T, jumps)
