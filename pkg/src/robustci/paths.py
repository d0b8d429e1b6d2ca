"""Deterministic scalar paths on [0, T]: piecewise-constant or piecewise-smooth.

Both kinds expose vectorized evaluation and an antiderivative, which is
exact for step paths and Gauss-Legendre on every smooth piece otherwise.
"""

from __future__ import annotations

from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

GL_NODES = 20
MAX_PIECE = 0.25

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int = GL_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    if n not in _GL_CACHE:
        x, w = leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


def refine_edges(edges: np.ndarray, max_len: float = MAX_PIECE) -> np.ndarray:
    """Split every interval longer than ``max_len`` into equal parts."""
    out = [edges[0]]
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(1, int(np.ceil((b - a) / max_len - 1e-12)))
        out.extend(np.linspace(a, b, n + 1)[1:].tolist())
    return np.array(out)


def _locate(edges: np.ndarray, t) -> np.ndarray:
    idx = np.searchsorted(edges, np.asarray(t, dtype=float), side="right") - 1
    return np.clip(idx, 0, edges.size - 2)


class TimePath:
    edges: np.ndarray

    @property
    def horizon(self) -> float:
        return float(self.edges[-1])

    def __call__(self, t):
        raise NotImplementedError

    def antiderivative(self, t):
        raise NotImplementedError

    def integral(self, a, b):
        return self.antiderivative(b) - self.antiderivative(a)

    @property
    def is_step(self) -> bool:
        return False

    def sample(self, n_per_cell: int = 2) -> tuple[np.ndarray, np.ndarray]:
        """Values at the grid points and at cell midpoints (when n_per_cell = 2)."""
        ts = np.unique(
            np.concatenate([np.linspace(a, b, n_per_cell + 1) for a, b in zip(self.edges[:-1], self.edges[1:])])
        )
        return ts, np.asarray(self(ts), dtype=float)


class StepPath(TimePath):
    """Right-continuous piecewise-constant path; the last value also holds at T."""

    def __init__(self, edges, values):
        self.edges = np.asarray(edges, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if self.values.size != self.edges.size - 1:
            raise ValueError("one value per cell is required")
        self._cum = np.concatenate([[0.0], np.cumsum(self.values * np.diff(self.edges))])

    @classmethod
    def constant(cls, value: float, horizon: float):
        return cls([0.0, horizon], [value])

    @property
    def is_step(self) -> bool:
        return True

    def __call__(self, t):
        return self.values[_locate(self.edges, t)]

    def antiderivative(self, t):
        t = np.asarray(t, dtype=float)
        j = _locate(self.edges, t)
        return self._cum[j] + self.values[j] * (t - self.edges[j])

    def on(self, edges) -> "StepPath":
        """Re-express on a finer grid whose edges include all of ours."""
        edges = np.asarray(edges, dtype=float)
        mids = 0.5 * (edges[:-1] + edges[1:])
        return StepPath(edges, self(mids))

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())


class FunctionPath(TimePath):
    """Path given by a vectorized callable, smooth between consecutive ``edges``."""

    def __init__(self, edges, func: Callable[[np.ndarray], np.ndarray], *, nodes: int = GL_NODES, max_piece: float = MAX_PIECE):
        self.edges = refine_edges(np.asarray(edges, dtype=float), max_piece)
        self.func = func
        self.nodes = nodes

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.asarray(self.func(t), dtype=float) * np.ones_like(t)

    @cached_property
    def _cum(self) -> np.ndarray:
        xi, wi = gauss_legendre(self.nodes)
        a, b = self.edges[:-1], self.edges[1:]
        L = b - a
        pts = a[:, None] + L[:, None] * xi[None, :]
        piece = (self(pts) * wi[None, :]).sum(axis=1) * L
        return np.concatenate([[0.0], np.cumsum(piece)])

    def antiderivative(self, t):
        t = np.asarray(t, dtype=float)
        j = _locate(self.edges, t)
        a = self.edges[j]
        xi, wi = gauss_legendre(self.nodes)
        L = t - a
        pts = a[..., None] + L[..., None] * xi
        part = (self(pts) * wi).sum(axis=-1) * L
        return self._cum[j] + part

    @property
    def min(self) -> float:
        return float(self.sample(8)[1].min())

    @property
    def max(self) -> float:
        return float(self.sample(8)[1].max())


def as_path(obj, edges) -> TimePath:
    """Wrap an array of cell values, a scalar or a callable as a TimePath on ``edges``."""
    if isinstance(obj, TimePath):
        return obj
    edges = np.asarray(edges, dtype=float)
    if callable(obj):
        return FunctionPath(edges, obj)
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == 0:
        return StepPath(edges, np.full(edges.size - 1, float(arr)))
    return StepPath(edges, arr)


def union_edges(*paths: TimePath) -> np.ndarray:
    e = np.unique(np.concatenate([p.edges for p in paths]))
    # merge edges that differ only by rounding
    keep = np.concatenate([[True], np.diff(e) > 1e-12 * max(1.0, e[-1])])
    return e[keep]
