"""Quadrature rules for integrating against the standard normal density."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite_e

from .model import ValidationError


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights with ``sum(w * f(nodes)) ~= E[f(Q)]`` for ``Q ~ N(0, 1)``.

    Weights are stored already normalized against the normal density, so
    they sum to one.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size < 1:
            raise ValidationError("nodes and weights must be 1-D arrays of equal, positive length")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def order(self) -> int:
        return self.nodes.size

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def expect(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


@lru_cache(maxsize=64)
def _gh(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = hermite_e.hermegauss(order)
    return x, w / w.sum()


def gauss_hermite(order: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule; exact for polynomials of degree <= 2*order - 1."""
    if order < 1:
        raise ValidationError(f"quadrature order must be >= 1, got {order}")
    x, w = _gh(int(order))
    return QuadratureRule(x.copy(), w.copy())


def dense_grid(n_points: int = 2001, bound: float = 8.0) -> QuadratureRule:
    """Trapezoid rule on ``[-bound, bound]`` weighted by the normal density (reference-grade)."""
    q = np.linspace(-bound, bound, n_points)
    w = np.full(n_points, q[1] - q[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    w *= np.exp(-0.5 * q * q) / np.sqrt(2.0 * np.pi)
    return QuadratureRule(q, w)
