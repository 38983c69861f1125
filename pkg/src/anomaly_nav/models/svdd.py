"""Deep SVDD heads: hypersphere around a fixed centre in feature space."""

from __future__ import annotations

import numpy as np

from .. import grad as G
from ..errors import UsageError

CENTER_FLOOR = 0.1
DEFAULT_NU = 0.1


def svdd_init_center(features: np.ndarray, floor: float = CENTER_FLOOR) -> np.ndarray:
    """Mean feature vector, with near-zero coordinates pushed out to ``+-floor``.

    Exact zeros go to ``+floor`` so the centre is never the origin.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise UsageError("centre initialisation needs a non-empty (N, d) feature array")
    c = features.mean(axis=0)
    small = np.abs(c) < floor
    c[small] = np.where(c[small] < 0, -floor, floor)
    return c.astype(np.float32)


def initial_radius(features: np.ndarray, center: np.ndarray, nu: float) -> float:
    """Radius covering a ``1 - nu`` fraction of the initial features.

    Starting the soft-boundary radius at zero would freeze it there: its
    gradient ``2R (1 - out_fraction / nu)`` vanishes at ``R = 0``.
    """
    d2 = np.sum((np.asarray(features, np.float64) - center) ** 2, axis=1)
    return float(np.sqrt(np.quantile(d2, 1.0 - nu)))


def _sq_dist(y: G.Tensor, center) -> G.Tensor:
    return G.sum_(G.square(G.sub(y, np.asarray(center, dtype=y.data.dtype))), axis=-1)


def svdd_hard_loss(y, center) -> G.Tensor:
    """Mean squared distance to the centre."""
    return G.mean(_sq_dist(G.as_tensor(y), center))


def svdd_soft_loss(y, center, radius: G.Tensor, nu: float = DEFAULT_NU) -> G.Tensor:
    """``R^2 + (1/nu) * mean(max(0, ||y - c||^2 - R^2))``."""
    if not 0.0 < nu <= 1.0:
        raise UsageError(f"nu must lie in (0, 1], got {nu}")
    radius = G.as_tensor(radius)
    r2 = G.square(radius)
    hinge = G.relu(G.sub(_sq_dist(G.as_tensor(y), center), r2))
    return G.add(r2, G.mul(G.mean(hinge), 1.0 / nu))


def svdd_score(y: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Squared distance to the centre, per row; both variants use it."""
    y = np.asarray(y, dtype=np.float32)
    return np.sum((y - center) ** 2, axis=-1)
