"""Test-only environments."""
import numpy as np

from wasspo import autodiff as ad
from wasspo.envs import ScalarRegulator


class ZeroCostScalar(ScalarRegulator):
    """Scalar regulator whose cost is identically zero."""

    def _cost(self, s, a):
        return ad.mul(0.0, ad.vsum(ad.mul(s, a), axis=-1))


class ConcaveActionScalar(ScalarRegulator):
    """Scalar regulator with cost ``s^2 - a^2``: concave in the action."""

    def _cost(self, s, a):
        return ad.vsum(ad.sub(ad.square(s), ad.square(a)), axis=-1)


def explicit_kernel(grid, s_next, sigma):
    """Brute-force kernel rows from the joint Gaussian over all grid points."""
    pts = grid.points
    d = s_next[..., None, :] - pts
    for k, per in enumerate(grid.periodic):
        if per:
            d[..., k] = (d[..., k] + np.pi) % (2 * np.pi) - np.pi
    d = d / (sigma * np.asarray(grid.scale))
    w = np.exp(-0.5 * np.sum(d * d, axis=-1))
    return w / w.sum(axis=-1, keepdims=True)
