import numpy as np


def one_sided_weights(order, points):
    """Backward stencil at 0 on nodes 0, -1, ..., -(points - 1); exact for degree < points."""
    k = np.arange(points)
    V = np.vander(-k.astype(float), points, increasing=True).T
    rhs = np.zeros(points)
    rhs[order] = np.prod(np.arange(1, order + 1))
    return np.linalg.solve(V, rhs)
