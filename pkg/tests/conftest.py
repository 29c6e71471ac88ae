import numpy as np
import pytest

from voxelmesh.fixtures import write_fixture


def brute_force_distance(points, vertices, faces):
    """O(N*F) point-triangle distance via per-face projection and edge clamps."""
    pts = np.asarray(points, float).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for f in faces:
        a, b, c = vertices[f]
        n = np.cross(b - a, c - a)
        n = n / np.linalg.norm(n)
        # inside-face projection
        proj = pts - np.outer((pts - a) @ n, n)
        inside = np.ones(len(pts), dtype=bool)
        for p, q in ((a, b), (b, c), (c, a)):
            inside &= np.cross(q - p, proj - p) @ n >= 0
        d = np.where(inside, np.abs((pts - a) @ n), np.inf)
        for p, q in ((a, b), (b, c), (c, a)):
            e = q - p
            t = np.clip((pts - p) @ e / (e @ e), 0.0, 1.0)
            d = np.minimum(d, np.linalg.norm(pts - (p + t[:, None] * e), axis=1))
        best = np.minimum(best, d)
    return best


@pytest.fixture(scope="session")
def sphere_fixture(tmp_path_factory):
    return write_fixture(tmp_path_factory.mktemp("sphere"), "sphere", n_views=6, image_size=64, sdf_resolution=32)
