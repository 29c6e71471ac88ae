"""Normal-driven vertex refinement and normal-consistency statistics.

The refinement minimizes::

    E(v) = alpha * sum_i |v_i - v0_i|^2 + beta * sum_f sum_{e in f} (n_f . e)^2

where ``n_f`` is the normalized mean target normal of face ``f``'s vertices and
``e`` runs over the face's three edge vectors. The second term pulls edges
orthogonal to the prescribed normals; the first keeps vertices near their
start. Plain gradient descent with step halving on energy increase.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshing import TriMesh, vertex_normals

THRESHOLDS_DEG = (1.0, 2.0, 5.0, 10.0, 15.0)
NRM_MAGIC = b"NRM1"


@dataclass(frozen=True)
class EnhanceParams:
    alpha: float = 1.0
    beta: float = 4.0
    iterations: int = 50
    step_size: float = 0.02
    max_displacement: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha and beta must be non-negative and not both zero")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_displacement is not None and self.max_displacement < 0:
            raise ValueError("max_displacement must be non-negative")


def face_target_normals(faces, targets) -> np.ndarray:
    n = np.asarray(targets, float)[faces].mean(axis=1)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(norm > 0, n / np.maximum(norm, 1e-300), 0.0)


_EDGES = ((0, 1), (1, 2), (2, 0))


def energy(verts, rest, faces, face_normals, alpha, beta) -> float:
    e = alpha * float(np.sum((verts - rest) ** 2))
    for i, j in _EDGES:
        d = np.einsum("ij,ij->i", face_normals, verts[faces[:, j]] - verts[faces[:, i]])
        e += beta * float(np.sum(d * d))
    return e


def energy_grad(verts, rest, faces, face_normals, alpha, beta) -> np.ndarray:
    g = 2.0 * alpha * (verts - rest)
    for i, j in _EDGES:
        d = np.einsum("ij,ij->i", face_normals, verts[faces[:, j]] - verts[faces[:, i]])
        contrib = (2.0 * beta * d)[:, None] * face_normals
        np.add.at(g, faces[:, j], contrib)
        np.add.at(g, faces[:, i], -contrib)
    return g


def _clamp_displacement(cand, rest, limit):
    disp = cand - rest
    norm = np.linalg.norm(disp, axis=1, keepdims=True)
    # keep a few ulps of |rest| in reserve so re-measured displacements stay within the bound
    margin = 8 * np.finfo(float).eps * (np.abs(rest).max(axis=1, keepdims=True) + limit)
    target = np.maximum(limit - margin, 0.0)
    scale = np.where(norm > target, target / np.maximum(norm, 1e-300), 1.0)
    return rest + disp * scale


def enhance_geometry(mesh: TriMesh, target_normals, params: EnhanceParams | None = None,
                     return_history: bool = False):
    """Move vertices so that face edges become orthogonal to target normals.

    Connectivity and textures are untouched. With ``return_history`` the
    accepted energies (starting value first) are returned as well.
    """
    params = params or EnhanceParams()
    targets = np.asarray(target_normals, float)
    if targets.shape != (mesh.n_vertices, 3):
        raise ValueError(f"got {len(targets)} target normals for {mesh.n_vertices} vertices")
    rest = mesh.vertices.copy()
    verts = rest.copy()
    fn = face_target_normals(mesh.faces, targets)
    a, b = params.alpha, params.beta
    e_cur = energy(verts, rest, mesh.faces, fn, a, b)
    history = [e_cur]
    step = params.step_size
    for _ in range(params.iterations):
        g = energy_grad(verts, rest, mesh.faces, fn, a, b)
        if not np.any(g):
            break
        accepted = False
        while step > 1e-12:
            cand = verts - step * g
            if params.max_displacement is not None:
                cand = _clamp_displacement(cand, rest, params.max_displacement)
            e_new = energy(cand, rest, mesh.faces, fn, a, b)
            if e_new <= e_cur:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        verts, e_cur = cand, e_new
        history.append(e_cur)
    if any(later > earlier for earlier, later in zip(history, history[1:])):
        raise RuntimeError("enhancement energy increased on an accepted step")
    out = mesh.copy_with(vertices=verts)
    if return_history:
        return out, history
    return out


@dataclass(frozen=True)
class NormalConsistency:
    """Fraction of vertices whose geometric normal is within each threshold."""

    fractions: dict
    excluded: int
    angles_deg: np.ndarray = field(repr=False)

    def median_angle(self) -> float:
        return float(np.median(self.angles_deg)) if self.angles_deg.size else float("nan")


@dataclass(frozen=True)
class NormalConsistencyReport:
    before: NormalConsistency
    after: NormalConsistency

    def to_dict(self) -> dict:
        return {
            "thresholds_deg": list(self.before.fractions),
            "before": list(self.before.fractions.values()),
            "after": list(self.after.fractions.values()),
            "excluded_before": self.before.excluded,
            "excluded_after": self.after.excluded,
        }


def vertex_angle_errors(mesh: TriMesh, target_normals):
    """Angles (degrees) between geometric vertex normals and targets, plus a validity mask."""
    targets = np.asarray(target_normals, float)
    if targets.shape != (mesh.n_vertices, 3):
        raise ValueError(f"got {len(targets)} target normals for {mesh.n_vertices} vertices")
    geo, isolated = vertex_normals(mesh, return_isolated=True)
    tn = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-300)
    cos = np.clip(np.einsum("ij,ij->i", geo, tn), -1.0, 1.0)
    return np.degrees(np.arccos(cos)), ~isolated


def normal_consistency(mesh: TriMesh, target_normals, thresholds=THRESHOLDS_DEG) -> NormalConsistency:
    angles, valid = vertex_angle_errors(mesh, target_normals)
    used = angles[valid]
    fractions = {float(t): (float(np.mean(used < t)) if used.size else 0.0) for t in thresholds}
    return NormalConsistency(fractions, int(np.count_nonzero(~valid)), used)


def enhancement_report(before: TriMesh, after: TriMesh, target_normals,
                       thresholds=THRESHOLDS_DEG) -> NormalConsistencyReport:
    return NormalConsistencyReport(
        normal_consistency(before, target_normals, thresholds),
        normal_consistency(after, target_normals, thresholds),
    )


def save_normals(path, normals) -> None:
    n = np.asarray(normals, dtype="<f4").reshape(-1, 3)
    Path(path).write_bytes(NRM_MAGIC + struct.pack("<I", len(n)) + n.tobytes())


def load_normals(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != NRM_MAGIC:
        raise ValueError(f"{path}: not an NRM1 normal file")
    (count,) = struct.unpack_from("<I", data, 4)
    return np.frombuffer(data, "<f4", 3 * count, 8).reshape(count, 3).astype(np.float64)
