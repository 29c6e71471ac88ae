"""End-to-end feed-forward reconstruction with per-stage timing."""
from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .backbone import (
    WeightStore,
    encode_views,
    query_heads,
    sparsevoxelformer_forward,
    voxelformer_forward,
)
from .backbone.layers import sigmoid
from .camera import ViewSet
from .config import PipelineConfig
from .enhance import enhance_geometry
from .meshing import TriMesh, extract_mesh
from .render.loss import LossBreakdown, total_loss
from .render.raster import rasterize
from .volume import DenseVolume, GridSpec, default_band, occupancy_from_sdf, subdivide_occupied, trilinear_sample


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class Reconstruction:
    mesh: TriMesh
    pre_enhance: TriMesh
    loss: LossBreakdown
    timings: dict
    wall_time: float
    provenance: dict


class _Timer:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def resample(volume: DenseVolume, spec: GridSpec) -> DenseVolume:
    """Trilinear resampling of a scalar volume onto another grid's centers."""
    return DenseVolume(spec, trilinear_sample(volume, spec.centers()))


def pad_volume(volume: DenseVolume, value: float) -> DenseVolume:
    """Grow the grid by one voxel on every side, filled with ``value``.

    Keeps extracted surfaces closed where the field is negative at the border.
    """
    h = volume.spec.voxel_size
    spec = GridSpec(volume.spec.resolution + 2, tuple(np.asarray(volume.spec.lo) - h),
                    tuple(np.asarray(volume.spec.hi) + h))
    return DenseVolume(spec, np.pad(np.asarray(volume.values, float), 1, constant_values=value))


def reconstruct(views: ViewSet, config: PipelineConfig, weights: WeightStore | None = None,
                gt_sdf: DenseVolume | None = None, occupancy_from_gt: bool = False) -> Reconstruction:
    """Run every stage on ``views``.

    Args:
        views: input views (camera-frame normal maps).
        config: pipeline configuration.
        weights: backbone weights; seeded from ``config.seed`` when omitted.
        gt_sdf: optional ground-truth SDF, used for the volume loss terms and
            for the occupancy bypass.
        occupancy_from_gt: take coarse occupancy from ``gt_sdf`` instead of
            the (untrained) coarse network.
    """
    t_start = time.perf_counter()
    timer = _Timer()
    arch = config.arch
    if occupancy_from_gt and gt_sdf is None:
        raise StageError("occupancy", "occupancy from ground truth requested without an SDF volume")

    with timer.stage("weights"):
        if weights is None:
            weights = WeightStore.initialize(arch, config.seed)
        weights.check(arch)
    with timer.stage("encode"):
        encoded = encode_views(views, arch, weights)
    coarse = GridSpec.cube(config.resolved_coarse, config.half_extent)
    with timer.stage("voxelformer"):
        logits = voxelformer_forward(views, arch, weights, coarse, encoded)
    with timer.stage("occupancy"):
        prob = sigmoid(np.asarray(logits.values, float))
        gt_coarse = resample(gt_sdf, coarse) if gt_sdf is not None else None
        gt_occ = occupancy_from_sdf(gt_coarse, config.occupancy_band) if gt_coarse is not None else None
        if occupancy_from_gt:
            occ = gt_occ
        else:
            occ = DenseVolume(coarse, (prob > config.occupancy_threshold).astype(np.uint8))
        if not np.any(occ.values):
            raise ValueError("no occupied coarse voxels")
    with timer.stage("subdivide"):
        sparse = subdivide_occupied(occ, config.resolved_factor, arch.sparse.channels[0],
                                    token=weights["sparse/token"])
    with timer.stage("sparsevoxelformer"):
        feats = sparsevoxelformer_forward(views, sparse, arch, weights, encoded)
    fine = sparse.spec
    with timer.stage("sdf_query"):
        centers = fine.centers().reshape(-1, 3)
        f, missing = trilinear_sample(feats, centers, return_missing=True)
        sdf_vals, _, _ = query_heads(f, weights)
        band = default_band(fine) if config.occupancy_band is None else config.occupancy_band
        sdf_vals = np.where(missing, band, sdf_vals)
        pred_sdf = DenseVolume(fine, sdf_vals.reshape(fine.shape))
    with timer.stage("extract"):
        mesh = extract_mesh(pad_volume(pred_sdf, band))
        if mesh.is_empty:
            raise ValueError("predicted SDF has no zero crossing")
    with timer.stage("textures"):
        inside = np.clip(mesh.vertices, fine.lo, fine.hi)
        f, _ = trilinear_sample(feats, inside, return_missing=True)
        _, colors, normals = query_heads(f, weights)
        mesh = mesh.copy_with(colors=colors, normals=normals)
    pre = mesh
    if not config.skip_enhance:
        with timer.stage("enhance"):
            mesh = enhance_geometry(mesh, mesh.normals, config.enhance)
    with timer.stage("loss"):
        rendered = [rasterize(mesh, v.camera, normal_frame="camera") for v in views]
        if gt_sdf is not None:
            gt_fine = resample(gt_sdf, fine)
            loss = total_loss(rendered, views, prob, gt_occ.values.astype(float),
                              pred_sdf.values, gt_fine.values, config.loss_weights)
        else:
            zero = np.zeros(1)
            loss = total_loss(rendered, views, zero, zero, zero, zero, config.loss_weights)
    wall = time.perf_counter() - t_start
    provenance = {
        "config_hash": arch.config_hash().hex(),
        "weights_hash": weights.config_hash.hex(),
        "seed": config.seed,
        "preset": config.preset,
        "stage_timings": timer.timings,
        "wall_time": wall,
        "volume_terms_supervised": gt_sdf is not None,
        "occupancy_source": "ground_truth_sdf" if occupancy_from_gt else "voxelformer",
        "n_sparse_voxels": len(sparse),
        "n_vertices": mesh.n_vertices,
        "n_faces": mesh.n_faces,
        "config": json.loads(json.dumps(config.to_dict())),
    }
    return Reconstruction(mesh, pre, loss, timer.timings, wall, provenance)
