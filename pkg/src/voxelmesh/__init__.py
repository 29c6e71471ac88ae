"""Feed-forward textured mesh reconstruction from sparse posed views at toy scale."""
from .camera import Camera, View, ViewSet
from .meshing import TriMesh, extract_mesh
from .volume import DenseVolume, GridSpec, SparseVoxelGrid

__version__ = "0.1.0"

__all__ = ["Camera", "DenseVolume", "GridSpec", "SparseVoxelGrid", "TriMesh", "View", "ViewSet", "extract_mesh"]
