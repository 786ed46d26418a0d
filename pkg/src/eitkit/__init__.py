"""Desk-scale electrical impedance tomography toolkit.

Forward modeling on triangulated disk meshes (Complete Electrode Model),
sensitivity-based encoding-level maps, hybrid neural-field reconstruction,
classic TV-regularized Gauss-Newton, and the evaluation stack (PSNR, SSIM,
frequency-band consistency, sweep fits).
"""

__version__ = "0.1.0"

from .mesh import Mesh, MeshSpec, generate_disk_mesh, load_mesh, node_sparsity, save_mesh

__all__ = [
    "Mesh",
    "MeshSpec",
    "generate_disk_mesh",
    "load_mesh",
    "save_mesh",
    "node_sparsity",
    "__version__",
]
