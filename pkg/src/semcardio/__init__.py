"""Matrix-free spectral-element solver for the cardiac monodomain equation."""
from .basis import LG, LGL, make_basis, make_quadrature
from .ionic import make_model, surrogate_model
from .mesh import DofMap, HexMesh, LevelHierarchy, build_box_mesh, build_dof_map, slab_fibers, table1_diffusion
from .mf_operator import MonodomainOperator
from .stepper import Stimulus, TimeLoopConfig, run

__version__ = "0.1.0"

__all__ = [
    "LG", "LGL", "make_basis", "make_quadrature", "make_model", "surrogate_model", "DofMap", "HexMesh",
    "LevelHierarchy", "build_box_mesh", "build_dof_map", "slab_fibers", "table1_diffusion", "MonodomainOperator",
    "Stimulus", "TimeLoopConfig", "run",
]
