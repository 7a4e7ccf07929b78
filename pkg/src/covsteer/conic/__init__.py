from .backends import BACKENDS, get_backend, solve, standard_form
from .program import (Affine, ConicProgram, Cone, SolveResult, SolveSettings,
                      add_psd_block_2x2, bmat, hstack, smat, svec, vstack)

__all__ = [
    "Affine", "BACKENDS", "ConicProgram", "Cone", "SolveResult", "SolveSettings",
    "add_psd_block_2x2", "bmat", "get_backend", "hstack", "smat", "solve",
    "standard_form", "svec", "vstack",
]
