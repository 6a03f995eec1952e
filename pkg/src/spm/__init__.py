"""Spatial polarization multiplexing: single-shot and dense polarimetric structured light."""

from .brdf import FitConfig, FitData, Light, fit_albedo, fit_specular, pca_normals, relight
from .codebook import (Codebook, CodeParams, PatternImage, StripeLayout, assemble_pattern,
                       build_constraint_graph, eulerian_sequence, quantize_aolp, validate_sequence)
from .decoder import (CorrespondenceSet, DecoderConfig, ProjectedCode, detect_stripes, dp_decode,
                      monotone_align, reconstruct_single_shot, triangulate)
from .decompose import decompose_correspondences, solve_mueller, split_reflections
from .dense import (DenseConfig, MotionMask, adaptive_decode, dense_decode, label_motion,
                    make_shifted_patterns, match_cost, subpixel_refine)
from .errors import DegenerateError, ParseError, PreconditionError, SPMError
from .io import Cloud, rbf_densify, read_cloud, read_pattern, read_psi, write_cloud, write_pattern, write_psi
from .polcore import PolarimetricImage, stokes_from_intensities, to_linear_state
from .reflectance import BrdfParams, SurfaceMueller
from .simulator import Rig, Scene, render_frame, render_sequence

__version__ = "0.1.0"
