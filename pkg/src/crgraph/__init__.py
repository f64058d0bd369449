"""Entire-function approximation of CR functions on decoupled model graphs."""

from .expressions import DslError, Expression, parse_expression
from .kernel import (AuditRecord, KernelParams, SelectionError, SelectionTrace,
                     c_K_constant, check_C1_invariance, check_lemma1_margin,
                     eval_E_eps, eval_tilde_E, exact_unit_det, matrix_MAB,
                     normalizer_C1, select_constants, young_constant)
from .manifold import (Box, CompactSpec, GrowthReport, ManifoldPoint,
                       ModelGraph, build_compact_spec, decoupling_check,
                       eval_Dh, eval_h, growth_certificate, parse_graph_spec,
                       slice_point)
from .quadrature import (QuadConfig, QuadResult, TestFunction, chi, eval_F,
                         eval_G, eval_pair, slice_remainder_log, sup_error)

__version__ = "0.1.0"

__all__ = [
    "DslError", "Expression", "parse_expression",
    "AuditRecord", "KernelParams", "SelectionError", "SelectionTrace",
    "c_K_constant", "check_C1_invariance", "check_lemma1_margin",
    "eval_E_eps", "eval_tilde_E", "exact_unit_det", "matrix_MAB",
    "normalizer_C1", "select_constants", "young_constant",
    "Box", "CompactSpec", "GrowthReport", "ManifoldPoint", "ModelGraph",
    "build_compact_spec", "decoupling_check", "eval_Dh", "eval_h",
    "growth_certificate", "parse_graph_spec", "slice_point",
    "QuadConfig", "QuadResult", "TestFunction", "chi", "eval_F", "eval_G",
    "eval_pair", "slice_remainder_log", "sup_error",
]
