"""Discrete total variation of piecewise-linear fields and its dual side.

The committed definition is the anisotropic one: the integral of the
componentwise l1-norm of the element gradients.  It is the exact support
function of the componentwise unit ball of piecewise-constant vector
fields, so the dual-ball projection is a plain clamp.  An isotropic
(per-triangle Euclidean) projection is available for comparison runs.
"""

from __future__ import annotations

import numpy as np

from .fem_assembly import P0VecField, P1Field, elem_gradient
from .mesh import TriMesh


def tv_value(mesh: TriMesh, f: P1Field) -> float:
    """Anisotropic total variation: sum_T |T| * (|df/dx1| + |df/dx2|)."""
    g = elem_gradient(mesh, f)
    return float(np.sum(mesh.areas[:, None] * np.abs(g)))


def gradient_pairing(mesh: TriMesh, f: P1Field, p: P0VecField) -> float:
    """(grad f, p) integrated over the domain."""
    g = elem_gradient(mesh, f)
    return float(np.sum(mesh.areas[:, None] * g * p))


def subgradient_witness(mesh: TriMesh, f: P1Field) -> P0VecField:
    """Componentwise sign field of the element gradients.

    Pairs with grad f to exactly the total variation, certifying membership
    in the subdifferential.
    """
    return np.sign(elem_gradient(mesh, f))


def project_dual_ball(p: P0VecField) -> P0VecField:
    """Componentwise clamp onto [-1, 1]: the exact nearest point of the
    componentwise unit ball in any weighted elementwise metric."""
    return np.clip(p, -1.0, 1.0)


def project_dual_ball_isotropic(p: P0VecField) -> P0VecField:
    """Per-triangle Euclidean normalization p / max(1, |p|)."""
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    return p / np.maximum(1.0, norms)
