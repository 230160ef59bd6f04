"""Magnetic field geometry: fluxes, vector potentials, and phase arguments.

A magnetic field on R^d is an antisymmetric d x d matrix B(x), either
constant or position dependent. Constant fields use closed forms everywhere;
position-dependent ones are integrated with fixed-order Gauss-Legendre rules
(no adaptivity, so results are reproducible bit for bit).

Sign conventions are fixed once and used consistently by the assembly layer:

* ``flux(field, x, x0)`` is the magnetic flux through the oriented triangle
  with vertices 0, x, x0. For a constant field it equals ``x^T B x0 / 2``.
* ``vector_potential(field, j, x, x0)`` is the transverse-gauge potential
  ``A_j(x, x0) = -sum_k (x_k - x0_k) int_0^1 s B_jk(x0 + s (x - x0)) ds``,
  which for a constant field is ``-(1/2) sum_k (x_k - x0_k) B_jk``.

With these two choices the gradient identity that holds (and is tested) is

    d/dx_j flux(x, x0) = vector_potential(j, x, x0) - vector_potential(j, x, 0).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

__all__ = [
    "QuadratureSpec",
    "DEFAULT_QUAD",
    "MagneticField",
    "flux",
    "vector_potential",
    "triangle_flux",
    "triangle_area",
    "cell_pair_flux",
    "validate_field",
]


@dataclass(frozen=True)
class QuadratureSpec:
    """Node counts for the fixed-order rules applied to smooth fields.

    order_1d controls line integrals (vector potentials), simplex_order the
    tensor rule on the standard triangle (fluxes). Both are per-axis counts.
    """

    order_1d: int = 16
    simplex_order: int = 12

    def __post_init__(self) -> None:
        if self.order_1d < 2 or self.simplex_order < 2:
            raise ValueError("quadrature orders must be at least 2")


DEFAULT_QUAD = QuadratureSpec()


@lru_cache(maxsize=64)
def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=64)
def _simplex_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Tensor rule on {s >= 0, t >= 0, s + t <= 1} via the collapsed square
    # s = u, t = v (1 - u) with Jacobian (1 - u). Exactness degree is lower
    # than on the square, which is why simplex_order defaults higher.
    u, wu = gauss_legendre_01(n)
    v, wv = gauss_legendre_01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    nodes = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    weights = (np.outer(wu, wv) * (1.0 - U)).ravel()
    return nodes, weights


class MagneticField:
    """Antisymmetric matrix field B(x) on R^d.

    Component indices are 1-based: ``field.component(1, 2, x)`` is B_12(x).
    Smooth evaluators receive points of shape (..., d) and must return the
    matching batch shape.
    """

    def __init__(
        self,
        dim: int,
        matrix: Optional[np.ndarray] = None,
        component_fn: Optional[Callable[[int, int, np.ndarray], np.ndarray]] = None,
        label: str = "",
    ):
        if dim < 2:
            raise ValueError("magnetic fields need dimension >= 2")
        if (matrix is None) == (component_fn is None):
            raise ValueError("provide exactly one of matrix or component_fn")
        self.dim = int(dim)
        self.label = label
        self._component_fn = component_fn
        if matrix is not None:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.shape != (dim, dim):
                raise ValueError(f"field matrix must be {dim} x {dim}, got {matrix.shape}")
            defect = np.abs(matrix + matrix.T).max()
            if defect > 1e-12 * max(1.0, np.abs(matrix).max()):
                raise ValueError(f"field matrix is not antisymmetric (defect {defect:.3e})")
            matrix = 0.5 * (matrix - matrix.T)  # exact antisymmetry
            matrix.flags.writeable = False
        self.matrix = matrix

    @classmethod
    def constant(cls, matrix: np.ndarray, label: str = "constant") -> "MagneticField":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix.shape[0], matrix=matrix, label=label)

    @classmethod
    def smooth(
        cls,
        dim: int,
        component_fn: Callable[[int, int, np.ndarray], np.ndarray],
        label: str = "smooth",
    ) -> "MagneticField":
        """Wrap a componentwise evaluator B_jk(x); antisymmetry is the caller's
        responsibility and is spot-checked by validate_field."""
        return cls(dim, component_fn=component_fn, label=label)

    @property
    def is_constant(self) -> bool:
        return self.matrix is not None

    def component(self, j: int, k: int, x: np.ndarray) -> np.ndarray:
        """B_jk evaluated at x, with 1-based axis indices."""
        self._check_axis(j)
        self._check_axis(k)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have trailing dimension {self.dim}")
        if self.is_constant:
            return np.broadcast_to(self.matrix[j - 1, k - 1], x.shape[:-1])
        return np.asarray(self._component_fn(j, k, x))

    def _check_axis(self, j: int) -> None:
        if not 1 <= j <= self.dim:
            raise ValueError(f"axis index {j} outside 1..{self.dim}")

    def fingerprint(self) -> str:
        """Stable identifier used by the on-disk cache header."""
        h = hashlib.sha256()
        if self.is_constant:
            h.update(b"constant")
            h.update(np.ascontiguousarray(self.matrix).tobytes())
        else:
            # Identify a smooth field by its label plus evaluations on a
            # fixed probe grid; collisions would need two fields agreeing
            # on all probes, which is good enough for cache validation.
            h.update(b"smooth:" + self.label.encode())
            probe = np.linspace(-1.7, 1.7, 5)
            pts = np.stack(np.meshgrid(*([probe] * self.dim), indexing="ij"), axis=-1)
            for j in range(1, self.dim + 1):
                for k in range(j + 1, self.dim + 1):
                    vals = np.asarray(self.component(j, k, pts), dtype=float)
                    h.update(np.ascontiguousarray(vals).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        kind = "constant" if self.is_constant else "smooth"
        return f"MagneticField(dim={self.dim}, {kind}, label={self.label!r})"


def _as_points(field: MagneticField, *pts: np.ndarray) -> list[np.ndarray]:
    out = []
    for p in pts:
        a = np.asarray(p, dtype=float)
        if a.ndim == 0 or a.shape[-1] != field.dim:
            raise ValueError(f"points must have trailing dimension {field.dim}")
        out.append(a)
    return out


def flux(
    field: MagneticField,
    x: np.ndarray,
    x0: np.ndarray,
    quad: Optional[QuadratureSpec] = None,
) -> np.ndarray:
    """Flux through the oriented triangle (0, x, x0), batched over (..., d).

    Constant field: closed form x^T B x0 / 2. Smooth field: each independent
    component B_jk is averaged over the triangle with a fixed tensor rule and
    weighted by the projected signed area (x_j x0_k - x_k x0_j) / 2; the
    simplex rule integrates to area 1/2, so a constant evaluator reproduces
    the closed form to rounding.
    """
    x, x0 = _as_points(field, x, x0)
    if field.is_constant:
        return 0.5 * np.einsum("...i,ij,...j->...", x, field.matrix, x0)
    quad = quad or DEFAULT_QUAD
    nodes, w = _simplex_rule(quad.simplex_order)
    # P[..., q, :] = s_q x + t_q x0
    P = nodes[:, 0, None] * x[..., None, :] + nodes[:, 1, None] * x0[..., None, :]
    total = np.zeros(np.broadcast(x[..., 0], x0[..., 0]).shape)
    for j in range(1, field.dim + 1):
        for k in range(j + 1, field.dim + 1):
            avg = np.einsum("q,...q->...", w, field.component(j, k, P))
            area_jk = x[..., j - 1] * x0[..., k - 1] - x[..., k - 1] * x0[..., j - 1]
            total = total + area_jk * avg
    return total


def vector_potential(
    field: MagneticField,
    j: int,
    x: np.ndarray,
    x0: np.ndarray,
    quad: Optional[QuadratureSpec] = None,
) -> np.ndarray:
    """Transverse-gauge potential A_j(x, x0) with 1-based component index j.

    A_j(x, x0) = -sum_k (x_k - x0_k) int_0^1 s B_jk(x0 + s (x - x0)) ds.
    """
    field._check_axis(j)
    x, x0 = _as_points(field, x, x0)
    diff = x - x0
    if field.is_constant:
        return -0.5 * np.einsum("...k,k->...", diff, field.matrix[j - 1])
    quad = quad or DEFAULT_QUAD
    s, w = gauss_legendre_01(quad.order_1d)
    P = x0[..., None, :] + s[:, None] * diff[..., None, :]
    total = np.zeros(diff[..., 0].shape)
    for k in range(1, field.dim + 1):
        if k == j:
            continue  # B_jj = 0
        total = total + diff[..., k - 1] * np.einsum(
            "q,...q->...", w * s, field.component(j, k, P)
        )
    return -total


def triangle_flux(
    field: MagneticField,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    quad: Optional[QuadratureSpec] = None,
) -> np.ndarray:
    """Flux through the oriented triangle (x, y, z), composed additively from
    origin-anchored triangle fluxes. For constant fields its magnitude equals
    |B_12| times the Euclidean triangle area when d = 2."""
    return (
        flux(field, x, y, quad)
        + flux(field, y, z, quad)
        - flux(field, x, z, quad)
    )


def triangle_area(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Euclidean area of the triangle (x, y, z) in any dimension, via the
    Gram determinant of the edge vectors."""
    x, y, z = (np.asarray(p, dtype=float) for p in (x, y, z))
    u = y - x
    v = z - x
    uu = np.einsum("...k,...k->...", u, u)
    vv = np.einsum("...k,...k->...", v, v)
    uv = np.einsum("...k,...k->...", u, v)
    gram = np.maximum(uu * vv - uv * uv, 0.0)
    return 0.5 * np.sqrt(gram)


def cell_pair_flux(
    field: MagneticField,
    gamma: np.ndarray,
    gammap: np.ndarray,
    x: np.ndarray,
    xp: np.ndarray,
    quad: Optional[QuadratureSpec] = None,
) -> np.ndarray:
    """Phase argument of the block kernel for the lattice pair (gamma, gammap).

    Defined as the two-triangle sum

        triangle_flux(x + gamma, gammap, gamma)
        + triangle_flux(x + gamma, xp + gammap, gammap)

    with x, xp batched over (..., d). Constant fields use the expanded
    bilinear form flux(x, xp) + flux(x + xp, gammap - gamma), which agrees
    with the triangle sum identically (checked in the tests).

    Swapping the pair and the arguments flips the sign:
    cell_pair_flux(gp, g, xp, x) == -cell_pair_flux(g, gp, x, xp), which is
    what makes hermitian symbols assemble to hermitian matrices.
    """
    g = np.asarray(gamma, dtype=float)
    gp = np.asarray(gammap, dtype=float)
    if g.shape[-1] != field.dim or gp.shape[-1] != field.dim:
        raise ValueError(f"lattice points must have trailing dimension {field.dim}")
    x, xp = _as_points(field, x, xp)
    if field.is_constant:
        return flux(field, x, xp) + flux(field, x + xp, gp - g)
    return triangle_flux(field, x + g, gp, g, quad) + triangle_flux(
        field, x + g, xp + gp, gp, quad
    )


def validate_field(
    field: MagneticField,
    box: float = 2.0,
    samples: int = 48,
    step: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Sampled consistency report for a field.

    Checks antisymmetry B_jk = -B_kj at random points and, for smooth fields,
    the closedness identity d_i B_jk + d_k B_ij + d_j B_ki = 0 by central
    differences. Returns the maximal defects; does not raise, callers decide
    what to enforce.
    """
    rng = np.random.default_rng(seed)
    d = field.dim
    pts = rng.uniform(-box, box, size=(samples, d))
    anti = 0.0
    for j in range(1, d + 1):
        for k in range(1, d + 1):
            defect = np.abs(field.component(j, k, pts) + field.component(k, j, pts))
            anti = max(anti, float(defect.max()))

    closed = 0.0
    if not field.is_constant:
        def deriv(i, j, k):
            e = np.zeros(d)
            e[i - 1] = step
            return (field.component(j, k, pts + e) - field.component(j, k, pts - e)) / (2 * step)

        for i, j, k in itertools.product(range(1, d + 1), repeat=3):
            cyc = deriv(i, j, k) + deriv(k, i, j) + deriv(j, k, i)
            closed = max(closed, float(np.abs(cyc).max()))

    return {
        "antisymmetry_defect": anti,
        "closedness_defect": closed,
        "samples": int(samples),
        "box": float(box),
    }
