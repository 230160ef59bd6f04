"""Spectral utilities: eigenvalues with residual checks, Hausdorff distances,
gap bookkeeping, contour projections, and scaling-law fits.

Everything here works on plain Hermitian matrices and sorted spectra; nothing
imports the assembly layer, so these tools double as an independent check on
assembled operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "SpectrumResult",
    "GapList",
    "EdgeTrack",
    "RieszResult",
    "HolderFit",
    "hermitian_defect",
    "eigenvalues_hermitian",
    "eigh_checked",
    "operator_norm",
    "hausdorff",
    "find_gaps",
    "drop_boundary_states",
    "track_gap_edge",
    "riesz_project",
    "holder_fit",
    "random_hermitian",
]

_HERMITIAN_RTOL = 1e-10


@dataclass
class SpectrumResult:
    """Sorted eigenvalues of a Hermitian matrix plus the residual evidence."""

    eigenvalues: np.ndarray
    matrix_dim: int
    residual: float
    checked_pairs: int
    provenance: str = ""

    @property
    def hull(self) -> tuple[float, float]:
        return float(self.eigenvalues[0]), float(self.eigenvalues[-1])


@dataclass
class GapList:
    """Maximal open intervals of width >= min_width inside the spectral hull."""

    gaps: list  # of (left, right, width) tuples
    min_width: float
    hull: tuple

    def __len__(self) -> int:
        return len(self.gaps)

    def widest(self) -> Optional[tuple]:
        if not self.gaps:
            return None
        return max(self.gaps, key=lambda g: g[2])


@dataclass
class EdgeTrack:
    """One spectral gap followed across a parameter grid.

    After the gap closes (no overlapping gap at some grid point) the edges are
    NaN and closed_at records the first such index; tracking does not resume.
    """

    grid: np.ndarray
    left: np.ndarray
    right: np.ndarray
    closed_at: Optional[int]
    left_quotients: np.ndarray
    right_quotients: np.ndarray

    @property
    def is_open_throughout(self) -> bool:
        return self.closed_at is None


@dataclass
class RieszResult:
    """Spectral window operator computed two ways.

    filtered: sum of lambda P_lambda over eigenvalues inside the window,
    from the eigendecomposition. contour: trapezoidal discretization of the
    circular contour integral. projector: the contour projector onto the
    window (no lambda weight), useful for idempotence checks.
    """

    filtered: np.ndarray
    contour: np.ndarray
    projector: np.ndarray
    inside: np.ndarray
    difference_norm: float
    window: tuple
    n_quad: int


@dataclass
class HolderFit:
    """Least-squares power-law fit dist ~ C * delta^alpha, plus the uniform
    sqrt-normalized constant c_star = max dist / sqrt(delta)."""

    alpha: float
    constant: float
    residual: float
    c_star: float
    deltas: np.ndarray
    dists: np.ndarray

    @property
    def c_star_ratio(self) -> float:
        """Spread max/min of the per-point sqrt-normalized constants."""
        c = self.dists / np.sqrt(self.deltas)
        return float(np.max(c) / np.min(c))


def hermitian_defect(M: np.ndarray) -> float:
    """Relative deviation from M == M^H in Frobenius norm."""
    M = np.asarray(M)
    scale = np.linalg.norm(M)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(M - M.conj().T) / scale)


def _require_hermitian(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    defect = hermitian_defect(M)
    if defect > _HERMITIAN_RTOL:
        raise ValueError(f"matrix is not Hermitian (relative defect {defect:.3e})")
    return M


def eigh_checked(
    M: np.ndarray,
    residual_tol: float = 1e-9,
    check_pairs: int = 16,
    provenance: str = "",
) -> tuple[SpectrumResult, np.ndarray]:
    """Full eigendecomposition with a sampled residual check.

    Verifies Hermiticity up to a relative defect of 1e-10, diagonalizes, and
    checks ||M v - lambda v|| / max(1, ||M||) on min(n, check_pairs) sampled
    eigenpairs. Raises on a failed residual; LAPACK non-convergence surfaces
    as numpy.linalg.LinAlgError.
    """
    M = _require_hermitian(M)
    n = M.shape[0]
    w, V = np.linalg.eigh(M)
    k = min(n, check_pairs)
    # Deterministic sample: spread indices across the spectrum.
    idx = np.unique(np.linspace(0, n - 1, k).astype(int))
    scale = max(1.0, float(np.abs(w).max()) if n else 1.0)
    resid = 0.0
    for i in idx:
        r = np.linalg.norm(M @ V[:, i] - w[i] * V[:, i])
        resid = max(resid, float(r) / scale)
    if resid > residual_tol:
        raise RuntimeError(
            f"eigen residual {resid:.3e} exceeds {residual_tol:.1e} (dim {n})"
        )
    result = SpectrumResult(
        eigenvalues=w,
        matrix_dim=n,
        residual=resid,
        checked_pairs=int(len(idx)),
        provenance=provenance,
    )
    return result, V


def eigenvalues_hermitian(
    M: np.ndarray,
    residual_tol: float = 1e-9,
    check_pairs: int = 16,
    provenance: str = "",
) -> SpectrumResult:
    """Sorted spectrum of a Hermitian matrix, residual-checked; see eigh_checked."""
    result, _ = eigh_checked(M, residual_tol, check_pairs, provenance)
    return result


def operator_norm(M: np.ndarray) -> float:
    """Spectral norm. Hermitian input takes the eigvalsh shortcut, anything
    else the largest singular value."""
    M = np.atleast_2d(np.asarray(M))
    if M.shape[0] == M.shape[1] and hermitian_defect(M) <= 1e-12:
        return float(np.abs(np.linalg.eigvalsh(M)).max()) if M.size else 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0


def _check_sorted(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if np.any(np.diff(a) < 0):
        raise ValueError(f"{name} must be sorted ascending")
    return a


def _directed_hausdorff_sorted(x: np.ndarray, y: np.ndarray) -> float:
    # sup over x of the distance to y, both sorted: one merged pass with a
    # pointer at the largest y <= current x.
    best = 0.0
    j = 0
    m = y.size
    for v in x:
        while j + 1 < m and y[j + 1] <= v:
            j += 1
        d = abs(v - y[j])
        if j + 1 < m:
            d = min(d, y[j + 1] - v)
        if d > best:
            best = d
    return best


def hausdorff(x: Union[np.ndarray, SpectrumResult], y: Union[np.ndarray, SpectrumResult]) -> float:
    """Hausdorff distance between two finite sorted subsets of the line.

    Linear-time merged scan, no n x m distance matrix. Inputs must be sorted
    ascending and nonempty.
    """
    if isinstance(x, SpectrumResult):
        x = x.eigenvalues
    if isinstance(y, SpectrumResult):
        y = y.eigenvalues
    x = _check_sorted(x, "x")
    y = _check_sorted(y, "y")
    return max(_directed_hausdorff_sorted(x, y), _directed_hausdorff_sorted(y, x))


def find_gaps(spectrum: Union[np.ndarray, SpectrumResult], min_width: float) -> GapList:
    """Maximal open intervals of width >= min_width between consecutive
    eigenvalues, strictly inside the hull."""
    if isinstance(spectrum, SpectrumResult):
        vals = spectrum.eigenvalues
    else:
        vals = np.sort(np.asarray(spectrum, dtype=float).ravel())
    if vals.size == 0:
        raise ValueError("spectrum must be nonempty")
    if min_width <= 0:
        raise ValueError("min_width must be positive")
    diffs = np.diff(vals)
    gaps = [
        (float(vals[i]), float(vals[i + 1]), float(diffs[i]))
        for i in np.nonzero(diffs >= min_width)[0]
    ]
    return GapList(gaps=gaps, min_width=float(min_width), hull=(float(vals[0]), float(vals[-1])))


def drop_boundary_states(
    eigenvalues: np.ndarray,
    vectors: np.ndarray,
    boundary_mask: np.ndarray,
    threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Discard eigenpairs whose weight on masked entries reaches threshold.

    Finite open lattice samples host states localized at the sample edge whose
    eigenvalues sit inside bulk spectral gaps; gap detection needs them gone.
    boundary_mask flags the matrix rows belonging to boundary sites. Returns
    (kept eigenvalues, per-state boundary weights). Hulls and Hausdorff
    distances should keep using the unfiltered spectrum.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    boundary_mask = np.asarray(boundary_mask, dtype=bool)
    if vectors.shape[0] != boundary_mask.size:
        raise ValueError("boundary_mask length must match matrix dimension")
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    weights = np.sum(np.abs(vectors[boundary_mask, :]) ** 2, axis=0)
    norms = np.sum(np.abs(vectors) ** 2, axis=0)
    weights = weights / np.where(norms > 0, norms, 1.0)
    return eigenvalues[weights < threshold], weights


def _overlap(a: tuple, b: tuple) -> float:
    return min(a[1], b[1]) - max(a[0], b[0])


def track_gap_edge(
    grid: Sequence[float],
    gap_lists: Sequence[GapList],
    window: tuple,
) -> EdgeTrack:
    """Follow one gap across a parameter grid by maximal interval overlap.

    At the first grid point the tracked gap is the one overlapping the seed
    window most; afterwards each step picks the gap overlapping the previous
    interval most. A step with no positive overlap closes the track: edges
    become NaN from there on and closed_at records the index. Closure is a
    reported outcome, not an error.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size != len(gap_lists):
        raise ValueError("grid and gap_lists must have equal length")
    if grid.size == 0:
        raise ValueError("grid must be nonempty")

    left = np.full(grid.size, np.nan)
    right = np.full(grid.size, np.nan)
    closed_at: Optional[int] = None
    current = (float(window[0]), float(window[1]))
    for i, gl in enumerate(gap_lists):
        best = None
        best_ov = 0.0
        for g in gl.gaps:
            ov = _overlap(current, g)
            if ov > best_ov:
                best_ov = ov
                best = g
        if best is None:
            closed_at = i
            break
        left[i], right[i] = best[0], best[1]
        current = (best[0], best[1])

    def quots(edge: np.ndarray) -> np.ndarray:
        q = np.full(max(grid.size - 1, 0), np.nan)
        for i in range(grid.size - 1):
            if not (math.isnan(edge[i]) or math.isnan(edge[i + 1])):
                q[i] = abs(edge[i + 1] - edge[i]) / abs(grid[i + 1] - grid[i])
        return q

    return EdgeTrack(
        grid=grid,
        left=left,
        right=right,
        closed_at=closed_at,
        left_quotients=quots(left),
        right_quotients=quots(right),
    )


def riesz_project(
    M: np.ndarray,
    window: tuple,
    n_quad: int = 256,
    dist_tol: Optional[float] = None,
) -> RieszResult:
    """Window operator sum_{lambda in window} lambda P_lambda, two ways.

    The reference value filters the eigendecomposition; the check value is
    the trapezoidal rule on the circle through the window endpoints,

        T = (2 pi i)^{-1} contour_integral z (z - M)^{-1} dz
          ~ -(r / n) sum_j z_j e^{i theta_j} (M - z_j)^{-1},

    which converges geometrically in n once the contour stays clear of the
    spectrum. Raises if any eigenvalue is within dist_tol of the circle
    (default 1e-6 * ||M||).
    """
    M = _require_hermitian(M)
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError("window must have positive length")
    if n_quad < 8:
        raise ValueError("n_quad must be at least 8")
    center = 0.5 * (lo + hi)
    radius = 0.5 * (hi - lo)

    w, V = np.linalg.eigh(M)
    norm = float(np.abs(w).max()) if w.size else 0.0
    if dist_tol is None:
        dist_tol = 1e-6 * max(1.0, norm)
    dist_to_circle = np.abs(np.abs(w - center) - radius)
    if np.any(dist_to_circle < dist_tol):
        worst = float(dist_to_circle.min())
        raise ValueError(
            f"eigenvalue within {worst:.3e} of the contour (tolerance {dist_tol:.3e})"
        )

    inside = np.abs(w - center) < radius
    filtered = (V * np.where(inside, w, 0.0)) @ V.conj().T

    n = M.shape[0]
    theta = 2.0 * np.pi * np.arange(n_quad) / n_quad
    z = center + radius * np.exp(1j * theta)
    eye = np.eye(n, dtype=complex)
    contour = np.zeros((n, n), dtype=complex)
    projector = np.zeros((n, n), dtype=complex)
    for zj, th in zip(z, theta):
        resolvent = np.linalg.solve(M - zj * eye, eye)
        phase = np.exp(1j * th)
        contour += zj * phase * resolvent
        projector += phase * resolvent
    contour *= -radius / n_quad
    projector *= -radius / n_quad

    diff = float(np.linalg.norm(filtered - contour, 2))
    return RieszResult(
        filtered=filtered,
        contour=contour,
        projector=projector,
        inside=w[inside],
        difference_norm=diff,
        window=(lo, hi),
        n_quad=int(n_quad),
    )


def holder_fit(deltas: Sequence[float], dists: Sequence[float]) -> HolderFit:
    """Fit dist ~ C delta^alpha by least squares in log-log coordinates.

    Needs at least three strictly positive pairs. Also reports
    c_star = max dist / sqrt(delta), the uniform constant for a square-root
    law, which is the quantity compared across delta decades.
    """
    deltas = np.asarray(deltas, dtype=float)
    dists = np.asarray(dists, dtype=float)
    if deltas.shape != dists.shape or deltas.size < 3:
        raise ValueError("need at least three (delta, dist) pairs")
    if np.any(deltas <= 0) or np.any(dists <= 0):
        raise ValueError("holder_fit needs positive deltas and distances")
    A = np.column_stack([np.log(deltas), np.ones_like(deltas)])
    coef, _, _, _ = np.linalg.lstsq(A, np.log(dists), rcond=None)
    alpha, logc = float(coef[0]), float(coef[1])
    pred = A @ coef
    residual = float(np.sqrt(np.mean((np.log(dists) - pred) ** 2)))
    c_star = float(np.max(dists / np.sqrt(deltas)))
    return HolderFit(
        alpha=alpha,
        constant=math.exp(logc),
        residual=residual,
        c_star=c_star,
        deltas=deltas,
        dists=dists,
    )


def random_hermitian(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """Dense Hermitian test matrix with Gaussian entries."""
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * 0.5 * (A + A.conj().T)
