"""Symbol library: evaluators a(x, x', xi) plus the metadata assembly needs.

Evaluators are vectorized. Each of the three arguments is an array whose
trailing axis has length d; batch axes broadcast against each other and the
result carries the broadcast batch shape. Values are complex.

The xi_class field tells the assembly layer how to treat the fiber variable:

* Hopping: a is a finite trigonometric polynomial in xi with integer
  frequencies and no (x, x') dependence. The kernel integral collapses to a
  lattice sum, no xi quadrature at all.
* XiIntegrable: |a| decays in xi fast enough that a box of half-width
  box_halfwidth captures everything but a tail below tail_tol.
* General: a is bounded (or of declared polynomial growth) in xi; kernel
  integrals need the regularizing weight exp(-eps <xi>) and the box half-width
  is chosen as log(1/tail_tol) / eps at assembly time.

Symbols may optionally expose an exact split a = x_part(x, x') * xi_part(xi).
Assembly exploits the split to reuse xi transforms across block pairs; the
full evaluator remains the source of truth and validate_symbol spot-checks
that the split agrees with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "Hopping",
    "XiIntegrable",
    "General",
    "Symbol",
    "SymbolReport",
    "harper",
    "gaussian_xi",
    "modulated",
    "validate_symbol",
]


@dataclass(frozen=True)
class Hopping:
    """Finite hop set: a(xi) = sum_delta c_delta exp(i delta . xi).

    Stored as a tuple of (offset, coefficient) pairs sorted by offset so that
    equal hop sets compare and hash equal.
    """

    hops: tuple[tuple[tuple[int, ...], complex], ...]

    @classmethod
    def from_dict(cls, hops: dict) -> "Hopping":
        if not hops:
            raise ValueError("hop set must be nonempty")
        items = []
        dims = set()
        for delta, c in hops.items():
            delta = tuple(int(v) for v in delta)
            dims.add(len(delta))
            items.append((delta, complex(c)))
        if len(dims) != 1:
            raise ValueError("hop offsets must share one dimension")
        items.sort(key=lambda it: it[0])
        return cls(hops=tuple(items))

    def hop_dict(self) -> dict[tuple[int, ...], complex]:
        return dict(self.hops)

    @property
    def max_range(self) -> int:
        """Largest sup-norm reach of any hop; lower bound for band_cut."""
        return max(max(abs(v) for v in delta) for delta, _ in self.hops)

    def is_hermitian_closed(self, tol: float = 1e-12) -> bool:
        d = self.hop_dict()
        for delta, c in d.items():
            mirror = tuple(-v for v in delta)
            if mirror not in d or abs(d[mirror] - np.conj(c)) > tol:
                return False
        return True


@dataclass(frozen=True)
class XiIntegrable:
    """Absolutely integrable in xi beyond a finite box."""

    box_halfwidth: float
    grid_points: int = 32
    tail_tol: float = 1e-12

    def __post_init__(self):
        if self.box_halfwidth <= 0:
            raise ValueError("box_halfwidth must be positive")
        if self.grid_points < 4:
            raise ValueError("grid_points must be at least 4")


@dataclass(frozen=True)
class General:
    """Bounded-growth symbol; assembly must regularize with eps > 0."""

    grid_points: int = 64
    tail_tol: float = 1e-12

    def __post_init__(self):
        if self.grid_points < 4:
            raise ValueError("grid_points must be at least 4")


XiClass = Union[Hopping, XiIntegrable, General]


@dataclass(frozen=True, eq=False)
class Symbol:
    """A symbol a(x, x', xi) with assembly metadata.

    growth_order is the declared polynomial order M in the bound
    |a(x, x', xi)| <= C <x - x'>^M (uniform in xi over the relevant box).
    hermitian declares a(x, x', xi) == conj(a(x', x, xi)).
    """

    dim: int
    evaluate: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    xi_class: XiClass
    growth_order: float = 0.0
    hermitian: bool = False
    name: str = "custom"
    x_part: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    xi_part: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("symbol dimension must be >= 1")
        if self.growth_order < 0:
            raise ValueError("growth_order must be >= 0")
        if (self.x_part is None) != (self.xi_part is None):
            raise ValueError("x_part and xi_part must be given together")

    @property
    def factored(self) -> bool:
        return self.x_part is not None


def _batch_shape(*arrays: np.ndarray) -> tuple:
    return np.broadcast(*(a[..., 0] for a in arrays)).shape


def harper(d: int) -> Symbol:
    """Nearest-neighbor hopping symbol a(xi) = sum_j 2 cos(xi_j).

    Hop set: unit coefficient on +/- e_j for each axis. Hermitian, bounded.
    """
    if d < 2:
        raise ValueError("harper needs dimension >= 2")
    hops: dict[tuple[int, ...], complex] = {}
    for j in range(d):
        e = [0] * d
        e[j] = 1
        hops[tuple(e)] = 1.0 + 0.0j
        hops[tuple(-v for v in e)] = 1.0 + 0.0j

    def evaluate(x, xp, xi):
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        xi = np.asarray(xi, dtype=float)
        val = np.sum(2.0 * np.cos(xi), axis=-1).astype(complex)
        return np.broadcast_to(val, _batch_shape(x, xp, xi))

    return Symbol(
        dim=d,
        evaluate=evaluate,
        xi_class=Hopping.from_dict(hops),
        growth_order=0.0,
        hermitian=True,
        name=f"harper({d})",
    )


def gaussian_xi(
    d: int,
    width: float,
    grid_points: int = 32,
    tail_tol: float = 1e-12,
) -> Symbol:
    """Gaussian fiber symbol a(xi) = exp(-|xi|^2 / (2 width^2)).

    Independent of (x, x'), so it factors trivially. The integration box
    half-width solves exp(-L^2 / (2 w^2)) = tail_tol.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if width <= 0:
        raise ValueError("width must be positive")
    half = width * math.sqrt(2.0 * math.log(1.0 / tail_tol))
    two_w2 = 2.0 * width * width

    def xi_part(xi):
        xi = np.asarray(xi, dtype=float)
        return np.exp(-np.sum(xi * xi, axis=-1) / two_w2).astype(complex)

    def x_part(x, xp):
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        return np.ones(_batch_shape(x, xp), dtype=complex)

    def evaluate(x, xp, xi):
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        xi = np.asarray(xi, dtype=float)
        return np.broadcast_to(xi_part(xi), _batch_shape(x, xp, xi))

    return Symbol(
        dim=d,
        evaluate=evaluate,
        xi_class=XiIntegrable(half, grid_points=grid_points, tail_tol=tail_tol),
        growth_order=0.0,
        hermitian=True,
        name=f"gaussian_xi({d},{width:g})",
        x_part=x_part,
        xi_part=xi_part,
    )


def modulated(
    d: int,
    potential: Callable[[np.ndarray], np.ndarray],
    width: float,
    label: str = "V",
    grid_points: int = 32,
    tail_tol: float = 1e-12,
) -> Symbol:
    """Position-modulated Gaussian a(x, x', xi) = V((x + x') / 2) gauss(xi).

    Hermitian whenever V is real valued (V is evaluated at the midpoint, which
    is symmetric under swapping x and x'). The potential must be vectorized
    over points of shape (..., d).
    """
    base = gaussian_xi(d, width, grid_points=grid_points, tail_tol=tail_tol)
    gauss = base.xi_part

    def x_part(x, xp):
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        mid = 0.5 * (x + xp)
        return np.asarray(potential(mid)).astype(complex) * np.ones(
            _batch_shape(x, xp), dtype=complex
        )

    def evaluate(x, xp, xi):
        xi = np.asarray(xi, dtype=float)
        return x_part(x, xp) * gauss(xi)

    return Symbol(
        dim=d,
        evaluate=evaluate,
        xi_class=base.xi_class,
        growth_order=0.0,
        hermitian=True,
        name=f"modulated({d},{label},{width:g})",
        x_part=x_part,
        xi_part=gauss,
    )


@dataclass
class SymbolReport:
    """Sampled validation of a symbol's declared metadata.

    Constants are fitted from samples, so they are evidence, not proof.
    Soft violations land in notes; only non-finite evaluator output raises.
    """

    name: str
    growth_constant: float
    derivative_constants: dict
    hermitian_defect: Optional[float] = None
    hop_defect: Optional[float] = None
    tail_max: Optional[float] = None
    factor_defect: Optional[float] = None
    notes: list = dataclass_field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.notes


def _xi_samples(symbol: Symbol, rng: np.random.Generator, n: int) -> np.ndarray:
    xc = symbol.xi_class
    if isinstance(xc, Hopping):
        lim = math.pi
    elif isinstance(xc, XiIntegrable):
        lim = xc.box_halfwidth
    else:
        lim = 5.0
    return rng.uniform(-lim, lim, size=(n, symbol.dim))


def validate_symbol(
    symbol: Symbol,
    samples: int = 256,
    box: float = 3.0,
    seed: int = 0,
    fd_step: float = 1e-4,
) -> SymbolReport:
    """Spot-check a symbol against its own declarations.

    Samples random (x, x', xi) triples and fits the growth constant
    C = max |a| / <x - x'>^M along with first and second finite-difference
    derivative constants in x. Checks, where applicable: the hermitian
    identity, agreement of a Hopping evaluator with its hop expansion, the
    declared xi tail of an XiIntegrable symbol, and the x/xi factorization.

    Raises ValueError if the evaluator returns non-finite values. Everything
    else is reported: bound constants are sampled estimates by construction,
    so breaches are recorded in notes for the caller to judge.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-box, box, size=(samples, symbol.dim))
    xp = rng.uniform(-box, box, size=(samples, symbol.dim))
    xi = _xi_samples(symbol, rng, samples)

    vals = np.asarray(symbol.evaluate(x, xp, xi))
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"symbol {symbol.name}: evaluator returned non-finite values")

    bracket = np.sqrt(1.0 + np.sum((x - xp) ** 2, axis=-1))
    weight = bracket ** symbol.growth_order
    growth_constant = float(np.max(np.abs(vals) / weight))

    # Finite-difference derivative constants in x, orders 1 and 2, fitted
    # against the same weight. Axis 1 is representative; the bound is
    # per-direction anyway.
    e = np.zeros(symbol.dim)
    e[0] = fd_step
    vp = np.asarray(symbol.evaluate(x + e, xp, xi))
    vm = np.asarray(symbol.evaluate(x - e, xp, xi))
    d1 = np.abs(vp - vm) / (2 * fd_step)
    d2 = np.abs(vp - 2 * vals + vm) / fd_step**2
    derivative_constants = {
        1: float(np.max(d1 / weight)),
        2: float(np.max(d2 / weight)),
    }

    report = SymbolReport(
        name=symbol.name,
        growth_constant=growth_constant,
        derivative_constants=derivative_constants,
    )

    if symbol.hermitian:
        swapped = np.asarray(symbol.evaluate(xp, x, xi))
        report.hermitian_defect = float(np.max(np.abs(vals - np.conj(swapped))))
        if report.hermitian_defect > 1e-10 * max(1.0, growth_constant):
            report.notes.append(
                f"hermitian defect {report.hermitian_defect:.3e} despite hermitian=True"
            )

    xc = symbol.xi_class
    if isinstance(xc, Hopping):
        recon = np.zeros(samples, dtype=complex)
        for delta, c in xc.hops:
            recon += c * np.exp(1j * xi @ np.asarray(delta, dtype=float))
        report.hop_defect = float(np.max(np.abs(vals - recon)))
        if report.hop_defect > 1e-10 * max(1.0, growth_constant):
            report.notes.append(f"hop expansion defect {report.hop_defect:.3e}")
    elif isinstance(xc, XiIntegrable):
        # Sample the shell between L and 2L where the declared tail applies.
        L = xc.box_halfwidth
        shell = rng.uniform(-2 * L, 2 * L, size=(samples, symbol.dim))
        mask = np.max(np.abs(shell), axis=-1) < L
        shell[mask] += np.sign(shell[mask]) * L  # push inside points out
        tail_vals = np.abs(np.asarray(symbol.evaluate(x, xp, shell)))
        report.tail_max = float(np.max(tail_vals / weight))
        if report.tail_max > xc.tail_tol:
            report.notes.append(
                f"xi tail {report.tail_max:.3e} exceeds declared {xc.tail_tol:.1e}"
            )

    if symbol.factored:
        split = np.asarray(symbol.x_part(x, xp)) * np.asarray(symbol.xi_part(xi))
        report.factor_defect = float(np.max(np.abs(vals - split)))
        if report.factor_defect > 1e-12 * max(1.0, growth_constant):
            report.notes.append(f"factorization defect {report.factor_defect:.3e}")

    return report
