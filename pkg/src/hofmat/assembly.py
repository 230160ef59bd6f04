"""Assembly of generalized block matrices from symbols and magnetic fields.

An operator with symbol a(x, x', xi) and field strength b is represented on
the lattice Z^d of unit cells: cell pair (gamma, gamma') carries the block

    Block[k, k'] = int_O int_O conj(e_k(x)) K_{gamma gamma'}(x, x') e_k'(x') dx dx'

where O = (-1/2, 1/2)^d, e_k(x) = exp(2 pi i k . x) for Fourier modes k with
|k|_inf <= fourier_cutoff, and the kernel is

    K_{gamma gamma'}(x, x') = (2 pi)^{-d} int exp(i xi . (x + gamma - x' - gamma'))
        exp(i b fl(gamma, gamma', x, x')) exp(-eps <xi>) a(x + gamma, x' + gamma', xi) dxi

with fl = cell_pair_flux and <xi> = sqrt(1 + |xi|^2). The magnetic phase
exp(i b flux(gamma, gamma')) is kept out of the stored block and applied at
flatten time, which makes rephasing in b a metadata change.

Stored blocks cover the band |gamma - gamma'|_inf <= band_cut. For hermitian
symbols only ordered pairs are computed and the rest mirrored, so flattened
matrices are hermitian by construction; the mirror identity itself is checked
in the tests via the direct (unmirrored) computation.

Quadratures are fixed Gauss-Legendre tensor rules: space_quad points per axis
on the unit cell, and the xi box prescribed by the symbol's class. Hopping
symbols skip the xi integral entirely: the kernel collapses to a diagonal
lattice sum, leaving a single cell integral per block.
"""

from __future__ import annotations

import itertools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .geometry import MagneticField, cell_pair_flux, flux, gauss_legendre_01
from .symbols import General, Hopping, Symbol, XiIntegrable
from .spectral import operator_norm

__all__ = [
    "TruncationParams",
    "GeneralizedMatrix",
    "lattice_sites",
    "fourier_modes",
    "boundary_site_mask",
    "assemble",
    "assemble_block",
    "kernel_K",
    "flatten",
    "unflatten",
    "truncate_band",
    "rephase",
    "SampledFunction",
    "apply_Ub",
    "apply_Ub_inverse",
    "quadratic_form_oracle",
    "peierls_matrix",
    "EpsilonReport",
    "epsilon_convergence_check",
    "richardson_epsilon",
    "DecayProfile",
    "decay_profile",
    "block_difference_sup",
    "save_matrix",
    "load_matrix",
]

SiteKey = tuple  # tuple of ints, one lattice cell
PairKey = tuple  # (SiteKey, SiteKey)


@dataclass(frozen=True)
class TruncationParams:
    """Finite-volume and band truncation controls.

    lattice_radius: cells |gamma|_inf <= R are kept.
    band_cut: blocks with |gamma - gamma'|_inf <= band_cut are assembled.
    fourier_cutoff: cell modes |k|_inf <= K.
    epsilon: fiber regularization weight exp(-eps <xi>); required positive
        for General symbols, optional otherwise.
    space_quad: Gauss-Legendre points per axis on the unit cell.
    """

    lattice_radius: int
    band_cut: int
    fourier_cutoff: int
    epsilon: float = 0.0
    space_quad: int = 12

    def __post_init__(self):
        if self.lattice_radius < 0:
            raise ValueError("lattice_radius must be >= 0")
        if not 0 <= self.band_cut <= 2 * self.lattice_radius:
            raise ValueError("band_cut must lie in [0, 2 * lattice_radius]")
        if self.fourier_cutoff < 0:
            raise ValueError("fourier_cutoff must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.space_quad < 2:
            raise ValueError("space_quad must be at least 2")


def lattice_sites(radius: int, dim: int) -> np.ndarray:
    """All cells gamma with |gamma|_inf <= radius, lexicographic order."""
    rng = range(-radius, radius + 1)
    return np.array(list(itertools.product(rng, repeat=dim)), dtype=np.int64)


def fourier_modes(cutoff: int, dim: int) -> np.ndarray:
    """All modes k with |k|_inf <= cutoff, lexicographic order."""
    rng = range(-cutoff, cutoff + 1)
    return np.array(list(itertools.product(rng, repeat=dim)), dtype=np.int64)


def boundary_site_mask(sites: np.ndarray, radius: int, width: int = 2) -> np.ndarray:
    """Mark cells within `width` layers of the sample edge |gamma|_inf = radius."""
    if width < 1:
        raise ValueError("width must be >= 1")
    return np.max(np.abs(sites), axis=1) >= radius - width + 1


@lru_cache(maxsize=32)
def _cell_grid(q: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    # Tensor Gauss-Legendre grid on the centered unit cell (-1/2, 1/2)^d.
    x1, w1 = gauss_legendre_01(q)
    x1 = x1 - 0.5
    pts = np.array(list(itertools.product(x1, repeat=d)), dtype=float)
    wts = np.array([np.prod(c) for c in itertools.product(w1, repeat=d)], dtype=float)
    return pts, wts


@lru_cache(maxsize=32)
def _xi_box_grid(halfwidth: float, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    x1, w1 = np.polynomial.legendre.leggauss(n)
    x1 = x1 * halfwidth
    w1 = w1 * halfwidth
    pts = np.array(list(itertools.product(x1, repeat=d)), dtype=float)
    wts = np.array([np.prod(c) for c in itertools.product(w1, repeat=d)], dtype=float)
    return pts, wts


def _xi_grid_for(symbol: Symbol, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    xc = symbol.xi_class
    if isinstance(xc, XiIntegrable):
        return _xi_box_grid(float(xc.box_halfwidth), xc.grid_points, symbol.dim)
    if isinstance(xc, General):
        if epsilon <= 0:
            raise ValueError("General symbols need epsilon > 0")
        halfwidth = np.log(1.0 / xc.tail_tol) / epsilon
        return _xi_box_grid(float(halfwidth), xc.grid_points, symbol.dim)
    raise ValueError("hopping symbols have no xi quadrature box")


@dataclass(eq=False)
class GeneralizedMatrix:
    """Blocks, phases, and bookkeeping of one assembled operator.

    The entry of the flattened matrix at (site gamma, mode k) x (site gamma',
    mode k') is exp(i phase_b * phis[gamma, gamma']) * blocks[gamma, gamma'][k, k'].
    block_b records the field strength the blocks were assembled at; phase_b
    starts equal to it and is the only thing rephase() changes.
    """

    dim: int
    block_b: float
    phase_b: float
    params: TruncationParams
    sites: np.ndarray
    modes: np.ndarray
    site_tuples: list
    site_index: dict
    phis: dict
    blocks: dict
    hermitian: bool
    symbol_name: str
    field_fingerprint: str

    @property
    def b(self) -> float:
        return self.phase_b

    @property
    def n_sites(self) -> int:
        return len(self.site_tuples)

    @property
    def block_dim(self) -> int:
        return self.modes.shape[0]

    @property
    def flat_dim(self) -> int:
        return self.n_sites * self.block_dim

    def phase(self, key: PairKey) -> complex:
        return complex(np.exp(1j * self.phase_b * self.phis[key]))

    def block_norms(self) -> dict:
        return {key: operator_norm(blk) for key, blk in self.blocks.items()}


def _check_compat(symbol: Symbol, field: MagneticField, params: TruncationParams) -> None:
    if symbol.dim != field.dim:
        raise ValueError(
            f"symbol dimension {symbol.dim} does not match field dimension {field.dim}"
        )
    if isinstance(symbol.xi_class, General) and params.epsilon <= 0:
        raise ValueError("General symbols require params.epsilon > 0")


class _Assembler:
    """Shared grids and caches for assembling the blocks of one operator."""

    def __init__(self, symbol: Symbol, field: MagneticField, b: float, params: TruncationParams):
        _check_compat(symbol, field, params)
        self.symbol = symbol
        self.field = field
        self.b = float(b)
        self.params = params
        d = symbol.dim
        self.X, self.W = _cell_grid(params.space_quad, d)
        self.modes = fourier_modes(params.fourier_cutoff, d)
        # E[i, k] = exp(2 pi i x_i . k)
        self.E = np.exp(2j * np.pi * (self.X @ self.modes.T.astype(float)))
        self.Ec = self.E.conj().T
        self.hopping = isinstance(symbol.xi_class, Hopping)
        if self.hopping:
            self.hops = symbol.xi_class.hop_dict()
        else:
            xi, xi_w = _xi_grid_for(symbol, params.epsilon)
            self.xi = xi
            bracket = np.sqrt(1.0 + np.sum(xi * xi, axis=-1))
            coeff = xi_w * (2.0 * np.pi) ** (-d)
            if params.epsilon > 0:
                coeff = coeff * np.exp(-params.epsilon * bracket)
            self.coeff = coeff.astype(complex)
            if symbol.factored:
                self.coeff = self.coeff * np.asarray(symbol.xi_part(xi))
            # phase1[l, i] = exp(i xi_l . x_i), shared by every block
            self.phase1 = np.exp(1j * (xi @ self.X.T))
            self._khat: dict = {}
        if field.is_constant:
            XB = self.X @ field.matrix
            self._phi_xx = 0.5 * (XB @ self.X.T)  # flux(x_i, x_j) on the cell grid
            self._XB = XB

    # -- flux helpers -------------------------------------------------

    def fl_diag(self, g: np.ndarray, gp: np.ndarray) -> np.ndarray:
        """cell_pair_flux on the diagonal x' = x, shape (N,)."""
        return cell_pair_flux(self.field, g, gp, self.X, self.X)

    def fl_matrix(self, g: np.ndarray, gp: np.ndarray) -> np.ndarray:
        """cell_pair_flux on the product grid, shape (N, N)."""
        if self.field.is_constant:
            s = 0.5 * (self._XB @ (gp - g))
            return self._phi_xx + s[:, None] + s[None, :]
        return cell_pair_flux(
            self.field, g, gp, self.X[:, None, :], self.X[None, :, :]
        )

    # -- xi transform cache -------------------------------------------

    def khat(self, delta: SiteKey) -> np.ndarray:
        """(2 pi)^{-d} sum_l coeff_l exp(i xi_l . (x_i - x_j + delta)), cached per offset."""
        cached = self._khat.get(delta)
        if cached is not None:
            return cached
        shift = np.exp(1j * (self.xi @ np.asarray(delta, dtype=float)))
        u = self.coeff * shift
        k = self.phase1.T @ (u[:, None] * self.phase1.conj())
        self._khat[delta] = k
        return k

    def warm_khat(self, deltas: Sequence[SiteKey]) -> None:
        for delta in deltas:
            self.khat(delta)

    # -- block assembly ------------------------------------------------

    def block(self, g_key: SiteKey, gp_key: SiteKey) -> np.ndarray:
        g = np.asarray(g_key, dtype=float)
        gp = np.asarray(gp_key, dtype=float)
        if self.hopping:
            delta = tuple(int(a - b) for a, b in zip(gp_key, g_key))
            c = self.hops.get(delta)
            m = self.modes.shape[0]
            if c is None:
                return np.zeros((m, m), dtype=complex)
            u = self.W * c * np.exp(1j * self.b * self.fl_diag(g, gp))
            return self.Ec @ (u[:, None] * self.E)

        phase = np.exp(1j * self.b * self.fl_matrix(g, gp))
        delta = tuple(int(a - b) for a, b in zip(g_key, gp_key))  # gamma - gamma'
        if self.symbol.factored:
            xpart = np.asarray(
                self.symbol.x_part(self.X[:, None, :] + g, self.X[None, :, :] + gp)
            )
            kernel = self.khat(delta) * xpart * phase
        else:
            kernel = self._generic_kernel(g, gp, delta) * phase
        weighted = kernel * self.W[:, None] * self.W[None, :]
        return self.Ec @ (weighted @ self.E)

    def _generic_kernel(self, g: np.ndarray, gp: np.ndarray, delta: SiteKey) -> np.ndarray:
        n = self.X.shape[0]
        out = np.zeros((n, n), dtype=complex)
        shift = np.exp(1j * (self.xi @ np.asarray(delta, dtype=float)))
        u = self.coeff * shift
        xg = self.X[None, :, None, :] + g
        xpg = self.X[None, None, :, :] + gp
        chunk = max(1, int(2**22 // max(n * n, 1)))
        for lo in range(0, self.xi.shape[0], chunk):
            hi = min(lo + chunk, self.xi.shape[0])
            a_vals = np.asarray(
                self.symbol.evaluate(xg, xpg, self.xi[lo:hi, None, None, :])
            )
            out += np.einsum(
                "l,li,lj,lij->ij",
                u[lo:hi],
                self.phase1[lo:hi],
                self.phase1[lo:hi].conj(),
                a_vals,
                optimize=True,
            )
        return out


def _band_pairs(
    site_tuples: list, sites: np.ndarray, band_cut: int, hermitian: bool
) -> list:
    jobs = []
    n = len(site_tuples)
    for i in range(n):
        start = i if hermitian else 0
        for j in range(start, n):
            if np.max(np.abs(sites[i] - sites[j])) <= band_cut:
                jobs.append((site_tuples[i], site_tuples[j]))
    return jobs


def _pair_phis(field: MagneticField, jobs: list) -> list:
    if not jobs:
        return []
    g = np.array([j[0] for j in jobs], dtype=float)
    gp = np.array([j[1] for j in jobs], dtype=float)
    vals = np.asarray(flux(field, g, gp), dtype=float)
    return [float(v) for v in vals]


def assemble(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    params: TruncationParams,
    n_workers: int = 1,
) -> GeneralizedMatrix:
    """Assemble every block of the band |gamma - gamma'|_inf <= band_cut.

    For hermitian symbols only ordered pairs (gamma <= gamma' in site order)
    are computed; the mirror blocks are the conjugate transposes and the
    mirror phases the negations, so the flattened matrix is hermitian by
    construction. Worker threads only change wall time, never results: the
    job list and all caches are laid down deterministically before the pool
    starts, and results are keyed by job index.
    """
    if not np.isfinite(b):
        raise ValueError("field strength b must be finite")
    asm = _Assembler(symbol, field, b, params)
    d = symbol.dim
    sites = lattice_sites(params.lattice_radius, d)
    site_tuples = [tuple(int(v) for v in s) for s in sites]
    site_index = {s: i for i, s in enumerate(site_tuples)}
    jobs = _band_pairs(site_tuples, sites, params.band_cut, symbol.hermitian)

    if not asm.hopping:
        deltas = []
        seen = set()
        for g, gp in jobs:
            delta = tuple(a - b_ for a, b_ in zip(g, gp))
            if delta not in seen:
                seen.add(delta)
                deltas.append(delta)
        asm.warm_khat(deltas)

    def run(job):
        return asm.block(job[0], job[1])

    if n_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    phi_vals = _pair_phis(field, jobs)
    blocks: dict = {}
    phis: dict = {}
    for (g, gp), blk, phi in zip(jobs, results, phi_vals):
        if g == gp:
            phis[(g, gp)] = 0.0
            blocks[(g, gp)] = 0.5 * (blk + blk.conj().T) if symbol.hermitian else blk
        else:
            phis[(g, gp)] = phi
            blocks[(g, gp)] = blk
            if symbol.hermitian:
                phis[(gp, g)] = -phi
                blocks[(gp, g)] = blk.conj().T

    return GeneralizedMatrix(
        dim=d,
        block_b=float(b),
        phase_b=float(b),
        params=params,
        sites=sites,
        modes=asm.modes,
        site_tuples=site_tuples,
        site_index=site_index,
        phis=phis,
        blocks=blocks,
        hermitian=symbol.hermitian,
        symbol_name=symbol.name,
        field_fingerprint=field.fingerprint(),
    )


def assemble_block(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    gamma: Sequence[int],
    gammap: Sequence[int],
    params: TruncationParams,
) -> np.ndarray:
    """One block on its own; raises if the pair lies outside the band."""
    g = tuple(int(v) for v in gamma)
    gp = tuple(int(v) for v in gammap)
    if max(abs(a - b_) for a, b_ in zip(g, gp)) > params.band_cut:
        raise ValueError(f"pair {g}, {gp} violates band_cut {params.band_cut}")
    asm = _Assembler(symbol, field, b, params)
    return asm.block(g, gp)


def kernel_K(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    gamma: Sequence[int],
    gammap: Sequence[int],
    x: np.ndarray,
    xp: np.ndarray,
    params: TruncationParams,
) -> np.ndarray:
    """Pointwise block kernel K_{gamma gamma'}(x, x'), batched over (..., d).

    Always walks the generic xi quadrature, so it doubles as an independent
    cross-check of the cached fast paths in assemble. Hopping symbols are
    rejected: their kernel is distributional in x - x'.
    """
    if isinstance(symbol.xi_class, Hopping):
        raise ValueError("hopping kernels are distributional; use assemble_block")
    xi, xi_w = _xi_grid_for(symbol, params.epsilon)
    d = symbol.dim
    g = np.asarray(gamma, dtype=float)
    gp = np.asarray(gammap, dtype=float)
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    batch = np.broadcast(x[..., 0], xp[..., 0]).shape
    xf = np.broadcast_to(x, batch + (d,)).reshape(-1, d)
    xpf = np.broadcast_to(xp, batch + (d,)).reshape(-1, d)

    bracket = np.sqrt(1.0 + np.sum(xi * xi, axis=-1))
    coeff = xi_w * (2.0 * np.pi) ** (-d)
    if params.epsilon > 0:
        coeff = coeff * np.exp(-params.epsilon * bracket)

    arg = (xf - xpf + (g - gp)) @ xi.T  # (N, L)
    vals = np.zeros(xf.shape[0], dtype=complex)
    chunk = max(1, int(2**22 // max(xf.shape[0], 1)))
    for lo in range(0, xi.shape[0], chunk):
        hi = min(lo + chunk, xi.shape[0])
        a_vals = np.asarray(
            symbol.evaluate(xf[None, :, :] + g, xpf[None, :, :] + gp, xi[lo:hi, None, :])
        )
        vals += np.einsum(
            "l,nl,ln->n", coeff[lo:hi].astype(complex), np.exp(1j * arg[:, lo:hi]), a_vals
        )
    fl = cell_pair_flux(field, g, gp, xf, xpf)
    vals = vals * np.exp(1j * b * fl)
    return vals.reshape(batch) if batch else vals[0]


def flatten(M: GeneralizedMatrix) -> np.ndarray:
    """Dense matrix, site-major and mode-minor: row (gamma, k) sits at
    site_index[gamma] * block_dim + mode_index[k].

    For hermitian operators the lower triangle is written as the exact
    conjugate transpose of the upper, so hermiticity survives rounding.
    """
    n, m = M.n_sites, M.block_dim
    out = np.zeros((n * m, n * m), dtype=complex)
    for (g, gp), blk in M.blocks.items():
        i, j = M.site_index[g], M.site_index[gp]
        if M.hermitian and i > j:
            continue
        entry = np.exp(1j * M.phase_b * M.phis[(g, gp)]) * blk
        out[i * m : (i + 1) * m, j * m : (j + 1) * m] = entry
        if M.hermitian and i < j:
            out[j * m : (j + 1) * m, i * m : (i + 1) * m] = entry.conj().T
    return out


def unflatten(flat: np.ndarray, template: GeneralizedMatrix) -> GeneralizedMatrix:
    """Slice a dense matrix back into the template's block layout.

    Phases are folded into the extracted blocks (phis reset to zero), so
    flatten(unflatten(flatten(M), M)) reproduces flatten(M) bit for bit.
    """
    n, m = template.n_sites, template.block_dim
    if flat.shape != (n * m, n * m):
        raise ValueError(f"expected shape {(n * m, n * m)}, got {flat.shape}")
    blocks = {}
    phis = {}
    for g, gp in template.blocks:
        i, j = template.site_index[g], template.site_index[gp]
        blocks[(g, gp)] = flat[i * m : (i + 1) * m, j * m : (j + 1) * m].copy()
        phis[(g, gp)] = 0.0
    return GeneralizedMatrix(
        dim=template.dim,
        block_b=template.block_b,
        phase_b=0.0,
        params=template.params,
        sites=template.sites,
        modes=template.modes,
        site_tuples=template.site_tuples,
        site_index=template.site_index,
        phis=phis,
        blocks=blocks,
        hermitian=False,
        symbol_name=template.symbol_name,
        field_fingerprint=template.field_fingerprint,
    )


def truncate_band(M: GeneralizedMatrix, t: float) -> GeneralizedMatrix:
    """Drop blocks with Euclidean offset |gamma - gamma'|_2 >= |t|^{-1/2}.

    t = 0 keeps everything (the cutoff is infinite). Blocks are shared with
    the input, not copied.
    """
    t = float(t)
    if t == 0.0:
        keep = set(M.blocks)
    else:
        cutoff = abs(t) ** -0.5
        keep = set()
        for g, gp in M.blocks:
            dist = np.linalg.norm(np.asarray(g, dtype=float) - np.asarray(gp, dtype=float))
            if dist < cutoff:
                keep.add((g, gp))
    blocks = {k: M.blocks[k] for k in M.blocks if k in keep}
    phis = {k: M.phis[k] for k in M.blocks if k in keep}
    return GeneralizedMatrix(
        dim=M.dim,
        block_b=M.block_b,
        phase_b=M.phase_b,
        params=M.params,
        sites=M.sites,
        modes=M.modes,
        site_tuples=M.site_tuples,
        site_index=M.site_index,
        phis=phis,
        blocks=blocks,
        hermitian=M.hermitian,
        symbol_name=M.symbol_name,
        field_fingerprint=M.field_fingerprint,
    )


def rephase(M: GeneralizedMatrix, s: float) -> GeneralizedMatrix:
    """Shift the phase field strength by s, keeping every block untouched.

    rephase(rephase(M, s), u) equals rephase(M, s + u) and rephase(M, 0) is
    M itself entrywise: the phases form a one-parameter group.
    """
    return GeneralizedMatrix(
        dim=M.dim,
        block_b=M.block_b,
        phase_b=M.phase_b + float(s),
        params=M.params,
        sites=M.sites,
        modes=M.modes,
        site_tuples=M.site_tuples,
        site_index=M.site_index,
        phis=M.phis,
        blocks=M.blocks,
        hermitian=M.hermitian,
        symbol_name=M.symbol_name,
        field_fingerprint=M.field_fingerprint,
    )


@dataclass
class SampledFunction:
    """A function sampled on the cell grids of a patch of lattice cells."""

    dim: int
    cells: list
    grid: np.ndarray
    weights: np.ndarray
    values: dict

    def norm(self) -> float:
        total = 0.0
        for v in self.values.values():
            total += float(np.sum(self.weights * np.abs(v) ** 2))
        return float(np.sqrt(total))

    def mode_coefficients(self, modes: np.ndarray) -> dict:
        """Per-cell Fourier coefficients c_k = int v(x) conj(e_k(x)) dx."""
        E = np.exp(2j * np.pi * (self.grid @ modes.T.astype(float)))
        return {
            cell: (E.conj() * (self.weights * v)[:, None]).sum(axis=0)
            for cell, v in self.values.items()
        }

    def flat_coefficients(self, site_tuples: list, modes: np.ndarray) -> np.ndarray:
        """Coefficient vector aligned with flatten()'s site-major layout."""
        coeffs = self.mode_coefficients(modes)
        m = modes.shape[0]
        out = np.zeros(len(site_tuples) * m, dtype=complex)
        for i, cell in enumerate(site_tuples):
            if cell in coeffs:
                out[i * m : (i + 1) * m] = coeffs[cell]
        return out


def apply_Ub(
    field: MagneticField,
    b: float,
    f: Callable[[np.ndarray], np.ndarray],
    support_radius: int,
    params: TruncationParams,
) -> SampledFunction:
    """Magnetic cell decomposition of f: cell gamma holds the samples

        exp(-i b flux(x + gamma, gamma)) f(x + gamma),  x in the cell grid.

    The per-cell phase is unimodular, so the sampled norm equals the plain
    sampled norm of f; apply_Ub_inverse removes the phases again.
    """
    if support_radius > params.lattice_radius:
        raise ValueError("support_radius exceeds lattice_radius")
    X, W = _cell_grid(params.space_quad, field.dim)
    cells = [
        tuple(int(v) for v in s) for s in lattice_sites(support_radius, field.dim)
    ]
    values = {}
    for cell in cells:
        g = np.asarray(cell, dtype=float)
        shifted = X + g
        ph = np.exp(-1j * b * flux(field, shifted, np.broadcast_to(g, shifted.shape)))
        values[cell] = ph * np.asarray(f(shifted), dtype=complex)
    return SampledFunction(dim=field.dim, cells=cells, grid=X, weights=W, values=values)


def apply_Ub_inverse(field: MagneticField, b: float, sf: SampledFunction) -> SampledFunction:
    """Undo apply_Ub's phases, returning plain cell samples of the function."""
    values = {}
    for cell, v in sf.values.items():
        g = np.asarray(cell, dtype=float)
        shifted = sf.grid + g
        ph = np.exp(1j * b * flux(field, shifted, np.broadcast_to(g, shifted.shape)))
        values[cell] = ph * v
    return SampledFunction(
        dim=sf.dim, cells=list(sf.cells), grid=sf.grid, weights=sf.weights, values=values
    )


def cellwise_mode_function(
    coeffs: dict[tuple[int, ...], np.ndarray], modes: np.ndarray
) -> Callable[[np.ndarray], np.ndarray]:
    """Function equal to sum_k c[k] exp(2 pi i k (x - gamma)) on each open
    cell gamma + (-1/2, 1/2)^d listed in coeffs, and zero elsewhere
    (including the cell walls).

    Such functions lie exactly in the span of the cell mode basis, so the
    assembled quadratic form carries no basis truncation error for them and
    comparisons against the continuum oracle isolate the operator
    discretization itself. Pair with quadratic_form_oracle(cell_panels=True)
    since they jump across cell walls.
    """
    modes = np.asarray(modes, dtype=float)
    frozen = {tuple(int(c) for c in cell): np.asarray(c_k, dtype=complex) for cell, c_k in coeffs.items()}
    for cell, c_k in frozen.items():
        if c_k.shape != (modes.shape[0],):
            raise ValueError(f"cell {cell}: need one coefficient per mode, got shape {c_k.shape}")

    def fn(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1], dtype=complex)
        for cell, c_k in frozen.items():
            loc = pts - np.asarray(cell, dtype=float)
            inside = np.all((loc > -0.5) & (loc < 0.5), axis=-1)
            if not np.any(inside):
                continue
            phases = np.exp(2j * np.pi * (loc[inside] @ modes.T))
            out[inside] = phases @ c_k
        return out

    return fn


def _axis_rule(extent: float, nodes: int, cell_panels: bool) -> tuple[np.ndarray, np.ndarray]:
    # One-dimensional rule on [-extent, extent]: a single Gauss-Legendre rule,
    # or a composite rule with panels split at the half-integer cell walls so
    # that cellwise-smooth integrands stay smooth inside every panel.
    base_x, base_w = np.polynomial.legendre.leggauss(nodes)
    if not cell_panels:
        return base_x * extent, base_w * extent
    walls = [-extent]
    wall = np.floor(-extent + 0.5) + 0.5  # first half-integer at or below -extent
    while wall <= -extent:
        wall += 1.0
    while wall < extent:
        walls.append(wall)
        wall += 1.0
    walls.append(extent)
    xs = []
    ws = []
    for lo, hi in zip(walls, walls[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        xs.append(mid + half * base_x)
        ws.append(half * base_w)
    return np.concatenate(xs), np.concatenate(ws)


def quadratic_form_oracle(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    f: Callable[[np.ndarray], np.ndarray],
    g: Callable[[np.ndarray], np.ndarray],
    extent: float,
    nodes: int,
    epsilon: float = 0.0,
    tail_tol: float = 1e-8,
    cell_panels: bool = False,
) -> complex:
    """Brute-force quadratic form <g, Op f> by triple tensor quadrature.

    Integrates conj(g(x)) K(x, x') f(x') over [-extent, extent]^{2d} with the
    full-space kernel K(x, x') = (2 pi)^{-d} int exp(i xi (x - x'))
    exp(i b flux(x, x')) exp(-eps <xi>) a(x, x', xi) dxi. Completely
    independent of the lattice decomposition, so it serves as ground truth
    for assembled matrices.

    cell_panels splits the spatial rule at the half-integer cell walls
    (nodes then counts points per panel); use it for test functions that are
    smooth only within lattice cells.

    Raises if f or g is not negligible on the integration box faces
    (tail_tol relative to the interior maximum), or if the symbol is Hopping
    (no integrable fiber), or General without epsilon > 0.
    """
    if isinstance(symbol.xi_class, Hopping):
        raise ValueError("the oracle needs an integrable fiber; got a hopping symbol")
    if isinstance(symbol.xi_class, General) and epsilon <= 0:
        raise ValueError("General symbols require epsilon > 0")
    if extent <= 0 or nodes < 4:
        raise ValueError("need extent > 0 and nodes >= 4")
    d = symbol.dim
    x1, w1 = _axis_rule(extent, nodes, cell_panels)
    pts = np.array(list(itertools.product(x1, repeat=d)), dtype=float)
    wts = np.array([np.prod(c) for c in itertools.product(w1, repeat=d)], dtype=float)

    f_vals = np.asarray(f(pts), dtype=complex)
    g_vals = np.asarray(g(pts), dtype=complex)
    interior = max(np.abs(f_vals).max(), np.abs(g_vals).max())
    faces = []
    for j in range(d):
        for sign in (-extent, extent):
            face = pts.copy()
            face[:, j] = sign
            faces.append(face)
    face_pts = np.concatenate(faces, axis=0)
    face_max = max(
        float(np.abs(np.asarray(f(face_pts))).max()),
        float(np.abs(np.asarray(g(face_pts))).max()),
    )
    if face_max > tail_tol * interior:
        raise ValueError(
            f"test functions reach {face_max:.3e} on the box faces; enlarge extent"
        )

    phi = _pairwise_flux_matrix(field, pts)
    M0 = (
        (wts * g_vals.conj())[:, None]
        * (wts * f_vals)[None, :]
        * np.exp(1j * b * phi)
    )

    xi, xi_w = _xi_grid_for(symbol, epsilon)
    bracket = np.sqrt(1.0 + np.sum(xi * xi, axis=-1))
    coeff = (xi_w * (2.0 * np.pi) ** (-d)).astype(complex)
    if epsilon > 0:
        coeff = coeff * np.exp(-epsilon * bracket)

    U = np.exp(1j * (xi @ pts.T))  # (L, N)
    if symbol.factored:
        M1 = M0 * np.asarray(symbol.x_part(pts[:, None, :], pts[None, :, :]))
        coeff = coeff * np.asarray(symbol.xi_part(xi))
        T = U @ M1  # (L, N)
        s = np.einsum("ln,ln->l", T, U.conj())
        return complex(np.sum(coeff * s))

    total = 0.0 + 0.0j
    for l in range(xi.shape[0]):
        a_vals = np.asarray(
            symbol.evaluate(pts[:, None, :], pts[None, :, :], xi[l])
        )
        total += coeff[l] * (U[l] @ (M0 * a_vals) @ U[l].conj())
    return complex(total)


def _pairwise_flux_matrix(field: MagneticField, pts: np.ndarray) -> np.ndarray:
    if field.is_constant:
        return 0.5 * ((pts @ field.matrix) @ pts.T)
    return np.asarray(flux(field, pts[:, None, :], pts[None, :, :]))


def peierls_matrix(
    hops: Union[Hopping, dict],
    field: MagneticField,
    b: float,
    radius: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete magnetic hopping matrix on cells |gamma|_inf <= radius.

    Entry (gamma, gamma') is exp(i b flux(gamma, gamma')) c_{gamma' - gamma}.
    The hop set must be hermitian-closed (c_{-delta} = conj(c_delta)); each
    unordered pair is written once and mirrored exactly, so the matrix is
    hermitian by construction. Returns (matrix, sites).
    """
    hop_items = hops.hop_dict() if isinstance(hops, Hopping) else dict(hops)
    if not hop_items:
        raise ValueError("hop set must be nonempty")
    d = field.dim
    for delta, c in hop_items.items():
        if len(delta) != d:
            raise ValueError(f"hop {delta} does not match dimension {d}")
        mirror = tuple(-v for v in delta)
        if mirror not in hop_items or abs(hop_items[mirror] - np.conj(c)) > 1e-12:
            raise ValueError(f"hop set is not hermitian-closed at {delta}")

    sites = lattice_sites(radius, d)
    n = sites.shape[0]
    span = 2 * radius + 1
    H = np.zeros((n, n), dtype=complex)
    zero = (0,) * d
    for delta, c in sorted(hop_items.items()):
        if delta == zero:
            H[np.arange(n), np.arange(n)] += c.real
            continue
        if delta < zero:
            continue  # handled by the mirror of its positive partner
        targets = sites + np.asarray(delta, dtype=np.int64)
        inside = np.all(np.abs(targets) <= radius, axis=1)
        src = np.nonzero(inside)[0]
        if src.size == 0:
            continue
        tgt_idx = np.ravel_multi_index(
            (targets[inside] + radius).T, dims=(span,) * d
        )
        phi = np.asarray(
            flux(field, sites[inside].astype(float), targets[inside].astype(float))
        )
        vals = np.exp(1j * b * phi) * c
        H[src, tgt_idx] += vals
        H[tgt_idx, src] += vals.conj()
    return H, sites


@dataclass
class EpsilonReport:
    """Behavior of the assembled matrix as the fiber weight eps decreases.

    diffs_to_limit compares against the eps = 0 assembly when that limit is
    itself assemblable (XiIntegrable symbols). Hopping symbols ignore eps
    altogether, recorded in epsilon_ignored. decreasing is None when fewer
    than two epsilons leave nothing to compare.
    """

    eps_list: list
    cauchy_diffs: list
    diffs_to_limit: Optional[list]
    epsilon_ignored: bool
    decreasing: Optional[bool]
    notes: list = dataclass_field(default_factory=list)


def epsilon_convergence_check(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    params: TruncationParams,
    eps_list: Sequence[float],
) -> EpsilonReport:
    """Assemble at each eps and report convergence evidence.

    eps_list must be positive and strictly decreasing. The verdict
    `decreasing` refers to diffs_to_limit when the eps = 0 reference exists
    and to the Cauchy differences otherwise; it is recorded, not raised, so
    callers decide what counts as failure.
    """
    eps_arr = [float(e) for e in eps_list]
    if not eps_arr:
        raise ValueError("eps_list must be nonempty")
    if any(e <= 0 for e in eps_arr):
        raise ValueError("eps values must be positive")
    if any(b_ >= a_ for a_, b_ in zip(eps_arr, eps_arr[1:])):
        raise ValueError("eps_list must be strictly decreasing")

    def at(eps: float) -> np.ndarray:
        p = TruncationParams(
            lattice_radius=params.lattice_radius,
            band_cut=params.band_cut,
            fourier_cutoff=params.fourier_cutoff,
            epsilon=eps,
            space_quad=params.space_quad,
        )
        return flatten(assemble(symbol, field, b, p))

    if isinstance(symbol.xi_class, Hopping):
        cauchy = [0.0] * max(len(eps_arr) - 1, 0)
        return EpsilonReport(
            eps_list=eps_arr,
            cauchy_diffs=cauchy,
            diffs_to_limit=[0.0] * len(eps_arr),
            epsilon_ignored=True,
            decreasing=None,
            notes=["hopping symbols ignore the eps weight entirely"],
        )

    mats = [at(e) for e in eps_arr]
    cauchy = [operator_norm(a - c) for a, c in zip(mats, mats[1:])]
    diffs_to_limit = None
    if isinstance(symbol.xi_class, XiIntegrable):
        ref = at(0.0)
        diffs_to_limit = [operator_norm(m - ref) for m in mats]
        series = diffs_to_limit
    else:
        series = cauchy
    decreasing = None
    if len(series) >= 2:
        decreasing = all(a > c for a, c in zip(series, series[1:]))
    notes = []
    if decreasing is False:
        notes.append("differences failed to decrease along eps_list")
    return EpsilonReport(
        eps_list=eps_arr,
        cauchy_diffs=cauchy,
        diffs_to_limit=diffs_to_limit,
        epsilon_ignored=False,
        decreasing=decreasing,
        notes=notes,
    )


def richardson_epsilon(
    symbol: Symbol,
    field: MagneticField,
    b: float,
    params: TruncationParams,
    eps: float,
) -> np.ndarray:
    """First-order extrapolation toward eps = 0 from assemblies at eps and
    eps / 2: the weight exp(-eps <xi>) is linear in eps to leading order, so
    2 H(eps / 2) - H(eps) cancels the linear term."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def at(e: float) -> np.ndarray:
        p = TruncationParams(
            lattice_radius=params.lattice_radius,
            band_cut=params.band_cut,
            fourier_cutoff=params.fourier_cutoff,
            epsilon=e,
            space_quad=params.space_quad,
        )
        return flatten(assemble(symbol, field, b, p))

    return 2.0 * at(eps / 2.0) - at(eps)


@dataclass
class DecayProfile:
    """Off-diagonal block decay grouped by site offset.

    offset_norms maps gamma' - gamma to the largest block spectral norm at
    that offset. shell_dist / shell_max group offsets by sup norm shells.
    exponent and constant come from the log-log fit
    max norm ~ constant * <offset>^{-exponent} over nonzero offsets, and
    weighted_constant = max over nonzero offsets of
    norm * <offset>^{weight_power} / diagonal norm.
    """

    offset_norms: dict
    shell_dist: np.ndarray
    shell_max: np.ndarray
    exponent: float
    constant: float
    diagonal_norm: float
    weight_power: float
    weighted_constant: float


def decay_profile(M: GeneralizedMatrix, weight_power: Optional[float] = None) -> DecayProfile:
    """Measure how block norms fall off with the site offset."""
    if weight_power is None:
        weight_power = 2 * M.dim + 1
    offset_norms: dict = {}
    for (g, gp), blk in M.blocks.items():
        delta = tuple(b_ - a_ for a_, b_ in zip(g, gp))
        nrm = operator_norm(blk)
        if delta not in offset_norms or nrm > offset_norms[delta]:
            offset_norms[delta] = nrm
    if all(v == 0.0 for v in offset_norms.values()):
        raise ValueError("all blocks vanish; no decay profile to fit")

    shells: dict = {}
    for delta, nrm in offset_norms.items():
        s = max(abs(v) for v in delta)
        shells[s] = max(shells.get(s, 0.0), nrm)
    shell_dist = np.array(sorted(shells), dtype=float)
    shell_max = np.array([shells[int(s)] for s in shell_dist])

    diag = offset_norms.get((0,) * M.dim, 0.0)
    dists = []
    norms = []
    weighted = 0.0
    for delta, nrm in offset_norms.items():
        if all(v == 0 for v in delta):
            continue
        bracket = float(np.sqrt(1.0 + sum(v * v for v in delta)))
        if nrm > 0:
            dists.append(bracket)
            norms.append(nrm)
        weighted = max(weighted, nrm * bracket**weight_power)

    if len(dists) >= 2:
        A = np.column_stack([np.log(dists), np.ones(len(dists))])
        coef, _, _, _ = np.linalg.lstsq(A, np.log(norms), rcond=None)
        exponent = -float(coef[0])
        constant = float(np.exp(coef[1]))
    else:
        exponent = float("inf")
        constant = float(norms[0]) if norms else 0.0

    return DecayProfile(
        offset_norms=offset_norms,
        shell_dist=shell_dist,
        shell_max=shell_max,
        exponent=exponent,
        constant=constant,
        diagonal_norm=diag,
        weight_power=float(weight_power),
        weighted_constant=(weighted / diag if diag > 0 else float("inf")),
    )


def block_difference_sup(
    Ma: GeneralizedMatrix, Mb: GeneralizedMatrix, bracket_power: float
) -> float:
    """sup over pairs of ||block_a - block_b|| <gamma - gamma'>^power.

    Compares raw blocks (phases excluded), which is the quantity that scales
    linearly in |b_a - b_b|. Both operands must share their block layout.
    """
    if set(Ma.blocks) != set(Mb.blocks):
        raise ValueError("operands carry different block sets")
    out = 0.0
    for key, blk in Ma.blocks.items():
        g, gp = key
        bracket = float(np.sqrt(1.0 + sum((a_ - b_) ** 2 for a_, b_ in zip(g, gp))))
        out = max(out, operator_norm(blk - Mb.blocks[key]) * bracket**bracket_power)
    return out


# -- binary cache ------------------------------------------------------

_MAGIC = b"HFMBLK01"


def save_matrix(M: GeneralizedMatrix, path: str) -> None:
    """Write an assembled matrix to a little-endian binary cache file.

    Layout: magic, header struct (dimensions, truncation, field strengths,
    flags), two length-prefixed utf-8 strings (symbol name, field
    fingerprint), then per stored pair the two sites as int64, the phase
    argument as float64, and the block as complex128, all little-endian and
    in deterministic block order. load_matrix inverts bit for bit.
    """
    p = M.params
    header = struct.pack(
        "<IiiiiidddB7x",
        M.dim,
        p.lattice_radius,
        p.band_cut,
        p.fourier_cutoff,
        p.space_quad,
        len(M.blocks),
        p.epsilon,
        M.block_b,
        M.phase_b,
        1 if M.hermitian else 0,
    )
    name_b = M.symbol_name.encode("utf-8")
    fp_b = M.field_fingerprint.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        fh.write(struct.pack("<I", len(name_b)))
        fh.write(name_b)
        fh.write(struct.pack("<I", len(fp_b)))
        fh.write(fp_b)
        for (g, gp), blk in M.blocks.items():
            fh.write(np.asarray(g, dtype="<i8").tobytes())
            fh.write(np.asarray(gp, dtype="<i8").tobytes())
            fh.write(struct.pack("<d", M.phis[(g, gp)]))
            fh.write(np.ascontiguousarray(blk, dtype="<c16").tobytes())


def load_matrix(path: str) -> GeneralizedMatrix:
    """Read a cache file written by save_matrix; raises on bad magic or a
    truncated payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"not a block cache file (magic {raw[:8]!r})")
    off = 8
    head_fmt = "<IiiiiidddB7x"
    head_size = struct.calcsize(head_fmt)
    dim, radius, band, cutoff, quad, n_pairs, eps, block_b, phase_b, herm = struct.unpack_from(
        head_fmt, raw, off
    )
    off += head_size

    def read_str(off: int) -> tuple[str, int]:
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        s = raw[off : off + ln].decode("utf-8")
        return s, off + ln

    name, off = read_str(off)
    fp, off = read_str(off)

    params = TruncationParams(
        lattice_radius=radius,
        band_cut=band,
        fourier_cutoff=cutoff,
        epsilon=eps,
        space_quad=quad,
    )
    sites = lattice_sites(radius, dim)
    modes = fourier_modes(cutoff, dim)
    site_tuples = [tuple(int(v) for v in s) for s in sites]
    site_index = {s: i for i, s in enumerate(site_tuples)}
    m = modes.shape[0]
    blk_bytes = m * m * 16
    blocks = {}
    phis = {}
    for _ in range(n_pairs):
        g = tuple(int(v) for v in np.frombuffer(raw, dtype="<i8", count=dim, offset=off))
        off += 8 * dim
        gp = tuple(int(v) for v in np.frombuffer(raw, dtype="<i8", count=dim, offset=off))
        off += 8 * dim
        (phi,) = struct.unpack_from("<d", raw, off)
        off += 8
        blk = np.frombuffer(raw, dtype="<c16", count=m * m, offset=off).reshape(m, m).copy()
        off += blk_bytes
        blocks[(g, gp)] = blk
        phis[(g, gp)] = phi
    if off != len(raw):
        raise ValueError("trailing bytes in cache file")
    return GeneralizedMatrix(
        dim=dim,
        block_b=block_b,
        phase_b=phase_b,
        params=params,
        sites=sites,
        modes=modes,
        site_tuples=site_tuples,
        site_index=site_index,
        phis=phis,
        blocks=blocks,
        hermitian=bool(herm),
        symbol_name=name,
        field_fingerprint=fp,
    )
