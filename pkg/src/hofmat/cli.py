"""Command line front end.

Subcommands:

    butterfly     eigenvalue sweep over a grid of field strengths
    spectrum      one spectrum, optionally with gap detection
    holder        Hausdorff spectral distances against a shrinking delta list
    edges         extreme eigenvalues and one tracked gap across a b grid
    chain         four-step comparison chain behind the spectral estimate
    verify        invariant suite, machine-readable pass/fail
    oracle-check  assembled quadratic forms against the brute-force oracle
    assemble      assemble once and write the binary block cache

Every command takes --config (JSON, strictly validated: unknown keys are
errors), --out (output directory), --threads (worker threads; the
HOFMAT_THREADS environment variable is the fallback, then 1), and --seed
(overrides the config seed where sampling is involved).

Exit codes: 0 success, 1 invariant failure (a mathematical check failed),
2 configuration error. CSV outputs are byte-deterministic for a fixed
config: floats are written with repr (shortest round-trip form), rows are
ordered deterministically, and worker threads never affect values. Timing
data goes only into the JSON summaries, never into CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import assembly, geometry, spectral, symbols
from .assembly import (
    TruncationParams,
    apply_Ub,
    apply_Ub_inverse,
    assemble,
    boundary_site_mask,
    cellwise_mode_function,
    epsilon_convergence_check,
    flatten,
    fourier_modes,
    lattice_sites,
    load_matrix,
    peierls_matrix,
    quadratic_form_oracle,
    rephase,
    save_matrix,
    truncate_band,
)
from .geometry import MagneticField, flux, validate_field, vector_potential
from .spectral import (
    drop_boundary_states,
    eigenvalues_hermitian,
    eigh_checked,
    find_gaps,
    hausdorff,
    hermitian_defect,
    holder_fit,
    operator_norm,
    random_hermitian,
    riesz_project,
    track_gap_edge,
)
from .symbols import Hopping, Symbol, gaussian_xi, harper, modulated, validate_symbol

__all__ = [
    "ConfigError",
    "InvariantFailure",
    "main",
    "entry",
    "four_step_distances",
    "ChainResult",
    "stable_under_halving",
    "resolve_threads",
]

ENV_THREADS = "HOFMAT_THREADS"

_MISSING = object()


class ConfigError(Exception):
    """Bad or unknown configuration input; maps to exit code 2."""


class InvariantFailure(Exception):
    """A mathematical invariant failed at runtime; maps to exit code 1."""


_TYPES = {
    "int": (int,),
    "number": (int, float),
    "str": (str,),
    "bool": (bool,),
    "list": (list,),
    "dict": (dict,),
}


class Section:
    """One config object with strict key consumption.

    Every key must be taken exactly once; leftovers raise ConfigError when
    done() runs, so typos in config files fail loudly instead of being
    ignored.
    """

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        self._d = dict(data)
        self._path = path

    def take(self, key: str, expect: str, default=_MISSING):
        if key in self._d:
            val = self._d.pop(key)
        elif default is not _MISSING:
            return default
        else:
            raise ConfigError(f"{self._path}.{key} is required")
        kinds = _TYPES[expect]
        if isinstance(val, bool) and expect != "bool":
            raise ConfigError(f"{self._path}.{key}: expected {expect}, got bool")
        if not isinstance(val, kinds):
            raise ConfigError(
                f"{self._path}.{key}: expected {expect}, got {type(val).__name__}"
            )
        return val

    def sub(self, key: str, default=_MISSING) -> "Section":
        val = self.take(key, "dict", default)
        if val is default and val is not _MISSING:
            return val
        return Section(val, f"{self._path}.{key}")

    def done(self) -> None:
        if self._d:
            keys = ", ".join(sorted(self._d))
            raise ConfigError(f"{self._path}: unknown keys: {keys}")


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return repr(f) if math.isfinite(f) else ("nan" if math.isnan(f) else repr(f))
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence], cfg_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={cfg_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_summary(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads must be >= 1")
        return flag
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            val = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}={env!r} is not an integer")
        if val < 1:
            raise ConfigError(f"{ENV_THREADS} must be >= 1")
        return val
    return 1


# -- config builders ----------------------------------------------------


def build_field(sec: Section) -> MagneticField:
    kind = sec.take("kind", "str", "constant")
    if kind == "constant":
        matrix = sec.take("matrix", "list")
        sec.done()
        try:
            return MagneticField.constant(np.asarray(matrix, dtype=float))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"field.matrix: {e}")
    if kind == "cosine":
        base = float(sec.take("base", "number"))
        amplitude = float(sec.take("amplitude", "number"))
        wavevector = sec.take("wavevector", "list")
        sec.done()
        try:
            wv = np.asarray(wavevector, dtype=float)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"field.wavevector: {e}")
        if wv.shape != (2,):
            raise ConfigError("field.wavevector must have length 2 (cosine fields are planar)")

        def component(j, k, x):
            val = base + amplitude * np.cos(np.asarray(x, dtype=float) @ wv)
            if j == k:
                return np.zeros_like(val)
            return val if (j, k) == (1, 2) else -val

        return MagneticField.smooth(
            2, component, label=f"cosine(base={base:g},amp={amplitude:g},wv={wv.tolist()})"
        )
    raise ConfigError(f"field.kind: unknown kind {kind!r}")


def _build_potential(sec: Section) -> tuple[Callable, str]:
    kind = sec.take("kind", "str")
    if kind != "cosine":
        raise ConfigError(f"potential.kind: unknown kind {kind!r}")
    amplitude = float(sec.take("amplitude", "number"))
    wavevector = sec.take("wavevector", "list")
    phase = float(sec.take("phase", "number", 0.0))
    sec.done()
    wv = np.asarray(wavevector, dtype=float)

    def V(x):
        return amplitude * np.cos(np.asarray(x, dtype=float) @ wv + phase)

    return V, f"cos(a={amplitude:g})"


def build_symbol(sec: Section) -> Symbol:
    kind = sec.take("kind", "str")
    dim = int(sec.take("dim", "int", 2))
    try:
        if kind == "harper":
            sec.done()
            return harper(dim)
        if kind == "gaussian":
            width = float(sec.take("width", "number"))
            grid_points = int(sec.take("grid_points", "int", 32))
            sec.done()
            return gaussian_xi(dim, width, grid_points=grid_points)
        if kind == "modulated":
            width = float(sec.take("width", "number"))
            grid_points = int(sec.take("grid_points", "int", 32))
            pot, label = _build_potential(sec.sub("potential"))
            sec.done()
            return modulated(dim, pot, width, label=label, grid_points=grid_points)
    except ValueError as e:
        raise ConfigError(f"symbol: {e}")
    raise ConfigError(f"symbol.kind: unknown kind {kind!r}")


def build_truncation(sec: Section) -> TruncationParams:
    try:
        params = TruncationParams(
            lattice_radius=int(sec.take("lattice_radius", "int")),
            band_cut=int(sec.take("band_cut", "int")),
            fourier_cutoff=int(sec.take("fourier_cutoff", "int")),
            epsilon=float(sec.take("epsilon", "number", 0.0)),
            space_quad=int(sec.take("space_quad", "int", 12)),
        )
    except ValueError as e:
        raise ConfigError(f"truncation: {e}")
    sec.done()
    return params


def _b_grid(sec: Section) -> list[float]:
    values = sec.take("values", "list", None)
    if values is not None:
        sec.done()
        grid = [float(v) for v in values]
    else:
        start = float(sec.take("start", "number"))
        stop = float(sec.take("stop", "number"))
        num = int(sec.take("num", "int"))
        sec.done()
        if num < 1:
            raise ConfigError("b_grid.num must be >= 1")
        grid = [float(v) for v in np.linspace(start, stop, num)]
    if not grid:
        raise ConfigError("b_grid must be nonempty")
    return grid


def _check_b_range(grid: Sequence[float], b_max: Optional[float]) -> None:
    lo, hi = min(grid), max(grid)
    if lo < 0:
        raise ConfigError(f"b values must be >= 0, got {lo}")
    limit = hi if b_max is None else b_max
    if hi > limit:
        raise ConfigError(f"b value {hi} exceeds b_max {limit}")


@dataclass
class _Model:
    """Everything needed to produce a spectrum at one field strength."""

    mode: str
    symbol: Symbol
    field: MagneticField
    params: TruncationParams
    threads: int

    def matrix(self, b: float) -> tuple[np.ndarray, np.ndarray, int]:
        """Returns (hermitian matrix, site array, entries per site)."""
        if self.mode == "peierls":
            H, sites = peierls_matrix(
                self.symbol.xi_class, self.field, b, self.params.lattice_radius
            )
            return H, sites, 1
        M = assemble(self.symbol, self.field, b, self.params, n_workers=self.threads)
        return flatten(M), M.sites, M.block_dim

    def spectrum(self, b: float) -> spectral.SpectrumResult:
        H, _, _ = self.matrix(b)
        return eigenvalues_hermitian(H, provenance=f"{self.mode} b={b!r}")


def _build_model(cfg: Section, threads: int) -> _Model:
    mode = cfg.take("mode", "str", "assembled")
    if mode not in ("peierls", "assembled"):
        raise ConfigError(f"mode: expected 'peierls' or 'assembled', got {mode!r}")
    symbol = build_symbol(cfg.sub("symbol"))
    field = build_field(cfg.sub("field"))
    params = build_truncation(cfg.sub("truncation"))
    if symbol.dim != field.dim:
        raise ConfigError(
            f"symbol dimension {symbol.dim} does not match field dimension {field.dim}"
        )
    if mode == "peierls":
        if not isinstance(symbol.xi_class, Hopping):
            raise ConfigError("mode 'peierls' needs a hopping symbol (kind 'harper')")
        if not symbol.xi_class.is_hermitian_closed():
            raise ConfigError("mode 'peierls' needs a hermitian-closed hop set")
    return _Model(mode=mode, symbol=symbol, field=field, params=params, threads=threads)


def _filter_spec(sec: Optional[Section]) -> Optional[tuple[int, float]]:
    if sec is None:
        return None
    enabled = sec.take("enabled", "bool", True)
    width = int(sec.take("width", "int", 2))
    threshold = float(sec.take("threshold", "number", 0.5))
    sec.done()
    if not enabled:
        return None
    if width < 1 or not 0.0 < threshold <= 1.0:
        raise ConfigError("boundary_filter: width >= 1 and threshold in (0, 1] required")
    return width, threshold


def _filtered_eigenvalues(
    model: _Model, b: float, filt: Optional[tuple[int, float]]
) -> tuple[spectral.SpectrumResult, np.ndarray]:
    """Spectrum plus the subset used for gap detection (boundary states out)."""
    H, sites, per_site = model.matrix(b)
    if filt is None:
        res = eigenvalues_hermitian(H, provenance=f"{model.mode} b={b!r}")
        return res, res.eigenvalues
    width, threshold = filt
    res, vecs = eigh_checked(H, provenance=f"{model.mode} b={b!r}")
    mask = np.repeat(
        boundary_site_mask(sites, model.params.lattice_radius, width), per_site
    )
    kept, _ = drop_boundary_states(res.eigenvalues, vecs, mask, threshold)
    return res, kept


# -- commands -----------------------------------------------------------


def cmd_butterfly(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    grid = _b_grid(cfg.sub("b_grid"))
    b_max = cfg.take("b_max", "number", None)
    model = _build_model(cfg, threads=1)
    cfg.done()
    _check_b_range(grid, b_max)

    t0 = time.perf_counter()
    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            spectra = list(pool.map(model.spectrum, grid))
    else:
        spectra = [model.spectrum(b) for b in grid]
    t_solve = time.perf_counter() - t0

    rows = []
    for b, res in zip(grid, spectra):
        for idx, ev in enumerate(res.eigenvalues):
            rows.append((b, idx, float(ev)))
    cfg_hash = _config_hash(cfg_raw)
    csv_path = os.path.join(out_dir, "butterfly.csv")
    write_csv(csv_path, ("b", "index", "eigenvalue"), rows, cfg_hash)
    summary = {
        "command": "butterfly",
        "config_sha256": cfg_hash,
        "n_b": len(grid),
        "matrix_dim": spectra[0].matrix_dim,
        "max_residual": max(r.residual for r in spectra),
        "outputs": {"csv": "butterfly.csv"},
        "timings": {"solve_s": t_solve},
    }
    write_summary(os.path.join(out_dir, "butterfly_summary.json"), summary)
    return summary


def cmd_spectrum(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    b = float(cfg.take("b", "number"))
    b_max = cfg.take("b_max", "number", None)
    gap_min_width = cfg.take("gap_min_width", "number", None)
    filt = _filter_spec(cfg.sub("boundary_filter", None))
    model = _build_model(cfg, threads)
    cfg.done()
    _check_b_range([b], b_max)

    t0 = time.perf_counter()
    res, kept = _filtered_eigenvalues(model, b, filt)
    t_solve = time.perf_counter() - t0

    cfg_hash = _config_hash(cfg_raw)
    rows = [(i, float(v)) for i, v in enumerate(res.eigenvalues)]
    write_csv(os.path.join(out_dir, "spectrum.csv"), ("index", "eigenvalue"), rows, cfg_hash)
    summary = {
        "command": "spectrum",
        "config_sha256": cfg_hash,
        "b": b,
        "matrix_dim": res.matrix_dim,
        "hull": list(res.hull),
        "residual": res.residual,
        "outputs": {"csv": "spectrum.csv"},
        "timings": {"solve_s": t_solve},
    }
    if gap_min_width is not None:
        gl = find_gaps(np.sort(kept), float(gap_min_width))
        summary["gaps"] = [list(g) for g in gl.gaps]
        summary["gap_min_width"] = float(gap_min_width)
        summary["filtered_states"] = int(res.matrix_dim - kept.size)
    write_summary(os.path.join(out_dir, "spectrum_summary.json"), summary)
    return summary


def _deltas(cfg: Section, key: str = "deltas", minimum: int = 1) -> list[float]:
    vals = [float(v) for v in cfg.take(key, "list")]
    if len(vals) < minimum:
        raise ConfigError(f"{key} needs at least {minimum} entries")
    if any(v <= 0 for v in vals):
        raise ConfigError(f"{key} must be positive")
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise ConfigError(f"{key} must be strictly decreasing")
    return vals


def cmd_holder(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    b0 = float(cfg.take("b0", "number"))
    deltas = _deltas(cfg, minimum=3)
    b_max = cfg.take("b_max", "number", None)
    model = _build_model(cfg, threads)
    cfg.done()
    _check_b_range([b0] + [b0 + d for d in deltas], b_max)

    t0 = time.perf_counter()
    base = model.spectrum(b0)
    dists = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            others = list(pool.map(lambda d: model.spectrum(b0 + d), deltas))
    else:
        others = [model.spectrum(b0 + d) for d in deltas]
    for res in others:
        dists.append(hausdorff(base, res))
    t_solve = time.perf_counter() - t0

    fit = holder_fit(deltas, dists)
    rows = [
        (d, dist, dist / math.sqrt(d), dist / d)
        for d, dist in zip(deltas, dists)
    ]
    cfg_hash = _config_hash(cfg_raw)
    write_csv(
        os.path.join(out_dir, "holder.csv"),
        ("delta_b", "hausdorff", "c_sqrt", "c_linear"),
        rows,
        cfg_hash,
    )
    summary = {
        "command": "holder",
        "config_sha256": cfg_hash,
        "b0": b0,
        "alpha": fit.alpha,
        "constant": fit.constant,
        "fit_residual": fit.residual,
        "c_star": fit.c_star,
        "c_star_ratio": fit.c_star_ratio,
        "outputs": {"csv": "holder.csv"},
        "timings": {"solve_s": t_solve},
    }
    write_summary(os.path.join(out_dir, "holder_summary.json"), summary)
    return summary


def cmd_edges(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    grid = _b_grid(cfg.sub("b_grid"))
    b_max = cfg.take("b_max", "number", None)
    gap_min_width = float(cfg.take("gap_min_width", "number"))
    window_cfg = cfg.take("window", "list", None)
    filt = _filter_spec(cfg.sub("boundary_filter", None))
    model = _build_model(cfg, threads)
    cfg.done()
    _check_b_range(grid, b_max)
    if len(grid) < 2:
        raise ConfigError("edges needs at least two grid points")

    t0 = time.perf_counter()
    results = [_filtered_eigenvalues(model, b, filt) for b in grid]
    t_solve = time.perf_counter() - t0

    gap_lists = [find_gaps(np.sort(kept), gap_min_width) for _, kept in results]
    if window_cfg is not None:
        if len(window_cfg) != 2:
            raise ConfigError("window must be [lo, hi]")
        window = (float(window_cfg[0]), float(window_cfg[1]))
    else:
        widest = gap_lists[0].widest()
        window = (widest[0], widest[1]) if widest else None

    track = None
    if window is not None:
        track = track_gap_edge(grid, gap_lists, window)

    e_min = np.array([res.hull[0] for res, _ in results])
    e_max = np.array([res.hull[1] for res, _ in results])
    rows = []
    for i, b in enumerate(grid):
        row = [b, float(e_min[i]), float(e_max[i])]
        if track is not None:
            row += [track.left[i], track.right[i]]
            row += [
                track.left_quotients[i - 1] if i > 0 else None,
                track.right_quotients[i - 1] if i > 0 else None,
            ]
        else:
            row += [None, None, None, None]
        rows.append([None if isinstance(v, float) and math.isnan(v) else v for v in row])

    cfg_hash = _config_hash(cfg_raw)
    write_csv(
        os.path.join(out_dir, "edges.csv"),
        ("b", "e_min", "e_max", "gap_left", "gap_right", "left_quotient", "right_quotient"),
        rows,
        cfg_hash,
    )

    def grid_quots(edge: np.ndarray) -> list:
        return [
            abs(float(edge[i + 1] - edge[i])) / abs(grid[i + 1] - grid[i])
            for i in range(len(grid) - 1)
        ]

    summary = {
        "command": "edges",
        "config_sha256": cfg_hash,
        "gap_min_width": gap_min_width,
        "e_min_quotients": grid_quots(e_min),
        "e_max_quotients": grid_quots(e_max),
        "tracked_window": list(window) if window else None,
        "gap_closed_at_b": (
            None
            if track is None or track.closed_at is None
            else grid[track.closed_at]
        ),
        "outputs": {"csv": "edges.csv"},
        "timings": {"solve_s": t_solve},
    }
    if not model.field.is_constant:
        summary["note"] = (
            "field varies in space; constant-field edge estimates do not apply,"
            " quotients are descriptive only"
        )
    if track is not None:
        summary["left_quotients"] = [
            None if math.isnan(v) else v for v in track.left_quotients
        ]
        summary["right_quotients"] = [
            None if math.isnan(v) else v for v in track.right_quotients
        ]
    write_summary(os.path.join(out_dir, "edges_summary.json"), summary)
    return summary


@dataclass
class ChainResult:
    """Distances and normalized constants of the four-step comparison chain
    at one delta_b: assemble vs rephase (linear), band truncation of the
    rephased operator (linear), truncated rephased vs truncated plain
    (square root), band truncation of the plain operator (linear)."""

    delta_b: float
    d_rephase: float
    d_band_rephased: float
    d_detune: float
    d_band_plain: float

    @property
    def constants(self) -> tuple[float, float, float, float]:
        db = self.delta_b
        return (
            self.d_rephase / db,
            self.d_band_rephased / db,
            self.d_detune / math.sqrt(db),
            self.d_band_plain / db,
        )


def four_step_distances(
    symbol: Symbol,
    field: MagneticField,
    b0: float,
    delta_b: float,
    params: TruncationParams,
    H0=None,
    n_workers: int = 1,
) -> ChainResult:
    """Hausdorff distances along the chain that interpolates between the
    spectra at b0 and b0 + delta_b.

    Step 1 compares the assembly at the shifted field with the cheap
    rephasing of the base assembly (same blocks, shifted phases). Steps 2
    and 4 truncate the band at Euclidean reach delta_b^{-1/2}. Step 3 is the
    only square-root-normalized step: truncated rephased against truncated
    plain.
    """
    if H0 is None:
        H0 = assemble(symbol, field, b0, params, n_workers=n_workers)
    H1 = assemble(symbol, field, b0 + delta_b, params, n_workers=n_workers)
    H_re = rephase(H0, delta_b)
    T_re = truncate_band(H_re, delta_b)
    T_pl = truncate_band(H0, delta_b)

    def spec(M) -> np.ndarray:
        return eigenvalues_hermitian(flatten(M)).eigenvalues

    s1 = spec(H1)
    s_re = spec(H_re)
    s_tre = spec(T_re)
    s_tpl = spec(T_pl)
    s0 = spec(H0)
    return ChainResult(
        delta_b=float(delta_b),
        d_rephase=hausdorff(s1, s_re),
        d_band_rephased=hausdorff(s_re, s_tre),
        d_detune=hausdorff(s_tre, s_tpl),
        d_band_plain=hausdorff(s_tpl, s0),
    )


def stable_under_halving(
    constants: Sequence[float], lo: float = 0.5, hi: float = 2.0, atol: float = 1e-9
) -> bool:
    """True when consecutive normalized constants stay within a factor of two
    of each other; vanishing pairs (both below atol) count as stable."""
    for a, c in zip(constants, constants[1:]):
        if abs(a) <= atol and abs(c) <= atol:
            continue
        if abs(a) <= atol or abs(c) <= atol:
            return False
        r = c / a
        if not lo <= r <= hi:
            return False
    return True


def cmd_chain(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    b0 = float(cfg.take("b0", "number"))
    deltas = _deltas(cfg, minimum=2)
    b_max = cfg.take("b_max", "number", None)
    symbol = build_symbol(cfg.sub("symbol"))
    field = build_field(cfg.sub("field"))
    params = build_truncation(cfg.sub("truncation"))
    cfg.done()
    _check_b_range([b0] + [b0 + d for d in deltas], b_max)
    if not symbol.hermitian:
        raise ConfigError("chain needs a hermitian symbol (spectra must be real)")

    t0 = time.perf_counter()
    H0 = assemble(symbol, field, b0, params, n_workers=threads)
    chain = [
        four_step_distances(symbol, field, b0, d, params, H0=H0, n_workers=threads)
        for d in deltas
    ]
    t_solve = time.perf_counter() - t0

    rows = []
    for res in chain:
        c = res.constants
        rows.append(
            (
                res.delta_b,
                res.d_rephase,
                res.d_band_rephased,
                res.d_detune,
                res.d_band_plain,
                c[0],
                c[1],
                c[2],
                c[3],
            )
        )
    cfg_hash = _config_hash(cfg_raw)
    write_csv(
        os.path.join(out_dir, "chain.csv"),
        (
            "delta_b",
            "d_rephase",
            "d_band_rephased",
            "d_detune",
            "d_band_plain",
            "c_rephase",
            "c_band_rephased",
            "c_detune",
            "c_band_plain",
        ),
        rows,
        cfg_hash,
    )

    names = ("rephase", "band_rephased", "detune", "band_plain")
    stability = {}
    for i, name in enumerate(names):
        stability[name] = stable_under_halving([res.constants[i] for res in chain])
    all_stable = all(stability.values())
    summary = {
        "command": "chain",
        "config_sha256": cfg_hash,
        "b0": b0,
        "deltas": deltas,
        "stability": stability,
        "stable": all_stable,
        "outputs": {"csv": "chain.csv"},
        "timings": {"solve_s": t_solve},
    }
    write_summary(os.path.join(out_dir, "chain_summary.json"), summary)
    if not all_stable:
        failed = ", ".join(n for n, ok in stability.items() if not ok)
        raise InvariantFailure(f"chain constants unstable under halving: {failed}")
    return summary


def build_span_function(
    modes: np.ndarray, support_radius: int, seed: int,
    cell_decay: float = 0.4, mode_decay: float = 0.35,
):
    """Deterministic cellwise trig polynomial supported on the cells
    |gamma|_inf <= support_radius, with seeded gaussian-decaying complex
    coefficients. Lies exactly in the mode span, so matrix-vs-oracle
    comparisons on it carry no basis truncation error at b = 0."""
    rng = np.random.default_rng(seed)
    kdecay = np.exp(-mode_decay * np.sum(np.asarray(modes, dtype=float) ** 2, axis=1))
    coeffs = {}
    for cell in lattice_sites(support_radius, modes.shape[1]):
        key = tuple(int(v) for v in cell)
        amp = math.exp(-cell_decay * float(np.dot(cell, cell)))
        c = (rng.standard_normal(len(modes)) + 1j * rng.standard_normal(len(modes)))
        coeffs[key] = c * kdecay * amp
    return cellwise_mode_function(coeffs, modes)


def cmd_oracle_check(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    b_values = [float(v) for v in cfg.take("b_values", "list")]
    if not b_values:
        raise ConfigError("b_values must be nonempty")
    b_max = cfg.take("b_max", "number", None)
    symbol = build_symbol(cfg.sub("symbol"))
    field = build_field(cfg.sub("field"))
    params = build_truncation(cfg.sub("truncation"))
    refined = build_truncation(cfg.sub("refined_truncation"))
    extent = float(cfg.take("extent", "number"))
    nodes = int(cfg.take("nodes", "int"))
    tolerance = float(cfg.take("tolerance", "number", 1e-2))
    tf = cfg.sub("test_functions")
    kind = tf.take("kind", "str", "span")
    if kind == "span":
        support_radius = int(tf.take("support_radius", "int", min(1, params.lattice_radius)))
        mode_cutoff = int(tf.take("mode_cutoff", "int", max(params.fourier_cutoff - 1, 0)))
        seed_f = int(tf.take("seed_f", "int", 11))
        seed_g = int(tf.take("seed_g", "int", 23))
        tf.done()
        if support_radius > params.lattice_radius:
            raise ConfigError("test function support_radius exceeds lattice_radius")
        if mode_cutoff > params.fourier_cutoff:
            raise ConfigError("test function mode_cutoff exceeds fourier_cutoff")
        fmodes = fourier_modes(mode_cutoff, symbol.dim)
        f = build_span_function(fmodes, support_radius, seed_f)
        g = build_span_function(fmodes, support_radius, seed_g)
        cell_panels = True
        if extent < support_radius + 0.5:
            raise ConfigError("extent must cover the test function support")
    elif kind == "bump":
        sigma = float(tf.take("sigma", "number"))
        center_f = np.asarray(tf.take("center_f", "list"), dtype=float)
        center_g = np.asarray(tf.take("center_g", "list"), dtype=float)
        tf.done()

        def bump_fn(center):
            def fb(pts):
                pts = np.asarray(pts, dtype=float)
                return np.exp(-np.sum((pts - center) ** 2, axis=-1) / (2 * sigma**2))

            return fb

        f = bump_fn(center_f)
        g = bump_fn(center_g)
        cell_panels = False
    else:
        raise ConfigError(f"unknown test_functions kind {kind!r} (span or bump)")
    cfg.done()
    _check_b_range(b_values, b_max)
    if isinstance(symbol.xi_class, Hopping):
        raise ConfigError("oracle-check needs an integrable symbol (gaussian or modulated)")
    if refined.fourier_cutoff <= params.fourier_cutoff and refined.space_quad <= params.space_quad:
        raise ConfigError("refined_truncation must refine fourier_cutoff or space_quad")

    t0 = time.perf_counter()
    rows = []
    worst_base = 0.0
    worst_refined = 0.0
    improved = True
    for b in b_values:
        oracle = quadratic_form_oracle(
            symbol, field, b, f, g, extent, nodes,
            epsilon=params.epsilon, cell_panels=cell_panels,
        )
        scale = max(abs(oracle), 1e-12)

        def matrix_value(p: TruncationParams) -> complex:
            M = assemble(symbol, field, b, p, n_workers=threads)
            H = flatten(M)
            vf = apply_Ub(field, b, f, p.lattice_radius, p).flat_coefficients(
                M.site_tuples, M.modes
            )
            vg = apply_Ub(field, b, g, p.lattice_radius, p).flat_coefficients(
                M.site_tuples, M.modes
            )
            return complex(vg.conj() @ (H @ vf))

        base_val = matrix_value(params)
        refined_val = matrix_value(refined)
        err_base = abs(base_val - oracle) / scale
        err_refined = abs(refined_val - oracle) / scale
        worst_base = max(worst_base, err_base)
        worst_refined = max(worst_refined, err_refined)
        # below the convergence floor both routes agree to quadrature noise
        # and a strict decrease carries no information
        improved = improved and (err_refined < err_base or err_refined <= 1e-10)
        rows.append(
            (
                b,
                oracle.real,
                oracle.imag,
                base_val.real,
                base_val.imag,
                refined_val.real,
                refined_val.imag,
                err_base,
                err_refined,
            )
        )
    t_solve = time.perf_counter() - t0

    cfg_hash = _config_hash(cfg_raw)
    write_csv(
        os.path.join(out_dir, "oracle_check.csv"),
        (
            "b",
            "oracle_re",
            "oracle_im",
            "matrix_re",
            "matrix_im",
            "refined_re",
            "refined_im",
            "rel_err",
            "rel_err_refined",
        ),
        rows,
        cfg_hash,
    )
    passed = worst_base <= tolerance and improved
    summary = {
        "command": "oracle-check",
        "config_sha256": cfg_hash,
        "worst_rel_err": worst_base,
        "worst_rel_err_refined": worst_refined,
        "tolerance": tolerance,
        "refinement_improves": improved,
        "passed": passed,
        "outputs": {"csv": "oracle_check.csv"},
        "timings": {"solve_s": t_solve},
    }
    write_summary(os.path.join(out_dir, "oracle_check_summary.json"), summary)
    if not passed:
        raise InvariantFailure(
            f"oracle agreement failed: worst {worst_base:.3e} (tol {tolerance:.1e}),"
            f" refinement_improves={improved}"
        )
    return summary


def cmd_assemble(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    b = float(cfg.take("b", "number"))
    b_max = cfg.take("b_max", "number", None)
    cache_file = cfg.take("cache_file", "str", "blocks.hfm")
    symbol = build_symbol(cfg.sub("symbol"))
    field = build_field(cfg.sub("field"))
    params = build_truncation(cfg.sub("truncation"))
    cfg.done()
    _check_b_range([b], b_max)

    t0 = time.perf_counter()
    M = assemble(symbol, field, b, params, n_workers=threads)
    t_asm = time.perf_counter() - t0
    path = os.path.join(out_dir, cache_file)
    save_matrix(M, path)
    M2 = load_matrix(path)
    for key, blk in M.blocks.items():
        if not np.array_equal(blk, M2.blocks[key]):
            raise InvariantFailure("cache round trip altered a block")

    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    summary = {
        "command": "assemble",
        "config_sha256": _config_hash(cfg_raw),
        "cache_file": cache_file,
        "cache_sha256": digest,
        "n_blocks": len(M.blocks),
        "flat_dim": M.flat_dim,
        "timings": {"assemble_s": t_asm},
    }
    write_summary(os.path.join(out_dir, "assemble_summary.json"), summary)
    return summary


# -- verify -------------------------------------------------------------


def _verify_checks(seed: int, corrupt: bool) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    out = []

    def record(name: str, passed: bool, detail: str) -> None:
        out.append((name, bool(passed), detail))

    B = np.array([[0.0, 1.3], [-1.3, 0.0]])
    const = MagneticField.constant(B)
    wrapped = MagneticField.smooth(
        2, lambda j, k, x: np.broadcast_to(B[j - 1, k - 1], np.asarray(x).shape[:-1]), label="wrapped"
    )

    pts = rng.uniform(-2, 2, size=(64, 2))
    pts2 = rng.uniform(-2, 2, size=(64, 2))

    d = np.abs(flux(wrapped, pts, pts2) - flux(const, pts, pts2)).max()
    record("flux_constant_closed_form", d <= 1e-12, f"max defect {d:.3e}")

    # Gradient identity by central differences, smooth field.
    var = MagneticField.smooth(
        2,
        lambda j, k, x: (0.0 if j == k else (1.0 if (j, k) == (1, 2) else -1.0))
        * np.cos(np.asarray(x)[..., 0]),
        label="cos",
    )
    h = 1e-5
    worst = 0.0
    for jax in (1, 2):
        e = np.zeros(2)
        e[jax - 1] = h
        num = (flux(var, pts + e, pts2) - flux(var, pts - e, pts2)) / (2 * h)
        ana = vector_potential(var, jax, pts, pts2) - vector_potential(
            var, jax, pts, np.zeros(2)
        )
        worst = max(worst, float(np.abs(num - ana).max()))
    record("flux_gradient_identity", worst <= 1e-6, f"max defect {worst:.3e}")

    rep = validate_field(var, seed=seed)
    record(
        "field_consistency",
        rep["antisymmetry_defect"] <= 1e-10 and rep["closedness_defect"] <= 1e-6,
        f"antisym {rep['antisymmetry_defect']:.3e} closed {rep['closedness_defect']:.3e}",
    )

    sym_reports = [
        validate_symbol(harper(2), seed=seed),
        validate_symbol(gaussian_xi(2, 1.0), seed=seed),
        validate_symbol(modulated(2, lambda x: np.cos(2 * np.pi * x[..., 0]), 1.0), seed=seed),
    ]
    bad = [r.name for r in sym_reports if not r.ok]
    record("symbol_library", not bad, f"reports with notes: {bad or 'none'}")

    # Direct (unmirrored) assembly hermiticity; the corruption hook lands here.
    gsym = gaussian_xi(2, 1.0, grid_points=16)
    direct = dataclasses.replace(gsym, hermitian=False)
    params = TruncationParams(lattice_radius=1, band_cut=1, fourier_cutoff=1, space_quad=8)
    M = assemble(direct, const, 0.7, params)
    if corrupt:
        key = next(k for k in M.blocks if k[0] != k[1])
        M.blocks[key] = M.blocks[key] + 0.05
    defect = hermitian_defect(flatten(M))
    record("assembled_hermiticity_direct", defect <= 1e-10, f"relative defect {defect:.3e}")

    ok = True
    detail = ""
    for _ in range(25):
        n = int(rng.integers(8, 40))
        S = random_hermitian(rng, n)
        T = S + random_hermitian(rng, n, scale=0.1)
        dh = hausdorff(np.linalg.eigvalsh(S), np.linalg.eigvalsh(T))
        nd = operator_norm(S - T)
        if dh > nd + 1e-10:
            ok = False
            detail = f"d_H {dh:.6f} > norm {nd:.6f}"
            break
    record("hausdorff_vs_norm", ok, detail or "25 random pairs")

    ok = True
    detail = ""
    for _ in range(50):
        xs = np.sort(rng.normal(size=rng.integers(1, 30)))
        ys = np.sort(rng.normal(size=rng.integers(1, 30)))
        fast = hausdorff(xs, ys)
        brute = max(
            np.abs(xs[:, None] - ys[None, :]).min(axis=1).max(),
            np.abs(xs[:, None] - ys[None, :]).min(axis=0).max(),
        )
        if abs(fast - brute) > 1e-12:
            ok = False
            detail = f"fast {fast} vs brute {brute}"
            break
    record("hausdorff_two_pointer", ok, detail or "50 random pairs")

    A = random_hermitian(rng, 24)
    w = np.linalg.eigvalsh(A)
    gap_lo = float(w[4] + w[5]) / 2
    gap_hi = float(w[12] + w[13]) / 2
    rz = riesz_project(A, (gap_lo, gap_hi), n_quad=512)
    p_defect = operator_norm(rz.projector @ rz.projector - rz.projector)
    record(
        "riesz_projection",
        rz.difference_norm <= 1e-6 and p_defect <= 1e-6,
        f"contour diff {rz.difference_norm:.3e} idempotence {p_defect:.3e}",
    )

    eps_rep = epsilon_convergence_check(
        gsym, const, 0.4, params, [0.4, 0.2, 0.1]
    )
    record(
        "epsilon_decrease",
        eps_rep.decreasing is True,
        f"diffs {['%.3e' % v for v in (eps_rep.diffs_to_limit or eps_rep.cauchy_diffs)]}",
    )

    hops = harper(2).xi_class
    b = 2.0 * np.pi / 3.0
    # Gauge equivalence: shifting the flux per plaquette by 2 pi leaves the
    # spectrum unchanged (diagonal unitary conjugation).
    unit = MagneticField.constant(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    Ha, _ = peierls_matrix(hops, unit, b, 4)
    Hb, _ = peierls_matrix(hops, unit, b + 2 * np.pi, 4)
    dgauge = hausdorff(np.linalg.eigvalsh(Ha), np.linalg.eigvalsh(Hb))
    record("peierls_flux_periodicity", dgauge <= 1e-10, f"spectral shift {dgauge:.3e}")

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-np.sum(x * x, axis=-1)) * (1.0 + 0.3j)

    sf = apply_Ub(const, 0.8, f, 1, params)
    back = apply_Ub_inverse(const, 0.8, sf)
    plain = apply_Ub(const, 0.0, f, 1, params)
    worst = max(
        float(np.abs(back.values[c] - plain.values[c]).max()) for c in sf.values
    )
    norm_gap = abs(sf.norm() - plain.norm())
    record(
        "magnetic_cell_decomposition",
        worst <= 1e-14 and norm_gap <= 1e-14,
        f"roundtrip {worst:.3e} norm shift {norm_gap:.3e}",
    )

    return out


def cmd_verify(cfg_raw: dict, out_dir: str, threads: int, seed: int) -> dict:
    cfg = Section(cfg_raw, "config")
    cfg_seed = int(cfg.take("seed", "int", 0))
    corrupt = cfg.take("debug_corrupt_block", "bool", False)
    cfg.done()
    use_seed = seed if seed is not None else cfg_seed

    t0 = time.perf_counter()
    checks = _verify_checks(use_seed, corrupt)
    elapsed = time.perf_counter() - t0

    for name, passed, detail in checks:
        line = {"check": name, "passed": passed, "detail": detail}
        print(json.dumps(line, sort_keys=True))
    n_failed = sum(1 for _, passed, _ in checks if not passed)
    summary = {
        "command": "verify",
        "config_sha256": _config_hash(cfg_raw),
        "seed": use_seed,
        "n_checks": len(checks),
        "n_failed": n_failed,
        "passed": n_failed == 0,
        "checks": [
            {"check": n, "passed": p, "detail": d} for n, p, d in checks
        ],
        "timings": {"total_s": elapsed},
    }
    write_summary(os.path.join(out_dir, "verify_summary.json"), summary)
    print(json.dumps({"verify_passed": n_failed == 0, "n_failed": n_failed}))
    if n_failed:
        raise InvariantFailure(f"{n_failed} verify checks failed")
    return summary


_COMMANDS = {
    "butterfly": cmd_butterfly,
    "spectrum": cmd_spectrum,
    "holder": cmd_holder,
    "edges": cmd_edges,
    "chain": cmd_chain,
    "verify": cmd_verify,
    "oracle-check": cmd_oracle_check,
    "assemble": cmd_assemble,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hofmat",
        description="Generalized block matrices for magnetic lattice operators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
        p.add_argument("--seed", type=int, default=None, help="sampling seed override")
    args = parser.parse_args(argv)

    try:
        threads = resolve_threads(args.threads)
        try:
            with open(args.config) as fh:
                cfg_raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(cfg_raw, dict):
            raise ConfigError("config root must be a JSON object")
        os.makedirs(args.out, exist_ok=True)
        _COMMANDS[args.command](cfg_raw, args.out, threads, args.seed)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InvariantFailure as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
