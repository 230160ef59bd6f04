"""Acceptance suite: one test per advertised numerical guarantee.

Each test prints a single line `[acceptance NN] <name>: PASS|FAIL` before
asserting, so a verbose run (`pytest -v -s`) reads as a checklist. The
tolerances are frozen against measured values with headroom; none of them
are tuned to the noise floor of a particular BLAS build. Reference spectra
for the discrete comparison come from tests/bloch_oracle.py, which is
validated against closed forms in its own test module and imports nothing
from the package.
"""

import dataclasses
import json
import math
import os

import numpy as np

from bloch_oracle import bloch_spectrum
from hofmat import (
    MagneticField,
    TruncationParams,
    apply_Ub,
    assemble,
    block_difference_sup,
    boundary_site_mask,
    decay_profile,
    drop_boundary_states,
    eigh_checked,
    epsilon_convergence_check,
    find_gaps,
    flatten,
    flux,
    fourier_modes,
    gaussian_xi,
    harper,
    hausdorff,
    hermitian_defect,
    holder_fit,
    modulated,
    peierls_matrix,
    quadratic_form_oracle,
    random_hermitian,
    riesz_project,
    track_gap_edge,
    vector_potential,
)
from hofmat.cli import build_span_function, four_step_distances, main, stable_under_halving

UNIT = MagneticField.constant(np.array([[0.0, 1.0], [-1.0, 0.0]]))


def _report(num: int, name: str, ok: bool) -> None:
    print(f"[acceptance {num:02d}] {name}: {'PASS' if ok else 'FAIL'}")


def _cos_component(j, k, x):
    x = np.asarray(x, dtype=float)
    base = np.cos(x[..., 0])
    sign = {(1, 2): 1.0, (2, 1): -1.0}.get((j, k), 0.0)
    return sign * base


def _filtered_spectrum(b: float, radius: int, width: int = 2, threshold: float = 0.5):
    """Open-sample spectrum of the discrete magnetic hopping model with
    edge-localized states removed; returns (kept, full SpectrumResult)."""
    H, sites = peierls_matrix(harper(2).xi_class, UNIT, b, radius)
    res, vecs = eigh_checked(H, provenance=f"acceptance b={b!r} R={radius}")
    mask = boundary_site_mask(sites, radius, width)
    kept, _ = drop_boundary_states(res.eigenvalues, vecs, mask, threshold)
    return kept, res


def test_01_flux_identities():
    rng = np.random.default_rng(101)
    # constant fields: closed form x^T B x0 / 2, one random field per batch
    worst_const = 0.0
    for _ in range(5):
        c = rng.uniform(-2.0, 2.0)
        B = np.array([[0.0, c], [-c, 0.0]])
        field = MagneticField.constant(B)
        x = rng.uniform(-3.0, 3.0, size=(200, 2))
        x0 = rng.uniform(-3.0, 3.0, size=(200, 2))
        closed = 0.5 * np.einsum("nj,jk,nk->n", x, B, x0)
        worst_const = max(worst_const, float(np.abs(flux(field, x, x0) - closed).max()))

    # a smooth wrapper around a constant must integrate to the same flux
    c = 0.7
    const = MagneticField.constant(np.array([[0.0, c], [-c, 0.0]]))
    wrapped = MagneticField.smooth(
        2,
        lambda j, k, x: np.full(np.asarray(x).shape[:-1], {(1, 2): c, (2, 1): -c}.get((j, k), 0.0)),
        label="wrapped-constant",
    )
    x = rng.uniform(-3.0, 3.0, size=(200, 2))
    x0 = rng.uniform(-3.0, 3.0, size=(200, 2))
    worst_wrap = float(np.abs(flux(const, x, x0) - flux(wrapped, x, x0)).max())

    # gradient identity: d/dx_j flux(x, x0) = A_j(x, x0) - A_j(x, 0)
    worst_grad = 0.0
    h = 1e-4
    for field in (UNIT, MagneticField.smooth(2, _cos_component, label="cos")):
        for _ in range(40):
            xx = rng.uniform(-2.0, 2.0, size=2)
            x0x = rng.uniform(-2.0, 2.0, size=2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                num = (flux(field, xx + e, x0x) - flux(field, xx - e, x0x)) / (2 * h)
                ana = vector_potential(field, j + 1, xx, x0x) - vector_potential(
                    field, j + 1, xx, np.zeros(2)
                )
                worst_grad = max(worst_grad, abs(float(num - ana)))

    ok = worst_const <= 1e-12 and worst_wrap <= 1e-12 and worst_grad <= 1e-8
    _report(1, "flux identities", ok)
    assert ok, f"const={worst_const:.3e} wrap={worst_wrap:.3e} grad={worst_grad:.3e}"


def test_02_assembled_hermiticity():
    params = TruncationParams(lattice_radius=3, band_cut=3, fourier_cutoff=2, space_quad=10)
    symbols = [
        gaussian_xi(2, 1.0),
        harper(2),
        modulated(2, lambda x: np.cos(2 * np.pi * np.asarray(x)[..., 0]), 1.0),
    ]
    worst_mirrored = 0.0
    worst_direct = 0.0
    for sym in symbols:
        for b in (0.0, 0.3, 1.0):
            M = assemble(sym, UNIT, b, params)
            worst_mirrored = max(worst_mirrored, hermitian_defect(flatten(M)))
            # disable the mirrored fast path: every block from quadrature
            Md = assemble(dataclasses.replace(sym, hermitian=False), UNIT, b, params)
            worst_direct = max(worst_direct, hermitian_defect(flatten(Md)))
    ok = worst_mirrored == 0.0 and worst_direct <= 1e-12
    _report(2, "assembled matrices hermitian", ok)
    assert ok, f"mirrored={worst_mirrored:.3e} direct={worst_direct:.3e}"


def test_03_block_decay():
    params = TruncationParams(lattice_radius=2, band_cut=4, fourier_cutoff=2, space_quad=12)
    M = assemble(gaussian_xi(2, 1.0), UNIT, 0.5, params)
    prof = decay_profile(M, weight_power=5.0)
    strict = bool(np.all(np.diff(prof.shell_max) < 0))
    # every off-diagonal block obeys norm <= diag * C * <offset>^-5 with the
    # reported C (recomputed here from the raw per-offset norms)
    bound_ok = True
    for off, nrm in prof.offset_norms.items():
        if all(o == 0 for o in off):
            continue
        bracket = math.sqrt(1.0 + sum(o * o for o in off))
        bound = prof.diagonal_norm * prof.weighted_constant * bracket**-5.0
        bound_ok = bound_ok and nrm <= bound * (1.0 + 1e-9)
    ok = (
        strict
        and prof.exponent >= 5.0
        and np.isfinite(prof.weighted_constant)
        and prof.weighted_constant < 1e3
        and bound_ok
    )
    _report(3, "off-diagonal block decay", ok)
    assert ok, (
        f"strict={strict} exponent={prof.exponent:.3f} "
        f"weighted_constant={prof.weighted_constant:.3f} bound_ok={bound_ok}"
    )


def test_04_block_lipschitz_in_b():
    params = TruncationParams(lattice_radius=2, band_cut=4, fourier_cutoff=2, space_quad=12)
    b0 = 0.5
    base = assemble(gaussian_xi(2, 1.0), UNIT, b0, params)
    quotients = []
    for delta in (0.1, 0.05, 0.025):
        pert = assemble(gaussian_xi(2, 1.0), UNIT, b0 + delta, params)
        quotients.append(block_difference_sup(base, pert, 3.0) / delta)
    spread = max(quotients) / min(quotients)
    ok = max(quotients) <= 0.2 and spread <= 1.5
    _report(4, "weighted block differences linear in b", ok)
    assert ok, f"quotients={[f'{q:.5f}' for q in quotients]} spread={spread:.3f}"


def test_05_quadratic_form_oracle_agreement():
    sym = gaussian_xi(2, 1.0)
    base = TruncationParams(lattice_radius=1, band_cut=2, fourier_cutoff=2, space_quad=12)
    refined = TruncationParams(lattice_radius=1, band_cut=2, fourier_cutoff=3, space_quad=16)
    fmodes = fourier_modes(1, 2)
    f = build_span_function(fmodes, 1, 11)
    g = build_span_function(fmodes, 1, 23)
    extent, nodes = 1.5, 18

    def matrix_value(b: float, p: TruncationParams) -> complex:
        M = assemble(sym, UNIT, b, p)
        H = flatten(M)
        vf = apply_Ub(UNIT, b, f, p.lattice_radius, p).flat_coefficients(M.site_tuples, M.modes)
        vg = apply_Ub(UNIT, b, g, p.lattice_radius, p).flat_coefficients(M.site_tuples, M.modes)
        return complex(vg.conj() @ (H @ vf))

    results = {}
    for b in (0.0, 0.3):
        oracle = quadratic_form_oracle(sym, UNIT, b, f, g, extent, nodes, cell_panels=True)
        scale = max(abs(oracle), 1e-12)
        err_base = abs(matrix_value(b, base) - oracle) / scale
        err_refined = abs(matrix_value(b, refined) - oracle) / scale
        results[b] = (err_base, err_refined)

    ok = all(eb <= 1e-2 and er < eb for eb, er in results.values())
    _report(5, "quadratic form matches direct quadrature", ok)
    assert ok, {b: (f"{eb:.3e}", f"{er:.3e}") for b, (eb, er) in results.items()}


def test_06_hausdorff_bounded_by_operator_norm():
    rng = np.random.default_rng(303)
    worst_excess = -np.inf
    for _ in range(200):
        S = random_hermitian(rng, 40)
        T = S + random_hermitian(rng, 40, scale=rng.uniform(0.01, 1.0))
        d = hausdorff(np.linalg.eigvalsh(S), np.linalg.eigvalsh(T))
        worst_excess = max(worst_excess, d - np.linalg.norm(S - T, 2))
    ok = worst_excess <= 1e-10
    _report(6, "spectral Hausdorff below operator norm", ok)
    assert ok, f"worst excess {worst_excess:.3e}"


def test_07_hausdorff_scan_vs_brute_force():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(500):
        n, m = rng.integers(1, 41, size=2)
        a = np.sort(rng.normal(scale=rng.uniform(0.1, 5.0), size=n))
        bvals = np.sort(np.concatenate([rng.normal(size=m), a[: rng.integers(0, n + 1)]]))
        d_scan = hausdorff(a, bvals)
        gap = np.abs(a[:, None] - bvals[None, :])
        d_brute = max(gap.min(axis=1).max(), gap.min(axis=0).max())
        worst = max(worst, abs(d_scan - d_brute))
    ok = worst <= 1e-15
    _report(7, "linear-time Hausdorff equals brute force", ok)
    assert ok, f"worst discrepancy {worst:.3e}"


def test_08_discrete_model_matches_periodic_reference():
    # rational flux p/q enters as b = 2 pi p / q with the unit field
    cases = {"half": (1, 2, np.pi, 0.15), "third": (1, 3, 2 * np.pi / 3, 0.08)}
    stats = {}
    ok = True
    for name, (p, q, b, dh_tol) in cases.items():
        oracle = bloch_spectrum(p, q, n_k=24)
        kept, res16 = _filtered_spectrum(b, radius=16)
        dh = hausdorff(kept, oracle)
        dev16 = max(abs(res16.hull[0] - oracle[0]), abs(res16.hull[1] - oracle[-1]))
        # the hull needs no eigenvectors, so the larger sample stays cheap
        H32, _ = peierls_matrix(harper(2).xi_class, UNIT, b, 32)
        w32 = np.linalg.eigvalsh(H32)
        dev32 = max(abs(w32[0] - oracle[0]), abs(w32[-1] - oracle[-1]))
        stats[name] = (dh, dev16, dev32)
        ok = ok and dh <= dh_tol and dev16 <= 0.05 and dev32 < dev16 and dev32 <= 0.01
    _report(8, "discrete model vs periodic reference spectra", ok)
    assert ok, {k: tuple(f"{v:.4f}" for v in t) for k, t in stats.items()}


def test_09_sqrt_law_constants():
    # full open-sample spectra: gap-filling edge states are part of the set
    # whose motion the sqrt law describes, so no boundary filtering here
    b0 = 1.0
    deltas = [0.2, 0.1, 0.05, 0.025]
    H0, _ = peierls_matrix(harper(2).xi_class, UNIT, b0, 12)
    base = np.sort(np.linalg.eigvalsh(H0))
    dists = []
    for d in deltas:
        H1, _ = peierls_matrix(harper(2).xi_class, UNIT, b0 + d, 12)
        dists.append(hausdorff(base, np.sort(np.linalg.eigvalsh(H1))))
    fit = holder_fit(deltas, dists)
    decreasing = bool(np.all(np.diff(dists) < 0))
    ok = decreasing and fit.c_star_ratio <= 3.0 and 0.4 <= fit.alpha <= 1.5
    _report(9, "sqrt-law constants for spectrum motion", ok)
    assert ok, (
        f"dists={[f'{x:.4f}' for x in dists]} alpha={fit.alpha:.4f} "
        f"c_star_ratio={fit.c_star_ratio:.4f}"
    )


def test_10_gap_edges_track_at_linear_speed():
    # gap edges only exist after boundary filtering, so tracking runs on the
    # filtered sets; the bulk sqrt-speed signal uses the full spectra, whose
    # edge states fill the finite-sample gaps
    b0 = 2 * np.pi / 3
    deltas = [0.025, 0.05, 0.1, 0.2]
    grid = [b0] + [b0 + d for d in deltas]
    full_list = []
    gap_lists = []
    for b in grid:
        kept, res = _filtered_spectrum(b, radius=12)
        full_list.append(res.eigenvalues)
        gap_lists.append(find_gaps(kept, 0.3))
    seed = next(g for g in gap_lists[0].gaps if g[0] > 0)
    track = track_gap_edge(grid, gap_lists, (seed[0], seed[1]))

    edge_q = np.concatenate([track.left_quotients, track.right_quotients])
    emax_q = [
        abs(full_list[i + 1][-1] - full_list[i][-1]) / (grid[i + 1] - grid[i])
        for i in range(len(grid) - 1)
    ]
    dh = [hausdorff(full_list[0], full_list[i]) for i in range(1, len(grid))]
    c_sqrt = [d / math.sqrt(dd) for d, dd in zip(dh, deltas)]
    c_lin = [d / dd for d, dd in zip(dh, deltas)]

    ok = (
        track.is_open_throughout
        and bool(np.all(np.isfinite(edge_q)))
        and float(np.max(edge_q)) <= 4.0
        and max(emax_q) <= 1.0
        and max(c_sqrt) / min(c_sqrt) <= 2.0
        and c_lin[0] > c_lin[-1]  # bulk motion outpaces linear at small delta
    )
    _report(10, "gap edges move at linear speed, bulk at sqrt speed", ok)
    assert ok, (
        f"open={track.is_open_throughout} edge_q_max={np.max(edge_q):.3f} "
        f"emax_q={[f'{q:.3f}' for q in emax_q]} "
        f"c_sqrt={[f'{c:.4f}' for c in c_sqrt]} c_lin={[f'{c:.4f}' for c in c_lin]}"
    )


def test_11_truncation_chain_stability():
    params = TruncationParams(lattice_radius=12, band_cut=1, fourier_cutoff=0, space_quad=6)
    sym = harper(2)
    rows = [four_step_distances(sym, UNIT, 1.0, d, params) for d in (0.2, 0.1, 0.05, 0.025)]
    zero_steps = all(r.d_band_rephased == 0.0 and r.d_band_plain == 0.0 for r in rows)
    stable = [
        stable_under_halving([r.constants[i] for r in rows]) for i in range(4)
    ]
    ok = zero_steps and all(stable)
    _report(11, "four-step truncation chain stable", ok)
    assert ok, f"zero_steps={zero_steps} stable={stable} " + " | ".join(
        f"d={r.delta_b}: {tuple(f'{c:.4f}' for c in r.constants)}" for r in rows
    )


def test_12_riesz_window_operator():
    rng = np.random.default_rng(505)
    worst_diff = 0.0
    worst_idem = 0.0
    for _ in range(20):
        M = random_hermitian(rng, 20)
        w = np.linalg.eigvalsh(M)
        lo = 0.5 * (w[5] + w[6])
        hi = 0.5 * (w[11] + w[12])
        rz = riesz_project(M, (lo, hi), n_quad=512)
        worst_diff = max(worst_diff, rz.difference_norm)
        worst_idem = max(
            worst_idem, float(np.linalg.norm(rz.projector @ rz.projector - rz.projector, 2))
        )

    # same machinery on the discrete magnetic model, contour through a gap
    H, sites = peierls_matrix(harper(2).xi_class, UNIT, 2 * np.pi / 3, 8)
    res, vecs = eigh_checked(H, provenance="acceptance riesz")
    mask = boundary_site_mask(sites, 8, 2)
    kept, _ = drop_boundary_states(res.eigenvalues, vecs, mask, 0.5)
    lo, hi, _ = find_gaps(kept, 0.3).widest()
    full = res.eigenvalues
    seg = np.concatenate([[lo], np.sort(full[(full > lo) & (full < hi)]), [hi]])
    spacings = np.diff(seg)
    k = int(np.argmax(spacings))
    window = (float(full[0] - 0.5), float(0.5 * (seg[k] + seg[k + 1])))
    rz = riesz_project(H, window, n_quad=1024)
    inside = np.sort(full[(full > window[0]) & (full < window[1])])
    expect = np.sort(np.concatenate([np.zeros(H.shape[0] - inside.size), inside]))
    spec_err = float(np.max(np.abs(np.sort(np.linalg.eigvalsh(rz.filtered)) - expect)))

    ok = worst_diff <= 1e-6 and worst_idem <= 1e-6 and rz.difference_norm <= 1e-6 and spec_err <= 1e-8
    _report(12, "contour window operator matches eigendecomposition", ok)
    assert ok, (
        f"random worst diff={worst_diff:.3e} idem={worst_idem:.3e} "
        f"model diff={rz.difference_norm:.3e} spec_err={spec_err:.3e}"
    )


def test_13_fiber_regularization_converges():
    params = TruncationParams(lattice_radius=2, band_cut=2, fourier_cutoff=1, space_quad=10)
    rep = epsilon_convergence_check(gaussian_xi(2, 1.0), UNIT, 0.4, params, [0.2, 0.1, 0.05])
    diffs = rep.diffs_to_limit
    ok = (
        rep.decreasing is True
        and diffs is not None
        and bool(np.all(np.diff(diffs) < 0))
        and all(d > 0 for d in diffs)
    )
    _report(13, "fiber regularization converges to the plain assembly", ok)
    assert ok, f"diffs_to_limit={diffs} decreasing={rep.decreasing}"


def test_14_cli_determinism(tmp_path):
    cfg = {
        "mode": "peierls",
        "symbol": {"kind": "harper", "dim": 2},
        "field": {"kind": "constant", "matrix": [[0.0, 1.0], [-1.0, 0.0]]},
        "truncation": {
            "lattice_radius": 3,
            "band_cut": 1,
            "fourier_cutoff": 0,
            "space_quad": 4,
        },
        "b_grid": {"values": [0.0, 0.8, 1.6, 2.4]},
    }
    path = os.path.join(tmp_path, "cfg.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)

    outputs = []
    for tag, extra in (("a", []), ("b", []), ("c", ["--threads", "4"])):
        out = os.path.join(tmp_path, tag)
        rc = main(["butterfly", "--config", path, "--out", out] + extra)
        assert rc == 0
        with open(os.path.join(out, "butterfly.csv"), "rb") as fh:
            outputs.append(fh.read())

    ok = outputs[0] == outputs[1] == outputs[2] and len(outputs[0]) > 0
    _report(14, "CLI outputs byte-identical across reruns and threads", ok)
    assert ok, f"sizes={[len(o) for o in outputs]}"
