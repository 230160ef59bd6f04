"""Self-checks for the reference Bloch spectra against closed forms.

These pin the oracle itself before it is trusted anywhere else: zero flux,
flux 1/2 (E = +-2 sqrt(cos^2 k1 + cos^2 k2)), and flux 1/3 (cubic band
edges).
"""

import numpy as np

from bloch_oracle import band_edges_flux_third, bloch_matrix, bloch_spectrum


def test_zero_flux_is_free_band():
    s = bloch_spectrum(0, 1, n_k=64)
    assert abs(s.min() - (-4.0)) < 1e-2
    assert abs(s.max() - 4.0) < 1e-2
    # fill check: no spurious gap wider than the grid resolution
    assert np.max(np.diff(s)) < 0.15


def test_half_flux_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k1, k2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        e = np.linalg.eigvalsh(bloch_matrix(1, 2, k1, k2))
        want = 2.0 * np.sqrt(np.cos(k1) ** 2 + np.cos(k2) ** 2)
        assert np.allclose(e, [-want, want], atol=1e-12)
    s = bloch_spectrum(1, 2, n_k=48)
    assert abs(s.max() - 2.0 * np.sqrt(2.0)) < 1e-2
    assert abs(s.min() + 2.0 * np.sqrt(2.0)) < 1e-2
    # flux 1/2 is gapless at E = 0
    assert np.min(np.abs(s)) < 0.15


def test_third_flux_band_edges():
    s = bloch_spectrum(1, 3, n_k=60)
    bands = band_edges_flux_third()
    for lo, hi in bands:
        inside = s[(s > lo - 1e-9) & (s < hi + 1e-9)]
        assert inside.size > 0
        assert abs(inside.min() - lo) < 1e-2
        assert abs(inside.max() - hi) < 1e-2
    # nothing in the two gaps
    assert not np.any((s > bands[0][1] + 1e-9) & (s < bands[1][0] - 1e-9))
    assert not np.any((s > bands[1][1] + 1e-9) & (s < bands[2][0] - 1e-9))


def test_third_flux_characteristic_cubic():
    # det(M - E) reduces to E^3 - 6E - (2 cos 3k1 + 2 cos 3k2) = 0
    rng = np.random.default_rng(5)
    for _ in range(30):
        k1, k2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        e = np.linalg.eigvalsh(bloch_matrix(1, 3, k1, k2))
        rhs = 2.0 * np.cos(3.0 * k1) + 2.0 * np.cos(3.0 * k2)
        assert np.allclose(e**3 - 6.0 * e, rhs, atol=1e-10)
