"""Regenerate the orthonormal wavelet filter constants embedded in
src/himat/wavelet.py.

Construction (classical spectral factorization):
  1. The degree-(p-1) product filter P(y) = sum_k C(p-1+k, k) y^k is the
     half-band magnitude response of an orthonormal filter with p
     vanishing moments.
  2. Each root y maps to a reciprocal pair in z via y = (2 - z - 1/z)/4.
  3. The lowpass filter is (1+z)^p times one root from each reciprocal
     pair. Real roots take |z| < 1. Complex-conjugate quadruples carry a
     binary inside/outside choice: the least-asymmetric (symlet) filter
     minimizes the integrated squared deviation of the unwrapped phase
     from its linear fit, searched exhaustively over the 2^(#quadruples)
     candidates.
  4. Normalize so sum(h) = sqrt(2); sum(h^2) = 1 then holds to the
     precision of the factorization and is verified, not enforced.

Root finding runs at 80 decimal digits (mpmath); the degree-18 sym19
polynomial has binomial coefficients near 1e10 and needs the headroom.
The emitted sym4 matches the published Symlet-4 coefficients.

Usage: python scripts/gen_wavelet_taps.py  (prints a Python dict literal)
"""

import itertools

import mpmath as mp
import numpy as np

mp.mp.dps = 80


def product_filter_roots(p):
    coeffs = [mp.binomial(p - 1 + k, k) for k in range(p)]
    return mp.polyroots(list(reversed(coeffs)), maxsteps=500, extraprec=300)


def z_from_y(y):
    b = 2 - 4 * y
    disc = mp.sqrt(b * b - 4)
    return (b + disc) / 2, (b - disc) / 2


def poly_from_roots(roots):
    coeffs = [mp.mpc(1)]
    for r in roots:
        new = [mp.mpc(0)] * (len(coeffs) + 1)
        for i, c in enumerate(coeffs):
            new[i + 1] += c
            new[i] += -r * c
        coeffs = new
    return coeffs


def collect_root_structure(p):
    """Split z-roots into fixed real picks and switchable quadruples."""
    yroots = product_filter_roots(p)
    real_z, quads, seen = [], [], set()
    for i, y in enumerate(yroots):
        if i in seen:
            continue
        if abs(mp.im(y)) < mp.mpf(10) ** (-40):
            z1, z2 = z_from_y(mp.re(y))
            real_z.append(z1 if abs(z1) < 1 else z2)
            seen.add(i)
        else:
            for j in range(i + 1, len(yroots)):
                if j not in seen and abs(yroots[j] - mp.conj(y)) < mp.mpf(10) ** (-30):
                    seen.add(i)
                    seen.add(j)
                    break
            z1, z2 = z_from_y(y)
            zin = z1 if abs(z1) < 1 else z2
            zout = z2 if abs(z1) < 1 else z1
            quads.append(((zin, mp.conj(zin)), (zout, mp.conj(zout))))
    assert len(real_z) + 2 * len(quads) == p - 1
    return real_z, quads


def build_filter(p, real_z, quads, inside_sel):
    chosen = list(real_z)
    for keep_inside, (ins, outs) in zip(inside_sel, quads):
        chosen.extend(ins if keep_inside else outs)
    coeffs = poly_from_roots([-mp.mpf(1)] * p + chosen)
    h = [mp.re(c) for c in coeffs]
    s = sum(h)
    return [float(x / s * mp.sqrt(2)) for x in h]


def phase_nonlinearity(h):
    h = np.asarray(h)
    w = np.linspace(0.01, np.pi - 0.01, 256)
    resp = np.array([np.sum(h * np.exp(-1j * wk * np.arange(len(h)))) for wk in w])
    ph = np.unwrap(np.angle(resp))
    design = np.vstack([w, np.ones_like(w)]).T
    sol, *_ = np.linalg.lstsq(design, ph, rcond=None)
    return float(np.sum((ph - design @ sol) ** 2))


def least_asymmetric(p):
    real_z, quads = collect_root_structure(p)
    best = None
    for sel in itertools.product([True, False], repeat=len(quads)):
        h = build_filter(p, real_z, quads, sel)
        m = phase_nonlinearity(h)
        if best is None or m < best[0]:
            best = (m, h)
    return best[1]


def verify(h):
    h = np.asarray(h)
    assert abs(h.sum() - np.sqrt(2)) < 1e-12
    assert abs((h**2).sum() - 1.0) < 1e-12
    for s in range(1, len(h) // 2):
        assert abs(np.sum(h[: len(h) - 2 * s] * h[2 * s :])) < 1e-12


if __name__ == "__main__":
    print("DEC_LO = {")
    print('    "haar": [%r, %r],' % (float(1 / np.sqrt(2)), float(1 / np.sqrt(2))))
    for p in (4, 19):
        taps = least_asymmetric(p)
        verify(taps)
        body = ",\n        ".join(repr(t) for t in taps)
        print(f'    "sym{p}": [\n        {body},\n    ],')
    print("}")
