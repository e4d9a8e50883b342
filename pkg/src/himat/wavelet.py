"""2-D decimated (DWT) and stationary (SWT) wavelet transforms with
orthonormal bases, and the wavelet-domain training losses built on them.

Conventions, fixed everywhere:
  * periodic (circular) boundary — consistent with tileable textures and
    makes SWT shift equivariance exact;
  * analysis correlates with the decomposition taps, synthesis convolves
    with the reconstruction taps; for an orthonormal bank the same tap
    arrays serve both roles, so rec_lo == dec_lo here;
  * decimation keeps even-indexed samples; the stationary transform
    dilates taps by 2^(level-1) instead of decimating;
  * subband letters: first = filter applied along the row axis (H),
    second = along the column axis (W); "L" lowpass, "H" highpass.

The filter constants were produced once by scripts/gen_wavelet_taps.py
(spectral factorization at 80-digit precision, least-asymmetric root
selection) and are embedded verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from himat import tensor as T
from himat.errors import OddDimensions, ShapeMismatch, UnknownBasis
from himat.tensor import Tensor

DEC_LO = {
    "haar": [0.7071067811865475, 0.7071067811865475],
    "sym4": [
        -0.07576571478950221,
        -0.029635527646002493,
        0.497618667632775,
        0.8037387518051321,
        0.29785779560530606,
        -0.09921954357663353,
        -0.012603967262031304,
        0.032223100604051466,
    ],
    "sym19": [
        2.6518293093623366e-06,
        7.485837188218196e-06,
        -2.4922584080850264e-05,
        -5.333031497876689e-05,
        0.0002565662145447189,
        0.00046506617282999303,
        -0.0010852648700873967,
        -0.0012212991300467376,
        0.0065138992730681255,
        0.008155557186968773,
        -0.013388707742440846,
        -0.006807549380362801,
        0.07362253069918022,
        0.10070181188057466,
        -0.005523117284139551,
        0.05355142226667636,
        0.47081103862741785,
        0.7346400407666259,
        0.36959920554359293,
        -0.1634521292443228,
        -0.23131864695986587,
        -0.01523346417774807,
        0.043372635605645124,
        -0.016561930406292218,
        -0.009764158166327636,
        0.019810612665642876,
        0.0062585806429542815,
        -0.009139385840647853,
        -0.0029706488990456064,
        0.0027472071967700965,
        0.000901085292195721,
        -0.0005804750699305644,
        -0.0001748413650438453,
        8.465837629262781e-05,
        1.991818136701488e-05,
        -7.879940009399958e-06,
        -1.0228516962487516e-06,
        3.623413172159897e-07,
    ],
}


@dataclass(frozen=True)
class WaveletBasis:
    name: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray


def load_basis(name):
    """Look up an orthonormal basis by name ('haar', 'sym4', 'sym19').

    The highpass is the quadrature mirror of the lowpass:
    dec_hi[k] = (-1)^k * dec_lo[L-1-k].
    """
    if name not in DEC_LO:
        raise UnknownBasis(f"unknown wavelet basis {name!r}; have {sorted(DEC_LO)}")
    lo = np.asarray(DEC_LO[name], dtype=np.float64)
    k = np.arange(lo.size)
    hi = ((-1.0) ** k) * lo[::-1]
    return WaveletBasis(name=name, dec_lo=lo, dec_hi=hi, rec_lo=lo.copy(), rec_hi=hi.copy())


@dataclass
class Subbands:
    """Per-level subbands; DWT halves dims per level, SWT keeps them."""

    kind: str  # "dwt" | "swt"
    levels: int
    ll: list  # Tensor per level
    lh: list
    hl: list
    hh: list

    def level(self, ell):
        """1-based level accessor returning the (LL, LH, HL, HH) tuple."""
        i = ell - 1
        return self.ll[i], self.lh[i], self.hl[i], self.hh[i]


@dataclass
class SubbandWeights:
    ll: float = 0.5
    lh: float = 2.0
    hl: float = 2.0
    hh: float = 2.5

    def as_tuple(self):
        return (self.ll, self.lh, self.hl, self.hh)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _analysis_pair(x, taps_lo, taps_hi, axis, dilation=1, decimate=False):
    lo = T.circ_filter(x, taps_lo, dilation=dilation, axis=axis)
    hi = T.circ_filter(x, taps_hi, dilation=dilation, axis=axis)
    if decimate:
        lo = T.dyadic_down(lo, axis)
        hi = T.dyadic_down(hi, axis)
    return lo, hi


def dwt2(x, basis, levels=1, axes=(-2, -1)):
    """Separable decimated 2-D transform, `levels` octaves deep.

    Requires the filtered axes to be even at every level. Extra axes
    (maps, channels, batch) ride along untouched.
    """
    x = _as_tensor(x)
    ax_r, ax_c = axes
    ll_list, lh_list, hl_list, hh_list = [], [], [], []
    cur = x
    for ell in range(levels):
        h, w = cur.shape[ax_r], cur.shape[ax_c]
        if h % 2 or w % 2:
            raise OddDimensions(f"level {ell + 1} input is {h}x{w}; even dims required")
        lo_r, hi_r = _analysis_pair(cur, basis.dec_lo, basis.dec_hi, ax_r, decimate=True)
        ll, lh = _analysis_pair(lo_r, basis.dec_lo, basis.dec_hi, ax_c, decimate=True)
        hl, hh = _analysis_pair(hi_r, basis.dec_lo, basis.dec_hi, ax_c, decimate=True)
        ll_list.append(ll)
        lh_list.append(lh)
        hl_list.append(hl)
        hh_list.append(hh)
        cur = ll
    return Subbands("dwt", levels, ll_list, lh_list, hl_list, hh_list)


def idwt2(sb, basis, axes=(-2, -1)):
    """Perfect-reconstruction inverse of dwt2."""
    if sb.kind != "dwt":
        raise ShapeMismatch("idwt2 expects DWT subbands")
    ax_r, ax_c = axes

    def synth(lo, hi, axis):
        up_lo = T.dyadic_up(lo, axis)
        up_hi = T.dyadic_up(hi, axis)
        return T.add(
            T.circ_filter(up_lo, basis.rec_lo, axis=axis, adjoint=True),
            T.circ_filter(up_hi, basis.rec_hi, axis=axis, adjoint=True),
        )

    cur = sb.ll[-1]
    for ell in range(sb.levels, 0, -1):
        _, lh, hl, hh = sb.level(ell)
        if lh.shape != cur.shape:
            raise ShapeMismatch(f"level {ell} subband shapes disagree: {lh.shape} vs {cur.shape}")
        lo_r = synth(cur, lh, ax_c)
        hi_r = synth(hl, hh, ax_c)
        cur = synth(lo_r, hi_r, ax_r)
    return cur


def swt2(x, basis, levels=1, axes=(-2, -1)):
    """Stationary (undecimated, a-trous) 2-D transform.

    Every subband keeps the input resolution; level ell uses taps
    dilated by 2^(ell-1). Exactly equivariant to circular shifts.
    """
    x = _as_tensor(x)
    ax_r, ax_c = axes
    ll_list, lh_list, hl_list, hh_list = [], [], [], []
    cur = x
    for ell in range(levels):
        d = 2**ell
        lo_r, hi_r = _analysis_pair(cur, basis.dec_lo, basis.dec_hi, ax_r, dilation=d)
        ll, lh = _analysis_pair(lo_r, basis.dec_lo, basis.dec_hi, ax_c, dilation=d)
        hl, hh = _analysis_pair(hi_r, basis.dec_lo, basis.dec_hi, ax_c, dilation=d)
        ll_list.append(ll)
        lh_list.append(lh)
        hl_list.append(hl)
        hh_list.append(hh)
        cur = ll
    return Subbands("swt", levels, ll_list, lh_list, hl_list, hh_list)


def iswt2(sb, basis, axes=(-2, -1)):
    """Inverse stationary transform (exact, factor 1/4 per 2-D level)."""
    if sb.kind != "swt":
        raise ShapeMismatch("iswt2 expects SWT subbands")
    ax_r, ax_c = axes

    def synth(lo, hi, axis, d):
        return T.add(
            T.circ_filter(lo, basis.rec_lo, dilation=d, axis=axis, adjoint=True),
            T.circ_filter(hi, basis.rec_hi, dilation=d, axis=axis, adjoint=True),
        )

    cur = sb.ll[-1]
    for ell in range(sb.levels, 0, -1):
        _, lh, hl, hh = sb.level(ell)
        if lh.shape != cur.shape:
            raise ShapeMismatch(f"level {ell} subband shapes disagree: {lh.shape} vs {cur.shape}")
        d = 2 ** (ell - 1)
        lo_r = synth(cur, lh, ax_c, d)
        hi_r = synth(hl, hh, ax_c, d)
        cur = T.mul(synth(lo_r, hi_r, ax_r, d), 0.25)
    return cur


def _batch_size(x, axes):
    """Product of the axes left of the map axis (map = spatial axis - 1)."""
    ndim = x.ndim
    first_spatial = axes[0] % ndim
    lead = x.shape[: max(first_spatial - 1, 0)]
    return int(np.prod(lead)) if lead else 1


def dwt_loss(pred, target, weight, basis, levels=1, axes=(-3, -2)):
    """weight * ||DWT(pred) - DWT(target)||^2.

    Reduction: sum over subbands, levels, maps, channels and pixels;
    mean over any batch axes left of the map axis. Inputs are map
    stacks [..., M, H, W, C] by default (axes selects H, W).
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    sp, st = dwt2(pred, basis, levels, axes), dwt2(target, basis, levels, axes)
    total = None
    bands = [(sp.ll[-1], st.ll[-1])]
    for ell in range(1, levels + 1):
        for i in (1, 2, 3):
            bands.append((sp.level(ell)[i], st.level(ell)[i]))
    for bp, bt in bands:
        d = T.sub(bp, bt)
        term = T.tsum(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    scale = float(weight) / _batch_size(pred, axes)
    return T.mul(total, scale)


def swt_loss(pred, target, weights=None, basis=None, levels=1, axes=(-3, -2)):
    """Sum over subbands i of lambda_i * ||SWT(pred)_i - SWT(target)_i||^2.

    LL means the deepest level's approximation; detail weights apply at
    every level. Same reduction convention as dwt_loss. Differentiable
    end to end.
    """
    if weights is None:
        weights = SubbandWeights()
    if basis is None:
        basis = load_basis("sym19")
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    sp, st = swt2(pred, basis, levels, axes), swt2(target, basis, levels, axes)

    def sq(a, b):
        d = T.sub(a, b)
        return T.tsum(T.mul(d, d))

    total = T.mul(sq(sp.ll[-1], st.ll[-1]), weights.ll)
    for ell in range(1, levels + 1):
        total = T.add(total, T.mul(sq(sp.lh[ell - 1], st.lh[ell - 1]), weights.lh))
        total = T.add(total, T.mul(sq(sp.hl[ell - 1], st.hl[ell - 1]), weights.hl))
        total = T.add(total, T.mul(sq(sp.hh[ell - 1], st.hh[ell - 1]), weights.hh))
    return T.mul(total, 1.0 / _batch_size(pred, axes))
