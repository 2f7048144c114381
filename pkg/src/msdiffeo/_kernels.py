"""Gaussian kernel sums and their vector-Jacobian products.

Kernel: ``K(x, y) = exp(-|x - y|^2 / s2)`` with ``s2 = sigma_g ** 2``. Pairs
farther apart than ``sqrt(cut2)`` are skipped; pass ``EXACT_CUT2`` for the
exact sum. Centres are sorted into cells of side ``sqrt(cut2) / SUB`` with
the last axis varying fastest, so for a query the candidate centres along
each row of neighbouring cells form one contiguous slice. All loops are
serial and release the GIL.
"""
import numpy as np
from numba import njit

EXACT_CUT2 = 1e300
SUB = 2  # cells per cutoff length


@njit(cache=True, nogil=True)
def _build_cells(c, cut2):
    """Returns (lo, side, ncell, starts, perm); ``c[perm]`` is cell-sorted."""
    k, d = c.shape
    lo = np.empty(d)
    hi = np.empty(d)
    ncell = np.ones(d, dtype=np.int64)
    side = np.sqrt(cut2) / SUB if cut2 < EXACT_CUT2 else np.inf
    # at most ~2 k^(1/d) cells per axis; wider cells stay correct, only slower
    cap = 2 * int(k ** (1.0 / d)) + 2
    for q in range(d):
        mn = np.inf
        mx = -np.inf
        for l in range(k):
            v = c[l, q]
            if v < mn:
                mn = v
            if v > mx:
                mx = v
        lo[q] = mn
        hi[q] = mx
        if not np.isfinite(mx - mn):
            side = np.inf
        elif np.isfinite(side) and (mx - mn) / side + 1 > cap:
            side = (mx - mn) / (cap - 1)
    if np.isfinite(side):
        for q in range(d):
            ncell[q] = int((hi[q] - lo[q]) / side) + 1
    total = 1
    for q in range(d):
        total *= ncell[q]
    cell_of = np.empty(k, dtype=np.int64)
    starts = np.zeros(total + 1, dtype=np.int64)
    for l in range(k):
        flat = 0
        for q in range(d):
            iq = 0
            if np.isfinite(side):
                iq = min(int((c[l, q] - lo[q]) / side), ncell[q] - 1)
            flat = flat * ncell[q] + iq
        cell_of[l] = flat
        starts[flat + 1] += 1
    for j in range(total):
        starts[j + 1] += starts[j]
    fill = starts[:total].copy()
    perm = np.empty(k, dtype=np.int64)
    for l in range(k):
        perm[fill[cell_of[l]]] = l
        fill[cell_of[l]] += 1
    return lo, side, ncell, starts, perm


@njit(cache=True, nogil=True)
def _sorted(x, perm):
    out = np.empty_like(x)
    for j in range(perm.shape[0]):
        out[j] = x[perm[j]]
    return out


@njit(cache=True, nogil=True)
def _unsort(x, perm):
    out = np.empty_like(x)
    for j in range(perm.shape[0]):
        out[perm[j]] = x[j]
    return out


@njit(cache=True, nogil=True)
def _runs(yq, lo, side, ncell, starts, run_lo, run_hi):
    """Contiguous candidate slices for query ``yq``; returns their count."""
    d = yq.shape[0]
    last = d - 1
    if not np.isfinite(side):
        run_lo[0] = 0
        run_hi[0] = starts[-1]
        return 1
    w = 2 * SUB + 1
    base = np.empty(d, dtype=np.int64)
    for q in range(d):
        base[q] = int(np.floor((yq[q] - lo[q]) / side))
    a_lo = max(base[last] - SUB, 0)
    a_hi = min(base[last] + SUB + 1, ncell[last])
    if a_hi <= a_lo:
        return 0
    ncode = 1
    for q in range(last):
        ncode *= w
    nr = 0
    for code in range(ncode):
        rem = code
        row = 0
        ok = True
        for q in range(last):
            iq = base[q] - SUB + rem % w
            rem //= w
            if iq < 0 or iq >= ncell[q]:
                ok = False
                break
            row = row * ncell[q] + iq
        if not ok:
            continue
        row *= ncell[last]
        s = starts[row + a_lo]
        e = starts[row + a_hi]
        if e > s:
            run_lo[nr] = s
            run_hi[nr] = e
            nr += 1
    return nr


@njit(cache=True, nogil=True, fastmath=True)
def _apply(y, cs, as_, s2, cut2, lo, side, ncell, starts, out):
    n, d = y.shape
    nrmax = (2 * SUB + 1) ** max(d - 1, 1)
    run_lo = np.empty(nrmax, dtype=np.int64)
    run_hi = np.empty(nrmax, dtype=np.int64)
    inv = -1.0 / s2
    acc = np.empty(d)
    for i in range(n):
        nr = _runs(y[i], lo, side, ncell, starts, run_lo, run_hi)
        acc[:] = 0.0
        for rr in range(nr):
            for j in range(run_lo[rr], run_hi[rr]):
                r = 0.0
                for q in range(d):
                    t = y[i, q] - cs[j, q]
                    r += t * t
                if r < cut2:
                    w = np.exp(r * inv)
                    for q in range(d):
                        acc[q] += w * as_[j, q]
        for q in range(d):
            out[i, q] = acc[q]


@njit(cache=True, nogil=True)
def kernel_apply(y, c, a, s2, cut2):
    """v(y_i) = sum_l K(y_i, c_l) a_l."""
    lo, side, ncell, starts, perm = _build_cells(c, cut2)
    out = np.zeros(y.shape)
    _apply(y, _sorted(c, perm), _sorted(a, perm), s2, cut2, lo, side, ncell, starts, out)
    return out


@njit(cache=True, nogil=True, fastmath=True)
def _vjp(y, cs, as_, lam, s2, cut2, lo, side, ncell, starts, gy, gc, ga):
    n, d = y.shape
    nrmax = (2 * SUB + 1) ** max(d - 1, 1)
    run_lo = np.empty(nrmax, dtype=np.int64)
    run_hi = np.empty(nrmax, dtype=np.int64)
    inv = -1.0 / s2
    f = 2.0 / s2
    for i in range(n):
        nr = _runs(y[i], lo, side, ncell, starts, run_lo, run_hi)
        for rr in range(nr):
            for j in range(run_lo[rr], run_hi[rr]):
                r = 0.0
                for q in range(d):
                    t = y[i, q] - cs[j, q]
                    r += t * t
                if r < cut2:
                    w = np.exp(r * inv)
                    b = 0.0
                    for q in range(d):
                        b += lam[i, q] * as_[j, q]
                        ga[j, q] += w * lam[i, q]
                    g = f * w * b
                    for q in range(d):
                        t = g * (y[i, q] - cs[j, q])
                        gy[i, q] -= t
                        gc[j, q] += t


@njit(cache=True, nogil=True)
def kernel_vjp(y, c, a, lam, s2, cut2):
    """Gradients of sum_i lam_i . v(y_i) w.r.t. y, c and a."""
    lo, side, ncell, starts, perm = _build_cells(c, cut2)
    gy = np.zeros(y.shape)
    gc = np.zeros(c.shape)
    ga = np.zeros(c.shape)
    _vjp(y, _sorted(c, perm), _sorted(a, perm), lam, s2, cut2, lo, side, ncell, starts, gy, gc, ga)
    return gy, _unsort(gc, perm), _unsort(ga, perm)


@njit(cache=True, nogil=True, fastmath=True)
def _ham(cs, as_, s2, cut2, lo, side, ncell, starts, dc, da):
    k, d = cs.shape
    nrmax = (2 * SUB + 1) ** max(d - 1, 1)
    run_lo = np.empty(nrmax, dtype=np.int64)
    run_hi = np.empty(nrmax, dtype=np.int64)
    inv = -1.0 / s2
    f = 2.0 / s2
    for m in range(k):
        nr = _runs(cs[m], lo, side, ncell, starts, run_lo, run_hi)
        for rr in range(nr):
            for l in range(run_lo[rr], run_hi[rr]):
                r = 0.0
                for q in range(d):
                    t = cs[m, q] - cs[l, q]
                    r += t * t
                if r < cut2:
                    w = np.exp(r * inv)
                    aa = 0.0
                    for q in range(d):
                        dc[m, q] += w * as_[l, q]
                        aa += as_[m, q] * as_[l, q]
                    g = f * w * aa
                    for q in range(d):
                        da[m, q] += g * (cs[m, q] - cs[l, q])


@njit(cache=True, nogil=True)
def hamiltonian_rhs(c, a, s2, cut2):
    """Right-hand side of the control point / momentum geodesic equations."""
    lo, side, ncell, starts, perm = _build_cells(c, cut2)
    dc = np.zeros(c.shape)
    da = np.zeros(c.shape)
    _ham(_sorted(c, perm), _sorted(a, perm), s2, cut2, lo, side, ncell, starts, dc, da)
    return _unsort(dc, perm), _unsort(da, perm)


@njit(cache=True, nogil=True, fastmath=True)
def _ham_vjp(cs, as_, cb, ab, s2, cut2, lo, side, ncell, starts, gc, ga):
    k, d = cs.shape
    nrmax = (2 * SUB + 1) ** max(d - 1, 1)
    run_lo = np.empty(nrmax, dtype=np.int64)
    run_hi = np.empty(nrmax, dtype=np.int64)
    inv = -1.0 / s2
    f = 2.0 / s2
    for m in range(k):
        nr = _runs(cs[m], lo, side, ncell, starts, run_lo, run_hi)
        for rr in range(nr):
            for l in range(run_lo[rr], run_hi[rr]):
                r = 0.0
                for q in range(d):
                    t = cs[m, q] - cs[l, q]
                    r += t * t
                if r < cut2:
                    w = np.exp(r * inv)
                    # position equation: dc_m = sum_l w a_l
                    b = 0.0
                    aa = 0.0
                    p = 0.0
                    for q in range(d):
                        b += cb[m, q] * as_[l, q]
                        aa += as_[m, q] * as_[l, q]
                        p += (ab[m, q] - ab[l, q]) * (cs[m, q] - cs[l, q])
                        ga[l, q] += w * cb[m, q]
                    gb = f * w * b
                    for q in range(d):
                        t = gb * (cs[m, q] - cs[l, q])
                        gc[m, q] -= t
                        gc[l, q] += t
                    # momentum equation
                    for q in range(d):
                        dq = cs[m, q] - cs[l, q]
                        gc[m, q] += f * w * aa * ((ab[m, q] - ab[l, q]) - f * p * dq)
                        ga[m, q] += f * w * p * as_[l, q]


@njit(cache=True, nogil=True)
def hamiltonian_vjp(c, a, cbar, abar, s2, cut2):
    """Pull back cotangents ``(cbar, abar)`` of ``hamiltonian_rhs`` to (c, a)."""
    lo, side, ncell, starts, perm = _build_cells(c, cut2)
    gc = np.zeros(c.shape)
    ga = np.zeros(c.shape)
    _ham_vjp(_sorted(c, perm), _sorted(a, perm), _sorted(cbar, perm), _sorted(abar, perm),
             s2, cut2, lo, side, ncell, starts, gc, ga)
    return _unsort(gc, perm), _unsort(ga, perm)
