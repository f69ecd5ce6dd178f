"""Hot inner loops, each with a numba path and a pure-numpy path.

The public functions dispatch on ``_accel.USE_NUMBA``. The PGD update and the
greedy substitution use only exactly-rounded arithmetic, so both paths agree
bit for bit; the transcendental and reduction kernels agree to a few ulps.
"""
import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# signed momentum step + box projection


@njit
def _pgd_update_nb(delta, grad, l1, momentum, mu, eta, eps, lo, hi):
    n, d = delta.shape
    out = np.empty_like(delta)
    mom = np.empty_like(momentum)
    for i in range(n):
        norm = l1[i]
        for k in range(d):
            g = grad[i, k] / norm if norm > 0.0 else 0.0
            m = mu * momentum[i, k] + g
            mom[i, k] = m
            s = 1.0 if m > 0.0 else (-1.0 if m < 0.0 else 0.0)
            v = delta[i, k] + eta * s
            if v > eps:
                v = eps
            elif v < -eps:
                v = -eps
            if v > hi[i, k]:
                v = hi[i, k]
            if v < lo[i, k]:
                v = lo[i, k]
            out[i, k] = v
    return out, mom


def _pgd_update_np(delta, grad, l1, momentum, mu, eta, eps, lo, hi):
    safe = np.where(l1 > 0.0, l1, 1.0)[:, None]
    g = np.where(l1[:, None] > 0.0, grad / safe, 0.0)
    mom = mu * momentum + g
    out = np.clip(delta + eta * np.sign(mom), -eps, eps)
    out = np.minimum(out, hi)
    out = np.maximum(out, lo)
    return out, mom


def pgd_update(delta, grad, momentum, mu, eta, eps, lo, hi):
    """One momentum sign step followed by projection onto ``[-eps, eps] ∩ [lo, hi]``.

    ``momentum`` accumulates the per-row l1-normalised gradient. Returns
    ``(new_delta, new_momentum)``; inputs are not modified.
    """
    delta = np.ascontiguousarray(delta, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    momentum = np.ascontiguousarray(momentum, dtype=np.float64)
    lo = np.ascontiguousarray(np.broadcast_to(lo, delta.shape), dtype=np.float64)
    hi = np.ascontiguousarray(np.broadcast_to(hi, delta.shape), dtype=np.float64)
    # shared reduction so both paths see the same normaliser
    l1 = np.abs(grad).sum(axis=1)
    fn = _pgd_update_nb if _accel.USE_NUMBA else _pgd_update_np
    return fn(delta, grad, l1, momentum, float(mu), float(eta), float(eps), lo, hi)


# ---------------------------------------------------------------------------
# greedy categorical substitution


@njit
def _greedy_nb(scores, offsets, current, budget):
    n = scores.shape[0]
    n_feat = offsets.shape[0] - 1
    out = np.full((n, max(budget, 0), 2), -1, dtype=np.int64)
    best_gain = np.empty(n_feat)
    best_tok = np.empty(n_feat, dtype=np.int64)
    used = np.empty(n_feat, dtype=np.bool_)
    for i in range(n):
        for j in range(n_feat):
            base = scores[i, offsets[j] + current[i, j]]
            bg = 0.0
            bt = -1
            for t in range(offsets[j + 1] - offsets[j]):
                if t == current[i, j]:
                    continue
                gain = scores[i, offsets[j] + t] - base
                if gain > bg:
                    bg = gain
                    bt = t
            best_gain[j] = bg
            best_tok[j] = bt
            used[j] = False
        for slot in range(budget):
            pick = -1
            pg = 0.0
            for j in range(n_feat):
                if used[j] or best_tok[j] < 0:
                    continue
                if pick < 0 or best_gain[j] > pg:
                    pick = j
                    pg = best_gain[j]
            if pick < 0:
                break
            used[pick] = True
            out[i, slot, 0] = pick
            out[i, slot, 1] = best_tok[pick]
    return out


def _greedy_np(scores, offsets, current, budget):
    n = scores.shape[0]
    n_feat = len(offsets) - 1
    out = np.full((n, max(budget, 0), 2), -1, dtype=np.int64)
    if budget <= 0 or n_feat == 0:
        return out
    gains = np.zeros((n, n_feat))
    toks = np.full((n, n_feat), -1, dtype=np.int64)
    rows = np.arange(n)
    for j in range(n_feat):
        block = scores[:, offsets[j]:offsets[j + 1]]
        g = block - block[rows, current[:, j]][:, None]
        g[rows, current[:, j]] = -np.inf
        t = np.argmax(g, axis=1)  # first maximum -> lowest token index
        bg = g[rows, t]
        ok = bg > 0.0
        gains[ok, j] = bg[ok]
        toks[ok, j] = t[ok]
    # stable sort on -gain keeps the lowest feature index among ties
    order = np.argsort(-gains, axis=1, kind="stable")
    for slot in range(min(budget, n_feat)):
        j = order[:, slot]
        ok = toks[rows, j] >= 0
        out[ok, slot, 0] = j[ok]
        out[ok, slot, 1] = toks[rows, j][ok]
    return out


def greedy_substitute(scores, offsets, current, budget):
    """Pick up to ``budget`` token swaps per row, at most one per feature.

    ``scores`` is ``n x sum(tokens)`` with feature ``j`` occupying columns
    ``offsets[j]:offsets[j+1]``. A swap ``c -> t`` gains
    ``scores[t] - scores[c]``; only strictly positive gains are taken, best
    first, ties to the lower feature then token index. Returns an int array
    ``n x budget x 2`` of ``(feature, token)`` pairs padded with ``-1``.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    current = np.ascontiguousarray(current, dtype=np.int64).reshape(scores.shape[0], len(offsets) - 1)
    fn = _greedy_nb if _accel.USE_NUMBA else _greedy_np
    return fn(scores, offsets, current, int(budget))


# ---------------------------------------------------------------------------
# Lambert W, principal branch, x >= 0


@njit
def _lambertw_nb(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        z = x[i]
        if z == 0.0:
            out[i] = 0.0
            continue
        if z <= 2.718281828459045:
            w = np.log1p(z)
        else:
            lz = np.log(z)
            w = lz - np.log(lz)
        for _ in range(64):
            ew = np.exp(w)
            f = w * ew - z
            wp1 = w + 1.0
            dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
            w -= dw
            if abs(dw) <= 1e-15 * (1.0 + abs(w)):
                break
        out[i] = w
    return out


def _lambertw_np(x):
    w = np.where(x <= np.e, np.log1p(x), 0.0)
    big = x > np.e
    lz = np.log(x[big])
    w[big] = lz - np.log(lz)
    active = x != 0.0
    w[~active] = 0.0
    for _ in range(64):
        if not active.any():
            break
        wa = w[active]
        z = x[active]
        ew = np.exp(wa)
        f = wa * ew - z
        wp1 = wa + 1.0
        dw = f / (ew * wp1 - (wa + 2.0) * f / (2.0 * wp1))
        w[active] = wa - dw
        done = np.abs(dw) <= 1e-15 * (1.0 + np.abs(wa - dw))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return w


def lambertw_array(x):
    """Halley iteration for ``w e^w = x`` on a 1-d array of non-negative reals.

    Start: ``log1p(x)`` up to ``e``, else ``log x - log log x``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    fn = _lambertw_nb if _accel.USE_NUMBA else _lambertw_np
    return fn(x)


# ---------------------------------------------------------------------------
# power iteration on a symmetric PSD matrix


@njit
def _power_nb(m, v, tol, max_iter):
    d = m.shape[0]
    lam = 0.0
    for it in range(max_iter):
        u = np.zeros(d)
        for r in range(d):
            acc = 0.0
            for c in range(d):
                acc += m[r, c] * v[c]
            u[r] = acc
        lam = 0.0
        for r in range(d):
            lam += v[r] * u[r]
        res = 0.0
        nrm = 0.0
        for r in range(d):
            e = u[r] - lam * v[r]
            res += e * e
            nrm += u[r] * u[r]
        if nrm == 0.0:
            return 0.0, it + 1
        if np.sqrt(res) <= tol * abs(lam):
            return lam, it + 1
        nrm = np.sqrt(nrm)
        for r in range(d):
            v[r] = u[r] / nrm
    return lam, max_iter


def _power_np(m, v, tol, max_iter):
    lam = 0.0
    for it in range(max_iter):
        u = m @ v
        lam = float(v @ u)
        nrm = float(np.sqrt(u @ u))
        if nrm == 0.0:
            return 0.0, it + 1
        if float(np.linalg.norm(u - lam * v)) <= tol * abs(lam):
            return lam, it + 1
        v = u / nrm
    return lam, max_iter


def power_iteration(m, tol=1e-11, max_iter=200_000):
    """Largest eigenvalue of a symmetric PSD matrix via the Rayleigh quotient.

    Stops once the residual ``||Mv - lam v||`` drops below ``tol * lam``,
    which bounds the eigenvalue error by the same amount. The start vector
    is deterministic: ``1 + k/d`` for ``k = 0..d-1``, normalised. Returns
    ``(eigenvalue, iterations)``.
    """
    m = np.ascontiguousarray(m, dtype=np.float64)
    d = m.shape[0]
    v = 1.0 + np.arange(d, dtype=np.float64) / max(d, 1)
    v /= np.linalg.norm(v)
    fn = _power_nb if _accel.USE_NUMBA else _power_np
    lam, its = fn(m, v, float(tol), int(max_iter))
    return float(lam), int(its)
