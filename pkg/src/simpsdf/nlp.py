"""Sequential quadratic programming for tiny problems of the form

    minimize f(x)  subject to  c(x) = 0,  lower <= x <= upper,   x in R^n, n <= 3.

Each iteration solves the quadratic subproblem (Lagrangian Hessian, linearised
constraint, box) exactly by enumerating active bound sets, then performs a
backtracking line search on the l1 merit ``f + nu |c|`` with a second-order
correction. The Lagrangian is ``L = f + lam * c``.

The batch driver runs many independent problems in lock-step with numpy;
converged problems drop out of the active set. Callables receive
``(x, rows)`` where ``rows`` indexes the problems being evaluated.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class Status(enum.IntEnum):
    CONVERGED = 0
    MAX_ITER = 1
    INFEASIBLE = 2
    STALLED = 3


@dataclass
class NlpProblem:
    objective: Callable  # x -> (f, grad f)
    constraint: Callable  # x -> (c, grad c)
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray
    hessian: Callable | None = None  # (x, lam) -> Hessian of f + lam * c
    c_tol: float = 1e-8
    g_tol: float = 1e-6
    x_tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class NlpResult:
    x: np.ndarray
    fun: float
    status: Status
    iterations: int
    multiplier: float
    constraint: float
    kkt: float
    merit_history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == Status.CONVERGED


@dataclass
class BatchResult:
    x: np.ndarray
    fun: np.ndarray
    constraint: np.ndarray
    multiplier: np.ndarray
    kkt: np.ndarray
    status: np.ndarray
    iterations: np.ndarray

    @property
    def success(self) -> np.ndarray:
        return self.status == Status.CONVERGED


def _combos(n: int):
    """Active-set patterns grouped by free index set: 0 free, 1 lower, 2 upper."""
    groups = {}
    for pat in itertools.product((0, 1, 2), repeat=n):
        free = tuple(i for i in range(n) if pat[i] == 0)
        groups.setdefault(free, []).append(pat)
    return groups


_COMBOS = {n: _combos(n) for n in (1, 2, 3)}


def _qp_objective(H, g, p):
    return 0.5 * np.einsum("bi,bij,bj->b", p, H, p) + np.einsum("bi,bi->b", g, p)


def solve_box_qp(H, g, a, r, plo, phi):
    """Minimise ``p.H.p/2 + g.p`` s.t. ``a.p = r``, ``plo <= p <= phi`` (batched).

    ``H`` must be positive definite. Returns ``(p, mu, ok)`` where ``mu`` is the
    multiplier of the equality (``H p + g + mu a = 0`` on the free variables).
    """
    nb, n = g.shape
    btol = 1e-12 * (1.0 + np.maximum(np.abs(plo), np.abs(phi)))
    rtol = 1e-11 * (np.sum(np.abs(a) * np.maximum(np.abs(plo), np.abs(phi)), axis=1) + np.abs(r)) + 1e-300
    asq = np.sum(a * a, axis=1)

    Hinv = np.linalg.inv(H)
    u = np.einsum("bij,bj->bi", Hinv, g)
    w = np.einsum("bij,bj->bi", Hinv, a)
    s = np.sum(a * w, axis=1)
    deg = asq <= 1e-300
    mu = np.where(deg, 0.0, -(r + np.sum(a * u, axis=1)) / np.where(deg, 1.0, s))
    p = -u - mu[:, None] * w
    ok = np.all((p >= plo - btol) & (p <= phi + btol), axis=1)
    ok &= ~deg | (np.abs(r) <= rtol)
    best_p = np.where(ok[:, None], p, 0.0)
    best_mu = np.where(ok, mu, 0.0)
    rest = np.flatnonzero(~ok)
    if rest.size == 0:
        return best_p, best_mu, ok

    H_, g_, a_, r_, lo_, hi_ = H[rest], g[rest], a[rest], r[rest], plo[rest], phi[rest]
    bt, rt, asq_ = btol[rest], rtol[rest], asq[rest]
    k = rest.size
    best_q = np.full(k, np.inf)
    bp = np.zeros((k, n))
    bmu = np.zeros(k)
    for free, pats in _COMBOS[n].items():
        fixed = [i for i in range(n) if i not in free]
        F = list(free)
        if F:
            Hff_inv = np.linalg.inv(H_[:, F][:, :, F])
            wF = np.einsum("bij,bj->bi", Hff_inv, a_[:, F])
            sF = np.sum(a_[:, F] * wF, axis=1)
            aFsq = np.sum(a_[:, F] ** 2, axis=1)
            degF = aFsq <= 1e-24 * asq_ + 1e-300
        for pat in pats:
            pp = np.zeros((k, n))
            for i in fixed:
                pp[:, i] = lo_[:, i] if pat[i] == 1 else hi_[:, i]
            rres = r_ - np.sum(a_[:, fixed] * pp[:, fixed], axis=1) if fixed else r_.copy()
            if F:
                gp = g_[:, F] + np.einsum("bij,bj->bi", H_[:, F][:, :, fixed], pp[:, fixed]) if fixed else g_[:, F]
                uF = np.einsum("bij,bj->bi", Hff_inv, gp)
                m = np.where(degF, 0.0, -(rres + np.sum(a_[:, F] * uF, axis=1)) / np.where(degF, 1.0, sF))
                pp[:, F] = -uF - m[:, None] * wF
                feas = np.all((pp[:, F] >= lo_[:, F] - bt[:, F]) & (pp[:, F] <= hi_[:, F] + bt[:, F]), axis=1)
                feas &= ~degF | (np.abs(rres) <= rt)
            else:
                m = np.zeros(k)
                feas = np.abs(rres) <= rt
            q = np.where(feas, _qp_objective(H_, g_, pp), np.inf)
            better = q < best_q
            best_q = np.where(better, q, best_q)
            bp[better] = pp[better]
            bmu[better] = m[better]
    found = np.isfinite(best_q)
    bp = np.clip(bp, lo_, hi_)
    best_p[rest] = np.where(found[:, None], bp, 0.0)
    best_mu[rest] = np.where(found, bmu, 0.0)
    ok[rest] = found
    return best_p, best_mu, ok


def _convexify(H, a):
    """Make ``H`` positive definite without changing the QP on ``a.p = const``."""
    w = np.linalg.eigvalsh(H)
    scale = np.maximum(np.abs(w).max(axis=1), 1e-12)
    bad = w[:, 0] < 1e-8 * scale
    if not bad.any():
        return H
    H = H.copy()
    Hb = H[bad]
    ab = a[bad]
    asq = np.sum(ab * ab, axis=1)
    sigma = np.where(asq > 0, 2.0 * scale[bad] / np.where(asq > 0, asq, 1.0), 0.0)
    Hb = Hb + sigma[:, None, None] * np.einsum("bi,bj->bij", ab, ab)
    wb, V = np.linalg.eigh(Hb)
    sb = np.maximum(np.abs(wb).max(axis=1), 1e-12)
    wb = np.maximum(wb, 1e-8 * sb[:, None])
    H[bad] = np.einsum("bij,bj,bkj->bik", V, wb, V)
    return H


def _stationarity(g, a, mu, at_lo, at_hi):
    """Projected-gradient KKT residual, minimised over the equality multiplier.

    At box corners the multiplier returned by the QP is not unique, so the
    residual is also evaluated at the breakpoints ``-g_i / a_i`` of the
    (convex, piecewise linear) residual as a function of the multiplier.
    Returns ``(residual, multiplier)``.
    """
    safe = np.where(a != 0, a, 1.0)
    cands = np.concatenate([mu[:, None], np.where(a != 0, -g / safe, mu[:, None])], axis=1)
    gl = g[:, None, :] + cands[..., None] * a[:, None, :]
    lo_, hi_ = at_lo[:, None, :], at_hi[:, None, :]
    gproj = np.where((lo_ & (gl > 0)) | (hi_ & (gl < 0)), 0.0, gl)
    res = np.abs(gproj).max(axis=2)
    j = np.argmin(res, axis=1)
    r = np.arange(len(g))
    return res[r, j], cands[r, j]


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("objective or constraint returned a non-finite value")


def minimize_batch(
    objective,
    constraint,
    lower,
    upper,
    x0,
    hessian=None,
    c_tol: float = 1e-8,
    g_tol: float = 1e-6,
    x_tol: float = 1e-8,
    max_iter: int = 100,
    record_merit: bool = False,
) -> BatchResult:
    """Solve ``B`` independent problems; see the module docstring for the callable protocol."""
    X = np.array(x0, dtype=float, copy=True)
    nb, n = X.shape
    if not 1 <= n <= 3:
        raise ValueError("only 1 to 3 variables are supported")
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (nb, n)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (nb, n)).copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    X = np.clip(X, lo, hi)
    all_rows = np.arange(nb)

    F, G = objective(X, all_rows)
    C, A = constraint(X, all_rows)
    F, G, C, A = (np.asarray(v, dtype=float) for v in (F, G, C, A))
    _check_finite(F, G, C, A)
    lam = np.zeros(nb)
    nu = np.zeros(nb)
    kkt = np.full(nb, np.inf)
    status = np.full(nb, Status.MAX_ITER, dtype=np.int8)
    iters = np.zeros(nb, dtype=np.int64)
    done = np.zeros(nb, dtype=bool)
    Bk = None if hessian is not None else np.broadcast_to(np.eye(n), (nb, n, n)).copy()
    merit_log = [[] for _ in range(nb)] if record_merit else None

    for it in range(max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        x, f, g, c, a = X[act], F[act], G[act], C[act], A[act]
        H = hessian(x, lam[act], act) if hessian is not None else Bk[act]
        H = _convexify(np.asarray(H, dtype=float), a)
        plo, phi = lo[act] - x, hi[act] - x
        rmin = np.sum(np.minimum(a * plo, a * phi), axis=1)
        rmax = np.sum(np.maximum(a * plo, a * phi), axis=1)
        r = np.clip(-c, rmin, rmax)
        p, mu, qp_ok = solve_box_qp(H, g, a, r, plo, phi)

        at_lo = x - lo[act] <= 1e-12 * (1.0 + np.abs(lo[act]))
        at_hi = hi[act] - x <= 1e-12 * (1.0 + np.abs(hi[act]))
        kkt[act], lam_kkt = _stationarity(g, a, mu, at_lo, at_hi)
        feasible = np.abs(c) <= c_tol
        small = np.abs(p).max(axis=1) <= x_tol * (1.0 + np.abs(x).max(axis=1))
        # a final iterate reports the multiplier that certifies stationarity
        lam[act] = np.where(small, lam_kkt, mu)
        conv = feasible & small & (kkt[act] <= g_tol)
        finished = small | ~qp_ok
        status[act[conv]] = Status.CONVERGED
        status[act[finished & ~conv & ~feasible]] = Status.INFEASIBLE
        status[act[finished & ~conv & feasible]] = Status.STALLED
        done[act[finished | conv]] = True
        if it == max_iter:
            break
        keep = ~(finished | conv)
        if not keep.any():
            break
        act, x, f, g, c, a, p, mu, H = (v[keep] for v in (act, x, f, g, c, a, p, mu, H))
        iters[act] += 1

        nu[act] = np.maximum(nu[act], 1.5 * np.abs(mu) + 1e-12)
        nua = nu[act]
        m0 = f + nua * np.abs(c)
        ap = np.sum(a * p, axis=1)
        D = np.sum(g * p, axis=1) + nua * (np.abs(c + ap) - np.abs(c))
        D = np.minimum(D, 0.0)

        # full step, then second-order correction, then backtracking
        xt = x + p
        ft, gt = objective(xt, act)
        ct, at = constraint(xt, act)
        _check_finite(ft, gt, ct, at)
        mt = ft + nua * np.abs(ct)
        accept = mt <= m0 + 1e-4 * D
        need = np.flatnonzero(~accept)
        if need.size:
            asq = np.sum(a[need] ** 2, axis=1)
            q = -(ct[need] / np.where(asq > 0, asq, 1.0))[:, None] * a[need]
            xs = np.clip(xt[need] + q, lo[act[need]], hi[act[need]])
            fs, gs = objective(xs, act[need])
            cs, as_ = constraint(xs, act[need])
            _check_finite(fs, gs, cs, as_)
            ms = fs + nua[need] * np.abs(cs)
            ok = ms <= m0[need] + 1e-4 * D[need]
            idx = need[ok]
            xt[idx], ft[idx], gt[idx], ct[idx], at[idx], mt[idx] = xs[ok], fs[ok], gs[ok], cs[ok], as_[ok], ms[ok]
            accept[idx] = True
        alpha = np.ones(act.size)
        for _ls in range(30):
            need = np.flatnonzero(~accept)
            if need.size == 0:
                break
            alpha[need] *= 0.5
            xb = x[need] + alpha[need, None] * p[need]
            fb, gb = objective(xb, act[need])
            cb, ab = constraint(xb, act[need])
            _check_finite(fb, gb, cb, ab)
            mb = fb + nua[need] * np.abs(cb)
            ok = mb <= m0[need] + 1e-4 * alpha[need] * D[need]
            idx = need[ok]
            xt[idx], ft[idx], gt[idx], ct[idx], at[idx], mt[idx] = xb[ok], fb[ok], gb[ok], cb[ok], ab[ok], mb[ok]
            accept[idx] = True
        stuck = ~accept
        if stuck.any():
            # near a solution the merit decrease drops below rounding noise;
            # a stalled line search at a feasible KKT point is a success
            good = stuck & (np.abs(c) <= c_tol) & (kkt[act] <= g_tol)
            status[act[stuck]] = np.where(good[stuck], Status.CONVERGED, Status.STALLED)
            done[act[stuck]] = True
        acc = np.flatnonzero(accept)
        if hessian is None and acc.size:
            s = xt[acc] - x[acc]
            y = (gt[acc] + mu[acc, None] * at[acc]) - (g[acc] + mu[acc, None] * a[acc])
            Bs = np.einsum("bij,bj->bi", Bk[act[acc]], s)
            sBs = np.sum(s * Bs, axis=1)
            sy = np.sum(s * y, axis=1)
            theta = np.where(sy >= 0.2 * sBs, 1.0, 0.8 * sBs / np.where(sBs - sy != 0, sBs - sy, 1.0))
            y = theta[:, None] * y + (1.0 - theta)[:, None] * Bs
            sy = np.sum(s * y, axis=1)
            upd = (sBs > 1e-300) & (sy > 1e-300)
            Bn = (
                Bk[act[acc]]
                + np.einsum("bi,bj->bij", y, y) / np.where(upd, sy, 1.0)[:, None, None]
                - np.einsum("bi,bj->bij", Bs, Bs) / np.where(upd, sBs, 1.0)[:, None, None]
            )
            Bk[act[acc[upd]]] = Bn[upd]
        if merit_log is not None:
            for j in acc:
                merit_log[act[j]].append((float(m0[j]), float(mt[j])))
        X[act[acc]], F[act[acc]], G[act[acc]] = xt[acc], ft[acc], gt[acc]
        C[act[acc]], A[act[acc]] = ct[acc], at[acc]

    X = np.clip(X, lo, hi)
    res = BatchResult(X, F, C, lam, kkt, status, iters)
    if merit_log is not None:
        res.merit_history = merit_log
    return res


def minimize_constrained(problem: NlpProblem) -> NlpResult:
    """Solve one problem; NaN from the callables raises ``FloatingPointError``."""
    x0 = np.atleast_1d(problem.x0)

    def obj(X, rows):
        f, g = problem.objective(X[0])
        return np.array([f], dtype=float), np.asarray(g, dtype=float)[None]

    def con(X, rows):
        c, a = problem.constraint(X[0])
        return np.array([c], dtype=float), np.asarray(a, dtype=float)[None]

    hess = None
    if problem.hessian is not None:
        hess = lambda X, lam, rows: np.asarray(problem.hessian(X[0], lam[0]), dtype=float)[None]

    res = minimize_batch(
        obj,
        con,
        problem.lower,
        problem.upper,
        x0[None],
        hessian=hess,
        c_tol=problem.c_tol,
        g_tol=problem.g_tol,
        x_tol=problem.x_tol,
        max_iter=problem.max_iter,
        record_merit=True,
    )
    return NlpResult(
        x=res.x[0],
        fun=float(res.fun[0]),
        status=Status(int(res.status[0])),
        iterations=int(res.iterations[0]),
        multiplier=float(res.multiplier[0]),
        constraint=float(res.constraint[0]),
        kkt=float(res.kkt[0]),
        merit_history=res.merit_history[0],
    )
