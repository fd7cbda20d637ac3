"""Squared MMD estimators for multi-kernels and the kernel-weight program.

Three estimators are provided:

* :func:`mmd2_full_biased` - the V-statistic over all pairs,
* :func:`mmd2_full_unbiased` - the U-statistic over all pairs (quadratic cost),
* :func:`mmd2_linear` - the linear-time estimator over disjoint quad-tuples
  ``(s_{2i-1}, s_{2i}, t_{2i-1}, t_{2i})``.

:func:`optimize_beta` re-weights the kernels of a family so that the linear
statistic is as large as possible relative to its spread, by solving a small
convex QP (:func:`qp_solve_simplex`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import MultiKernel, gaussian_from_sqdist, sqdist_matrix

# rows per block for the quadratic estimators; small blocks keep the
# BLOCK * n kernel matrix in cache
BLOCK = 64


class DegenerateQP(ValueError):
    """No kernel has a positive MMD estimate, so the program is infeasible."""


@dataclass
class MmdEstimate:
    """Linear-time MK-MMD estimate.

    ``g_samples`` has one row per kernel and one column per quad-tuple.
    ``variance`` is the per-kernel sample variance of those rows.
    """

    d2: float
    per_kernel_d2: np.ndarray
    g_samples: np.ndarray
    variance: np.ndarray
    beta: np.ndarray

    @property
    def n_tuples(self):
        return self.g_samples.shape[1]


def _as_rows(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"{name} must be a list of vectors, got shape {x.shape}")
    return x


def _power_chain(sigma):
    """Evaluation plan for a bandwidth family, widest kernel first.

    Returns ``(order, squarings)``: ``squarings[i]`` is how many times the
    previous kernel in ``order`` is squared to give the next one, or ``None``
    when the bandwidth ratio is not a power of two and ``exp`` is needed.
    """
    order = np.argsort(-np.asarray(sigma), kind="stable")
    squarings = [None]
    for prev, cur in zip(order[:-1], order[1:]):
        ratio = (sigma[prev] / sigma[cur]) ** 2
        steps = int(round(np.log2(ratio))) if ratio >= 1 else -1
        exact = 0 <= steps <= 16 and abs(ratio - 2.0**steps) <= 1e-12 * ratio
        squarings.append(steps if exact else None)
    return order, squarings


def _kernel_sum(a, b, mk, exclude_diagonal=False):
    """Sum of multi-kernel values over all row pairs, in fixed block order.

    Gaussians whose squared bandwidths differ by a power of two are powers of
    one another, so a ladder costs one ``exp`` per block plus squarings.
    """
    sigma = np.asarray(mk.sigma, dtype=np.float64)
    order, squarings = _power_chain(sigma)
    total = 0.0
    for start in range(0, a.shape[0], BLOCK):
        block = a[start:start + BLOCK]
        sq = sqdist_matrix(block, b)
        if exclude_diagonal:
            rows = np.arange(block.shape[0])
            cols = rows + start
            keep = cols < b.shape[0]
            diagonal = (rows[keep], cols[keep])
        k = None
        for u, steps in zip(order, squarings):
            if steps is None:
                k = np.exp(sq * (-0.5 / sigma[u] ** 2))
            else:
                for _ in range(steps):
                    np.multiply(k, k, out=k)
            part = float(k.sum())
            if exclude_diagonal:
                part -= float(k[diagonal].sum())
            total += mk.beta[u] * part
    return total


def mmd2_full_biased(Xs, Xt, mk: MultiKernel):
    """``mean k(s, s') + mean k(t, t') - 2 mean k(s, t)`` over all pairs."""
    xs, xt = _as_rows(Xs, "Xs"), _as_rows(Xt, "Xt")
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("both sample sets must be non-empty")
    if xs.shape[1] != xt.shape[1]:
        raise ValueError("sample dimensions differ")
    ns, nt = len(xs), len(xt)
    ss = _kernel_sum(xs, xs, mk) / ns**2
    tt = _kernel_sum(xt, xt, mk) / nt**2
    st = _kernel_sum(xs, xt, mk) / (ns * nt)
    return ss + tt - 2.0 * st


def mmd2_full_unbiased(Xs, Xt, mk: MultiKernel):
    """U-statistic of squared MMD; within-domain diagonals are excluded."""
    xs, xt = _as_rows(Xs, "Xs"), _as_rows(Xt, "Xt")
    if len(xs) < 2 or len(xt) < 2:
        raise ValueError("unbiased MMD needs at least 2 samples per set")
    if xs.shape[1] != xt.shape[1]:
        raise ValueError("sample dimensions differ")
    ns, nt = len(xs), len(xt)
    ss = _kernel_sum(xs, xs, mk, exclude_diagonal=True) / (ns * (ns - 1))
    tt = _kernel_sum(xt, xt, mk, exclude_diagonal=True) / (nt * (nt - 1))
    st = _kernel_sum(xs, xt, mk) / (ns * nt)
    return ss + tt - 2.0 * st


def _quad_tuples(Hs, Ht):
    hs, ht = _as_rows(Hs, "Hs"), _as_rows(Ht, "Ht")
    if hs.shape != ht.shape:
        raise ValueError(f"source and target batches differ: {hs.shape} vs {ht.shape}")
    if hs.shape[0] < 2:
        raise ValueError("linear MMD needs at least 2 samples per domain")
    m = hs.shape[0] // 2
    return hs, ht, m


def _pair_sqdist(a, b):
    diff = a - b
    return np.einsum("ij,ij->i", diff, diff), diff


def mmd2_linear(Hs, Ht, mk: MultiKernel, with_grad=False):
    """Linear-time estimate over ``m = n // 2`` quad-tuples.

    With ``with_grad`` also returns the gradients of the combined ``d2`` with
    respect to ``Hs`` and ``Ht`` (zero for a dropped odd trailing sample).
    """
    hs, ht, m = _quad_tuples(Hs, Ht)
    sa, sb = hs[0:2 * m:2], hs[1:2 * m:2]
    ta, tb = ht[0:2 * m:2], ht[1:2 * m:2]
    pairs = [(sa, sb), (ta, tb), (sa, tb), (sb, ta)]
    sq, diffs = zip(*(_pair_sqdist(a, b) for a, b in pairs))
    # kv[j]: (n_kernels, m) kernel values for the j-th pair of every tuple
    kv = [gaussian_from_sqdist(d, mk.sigma) for d in sq]
    g = kv[0] + kv[1] - kv[2] - kv[3]
    per_kernel = g.mean(axis=1)
    variance = g.var(axis=1, ddof=1) if m > 1 else np.zeros(len(mk))
    est = MmdEstimate(
        d2=float(mk.beta @ per_kernel),
        per_kernel_d2=per_kernel,
        g_samples=g,
        variance=variance,
        beta=mk.beta,
    )
    if not with_grad:
        return est

    # d k_u(x, y) / dx = -k_u(x, y) (x - y) / sigma_u^2
    w = mk.beta / (m * mk.sigma**2)
    coef = [w @ k for k in kv]
    dhs = np.zeros_like(hs)
    dht = np.zeros_like(ht)
    signs = (1.0, 1.0, -1.0, -1.0)
    targets = [(dhs, 0, dhs, 1), (dht, 0, dht, 1), (dhs, 0, dht, 1), (dhs, 1, dht, 0)]
    for sign, c, diff, (left, lo, right, ro) in zip(signs, coef, diffs, targets):
        step = (sign * c)[:, None] * diff
        left[lo:2 * m:2] -= step
        right[ro:2 * m:2] += step
    return est, dhs, dht


def _project(y, d):
    """Euclidean projection onto ``{b >= 0, d @ b = 1}``.

    The projection is ``max(y - tau d, 0)`` for the ``tau`` solving
    ``d @ max(y - tau d, 0) = 1``; that sum is non-increasing in ``tau`` and
    piecewise linear between the breakpoints ``y_u / d_u``, so the root is
    found exactly on its segment. Needs some ``d_u > 0``.
    """
    nz = d != 0
    breaks = np.unique(y[nz] / d[nz])

    def level(tau):
        return d @ np.maximum(y - tau * d, 0.0)

    values = np.array([level(t) for t in breaks])
    # first breakpoint where the level has dropped to 1 or below
    k = int(np.searchsorted(-values, -1.0, side="left"))
    if k == len(breaks):
        probe = breaks[-1] + 1.0
    elif k == 0:
        probe = breaks[0] - 1.0
    else:
        probe = 0.5 * (breaks[k - 1] + breaks[k])
    free = y - probe * d > 0
    dd = d[free] @ d[free]
    tau = breaks[min(k, len(breaks) - 1)] if dd == 0 else (d[free] @ y[free] - 1.0) / dd
    return np.maximum(y - tau * d, 0.0)


def qp_solve_simplex(Q, d, ridge=1e-4, max_iter=500, tol=1e-10):
    """Minimise ``b' (Q + ridge I) b`` subject to ``d @ b = 1`` and ``b >= 0``.

    Accelerated projected gradient. Kernels with ``d_u <= 0`` stay in the
    program: a kernel negatively correlated with the others can lower the
    variance. Raises :class:`DegenerateQP` if no ``d_u`` is positive.
    """
    Q = np.asarray(Q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if Q.shape != (n, n):
        raise ValueError(f"Q must be {n}x{n}, got {Q.shape}")
    if not np.any(d > 0):
        raise DegenerateQP("no kernel has a positive MMD estimate")
    A = 0.5 * (Q + Q.T) + ridge * np.eye(n)
    lipschitz = 2.0 * max(np.linalg.eigvalsh(A).max(), 1e-300)
    step = 1.0 / lipschitz
    beta = _project(np.ones(n), d)
    y, t = beta.copy(), 1.0
    for _ in range(max_iter):
        nxt = _project(y - step * 2.0 * (A @ y), d)
        if (nxt - beta) @ (A @ (nxt + beta)) > 0:
            # objective went up: drop the momentum and take a plain step
            nxt = _project(beta - step * 2.0 * (A @ beta), d)
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + ((t - 1.0) / t_next) * (nxt - beta)
        beta, t = nxt, t_next
        # stationarity: a plain projected-gradient step no longer moves
        plain = _project(beta - step * 2.0 * (A @ beta), d)
        if np.abs(plain - beta).max() < tol:
            break
    return _polish(A, d, beta)


def _polish(A, d, beta):
    """Exact minimiser on the support found by the iterations, when it is feasible.

    Projected gradient identifies the active set long before it converges on
    ill-conditioned ``A``; solving the KKT system on that set removes the
    remaining error.
    """
    support = beta > 0
    try:
        x = np.linalg.solve(A[np.ix_(support, support)], d[support])
    except np.linalg.LinAlgError:
        return beta
    denom = d[support] @ x
    if not denom > 0 or np.any(x <= 0):
        return beta
    exact = np.zeros_like(beta)
    exact[support] = x / denom
    if exact @ A @ exact <= beta @ A @ beta:
        return exact
    return beta


def optimize_beta(est: MmdEstimate, ridge=1e-4):
    """Kernel weights maximising ``d2 / sigma^2`` for the given estimate.

    Returns weights on the simplex; uniform if no kernel has positive ``d2``.
    """
    d = np.asarray(est.per_kernel_d2, dtype=np.float64)
    n = d.size
    if n == 1:
        return np.ones(1)
    g = np.asarray(est.g_samples, dtype=np.float64)
    Q = np.cov(g) if g.shape[1] > 1 else np.zeros((n, n))
    try:
        beta = qp_solve_simplex(Q, d, ridge=ridge)
    except DegenerateQP:
        return np.full(n, 1.0 / n)
    beta = np.maximum(beta, 0.0)
    return beta / beta.sum()
