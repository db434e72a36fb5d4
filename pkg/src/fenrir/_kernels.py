"""Compiled square-root Kalman kernels.

Everything here works on plain float arrays.  Covariances are carried as
lower-triangular factors ``L`` with ``Sigma = L L^T``; every covariance
update goes through :func:`tria`, a QR-based re-triangularisation.

Flag values returned by the kernels:
    0  regular solve
    1  jitter added to a singular innovation covariance
    2  pseudo-inverse fallback
"""

import numpy as np
from numba import njit

SINGULAR_RTOL = 1e-10
JITTER = 1e-12

STATUS_OK = 0
STATUS_DIVERGED = 1


@njit(cache=True)
def tria(A):
    """Lower-triangular ``L`` (n x n) with ``L L^T = A A^T`` for ``A`` (n x m)."""
    n, m = A.shape
    W = A.copy()
    v = np.empty(m)
    for i in range(min(n, m)):
        s = 0.0
        for k in range(i, m):
            s += W[i, k] * W[i, k]
        if s == 0.0:
            continue
        normx = np.sqrt(s)
        alpha = -normx if W[i, i] >= 0.0 else normx
        for k in range(i, m):
            v[k] = W[i, k]
        v[i] -= alpha
        vv = s - W[i, i] * W[i, i] + v[i] * v[i]
        if vv == 0.0:
            continue
        beta = 2.0 / vv
        for r in range(i, n):
            dot = 0.0
            for k in range(i, m):
                dot += W[r, k] * v[k]
            dot *= beta
            if dot != 0.0:
                for k in range(i, m):
                    W[r, k] -= dot * v[k]
    L = np.zeros((n, n))
    for r in range(n):
        for c in range(min(r + 1, m)):
            L[r, c] = W[r, c]
    for c in range(min(n, m)):
        if L[c, c] < 0.0:
            for r in range(c, n):
                L[r, c] = -L[r, c]
    return L


@njit(cache=True)
def _finite(a):
    for x in a.ravel():
        if not np.isfinite(x):
            return False
    return True


@njit(cache=True)
def _is_singular(X):
    n = X.shape[0]
    dmax = 0.0
    dmin = np.inf
    for i in range(n):
        a = abs(X[i, i])
        if a > dmax:
            dmax = a
        if a < dmin:
            dmin = a
    return dmax == 0.0 or dmin <= SINGULAR_RTOL * dmax


@njit(cache=True)
def right_solve_lower(Y, X):
    """``G`` with ``G X = Y`` for lower-triangular ``X``; pseudo-inverse if singular."""
    if _is_singular(X):
        return Y @ np.linalg.pinv(X, rcond=SINGULAR_RTOL), 2
    p, q = Y.shape
    G = np.empty((p, q))
    for r in range(p):
        for j in range(q - 1, -1, -1):
            s = Y[r, j]
            for i in range(j + 1, q):
                s -= G[r, i] * X[i, j]
            G[r, j] = s / X[j, j]
    return G, 0


@njit(cache=True)
def forward_subst(X, b):
    n = b.size
    w = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= X[i, k] * w[k]
        w[i] = s / X[i, i]
    return w


@njit(cache=True)
def backward_solve_lower_t(X, B):
    """``X^{-T} B`` for lower-triangular ``X`` (back substitution on ``X^T``)."""
    n, q = B.shape
    W = np.empty((n, q))
    for c in range(q):
        for i in range(n - 1, -1, -1):
            s = B[i, c]
            for k in range(i + 1, n):
                s -= X[k, i] * W[k, c]
            W[i, c] = s / X[i, i]
    return W


@njit(cache=True)
def forward_solve_lower(X, B):
    """``X^{-1} B`` for lower-triangular ``X``."""
    n, q = B.shape
    W = np.empty((n, q))
    for c in range(q):
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= X[i, k] * W[k, c]
            W[i, c] = s / X[i, i]
    return W


@njit(cache=True)
def gain(L, A, X):
    """``L A^T (X X^T)^{-1}``, i.e. ``Sigma C^T S^{-1}`` with ``A = C L``; pinv if ``X`` is singular."""
    if not _finite(X):
        return np.full((L.shape[0], A.shape[0]), np.nan), 3
    if _is_singular(X):
        Xp = np.linalg.pinv(X, rcond=SINGULAR_RTOL)
        return np.ascontiguousarray(L @ A.T @ Xp.T @ Xp), 2
    Gt = backward_solve_lower_t(X, forward_solve_lower(X, A @ L.T))
    return np.ascontiguousarray(Gt.T), 0


@njit(cache=True)
def predict_joint(m, L, Phi, Qs):
    """Prediction plus backward kernel ``x_prev = G x_next + (m - G m_pred) + noise``.

    One QR of ``[[Phi L, Qs], [L, 0]]`` gives the lower-triangular
    ``[[X, 0], [Y, Z]]`` with ``X X^T = Sigma^-``, ``G = Y X^{-1}`` and
    ``Z Z^T = Sigma - G Sigma^- G^T``.  ``Sigma^-`` contains the process
    noise, so ``X`` is singular only for zero diffusion.
    """
    D = m.size
    B = np.zeros((2 * D, 2 * D))
    B[:D, :D] = Phi @ L
    B[:D, D:] = Qs
    B[D:, :D] = L
    T = tria(B)
    X = np.ascontiguousarray(T[:D, :D])
    Y = np.ascontiguousarray(T[D:, :D])
    Z = np.ascontiguousarray(T[D:, D:])
    flag = 0
    if not _finite(T):
        G = np.full((D, D), np.nan)
        flag = 3
    elif _is_singular(X):
        G = np.ascontiguousarray(Y @ np.linalg.pinv(X, rcond=SINGULAR_RTOL))
        flag = 2
    else:
        G = np.ascontiguousarray(backward_solve_lower_t(X, np.ascontiguousarray(Y.T)).T)
    return Phi @ m, X, G, Z, flag


@njit(cache=True)
def dirac_correct(m, L, Cm, resid):
    """Noise-free update on ``Cm x = Cm m + resid``; the new factor is ``(I - K Cm) L``.

    Returns the updated mean and (not necessarily triangular) factor, the
    innovation factor and a flag.
    """
    k = Cm.shape[0]
    A = Cm @ L
    X = tria(A)
    flag = 0
    if _is_singular(X):
        tr = 0.0
        for i in range(k):
            for j in range(A.shape[1]):
                tr += A[i, j] * A[i, j]
        AJ = np.zeros((k, A.shape[1] + k))
        AJ[:, : A.shape[1]] = A
        jit = np.sqrt(max(JITTER * tr / k, 0.0))
        for i in range(k):
            AJ[i, A.shape[1] + i] = jit
        X = tria(AJ)
        flag = 1
    Kg, f2 = gain(L, A, X)
    flag = max(flag, f2)
    return m + Kg @ resid, L - Kg @ A, X, flag


@njit(cache=True)
def correct(m, L, Cm, Rs, resid):
    """Measurement update for ``resid = y - Cm m`` with noise factor ``Rs``.

    Returns the updated mean and factor, the innovation factor ``X``
    (``S = X X^T``), the whitened residual ``X^{-1} resid`` and a flag.
    """
    k = Cm.shape[0]
    D = m.size
    CL = Cm @ L
    B = np.zeros((k + D, k + D))
    B[:k, :k] = Rs
    B[:k, k:] = CL
    B[k:, k:] = L
    F = tria(B)
    X = F[:k, :k].copy()
    flag = 0
    if _is_singular(X):
        S = CL @ CL.T + Rs @ Rs.T
        tr = 0.0
        for i in range(k):
            tr += S[i, i]
        jit = np.sqrt(max(JITTER * tr / k, 0.0))
        RJ = np.zeros((k, 2 * k))
        RJ[:, :k] = Rs
        for i in range(k):
            RJ[i, k + i] = jit
        B[:k, :k] = tria(RJ)
        F = tria(B)
        X = F[:k, :k].copy()
        flag = 1
    Y = F[k:, :k].copy()
    Lnew = F[k:, k:].copy()
    if _is_singular(X):
        Xp = np.linalg.pinv(X, rcond=SINGULAR_RTOL)
        w = Xp @ resid
        flag = 2
    else:
        w = forward_subst(X, resid)
    return m + Y @ w, Lnew, X, w, flag


@njit(cache=True)
def min_eig_sym(S):
    k = S.shape[0]
    if k == 1:
        return S[0, 0]
    if k == 2:
        a, b, c = S[0, 0], S[0, 1], S[1, 1]
        return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return np.linalg.eigvalsh(S)[0]


@njit(cache=True)
def pn_correct(mp, Lp, fy, J, s0, s1, d, use_jac):
    """Dirac update on ``E1^T x - f(t, E0^T x) = 0`` in preconditioned coordinates."""
    D = mp.size
    Cm = np.zeros((d, D))
    e = np.empty(d)
    for i in range(d):
        Cm[i, d + i] = s1
        e[i] = fy[i] - s1 * mp[d + i]
    if use_jac:
        for i in range(d):
            for j in range(d):
                Cm[i, j] = -s0 * J[i, j]
    if not (_finite(mp) and _finite(Lp) and _finite(Cm)):
        return mp, Lp, np.inf, np.nan, 3
    m, L, X, flag = dirac_correct(mp, Lp, Cm, e)
    min_eig = min_eig_sym(X @ X.T) if _finite(X) else np.nan
    return m, L, np.sqrt(np.sum(e * e)), min_eig, flag


# not disk-cached: numba cannot reload cached overloads keyed by function arguments
@njit
def pn_loop(f, jac, theta, grid, x0, Phis, Qss, step_idx, s0, s1, d, use_jac):
    K = grid.size
    D = x0.size
    means = np.zeros((K, D))
    gains = np.zeros((K - 1, D, D))
    offsets = np.zeros((K - 1, D))
    noises = np.zeros((K - 1, D, D))
    resnorms = np.zeros(K - 1)
    flags = np.zeros(K - 1, dtype=np.int64)
    min_eig = np.inf
    m = x0.copy()
    L = np.zeros((D, D))
    means[0] = m
    J = np.zeros((d, d))
    for n in range(1, K):
        idx = step_idx[n - 1]
        mp, Lp, G, Z, pflag = predict_joint(m, L, Phis[idx], Qss[idx])
        t = grid[n]
        y = s0 * mp[:d]
        fy = f(t, y, theta)
        if use_jac:
            J = jac(t, y, theta)
        mn, Ln, rn, me, cflag = pn_correct(mp, Lp, fy, J, s0, s1, d, use_jac)
        gains[n - 1] = G
        offsets[n - 1] = m - G @ mp
        noises[n - 1] = Z
        resnorms[n - 1] = rn
        flags[n - 1] = max(pflag, cflag)
        if me < min_eig:
            min_eig = me
        m = mn
        L = Ln
        means[n] = m
        if not (_finite(m) and _finite(L) and _finite(G)):
            return STATUS_DIVERGED, n, means, L, gains, offsets, noises, resnorms, min_eig, flags
    return STATUS_OK, K - 1, means, tria(L), gains, offsets, noises, resnorms, min_eig, flags


@njit(cache=True)
def chain_predict(m, L, G, zeta, Ps, sqk):
    D = m.size
    B = np.empty((D, 2 * D))
    B[:, :D] = G @ L
    B[:, D:] = sqk * Ps
    return G @ m + zeta, tria(B)


@njit(cache=True)
def regression_nll(xi, Lam, gains, offsets, noises, obs_row, U, Hs, Rs, sqk):
    """Negative log marginal likelihood by a time-reversed Kalman filter."""
    K = obs_row.size
    k = Hs.shape[0]
    m = xi.copy()
    L = sqk * Lam
    nll = 0.0
    worst = 0
    half_log_2pi = 0.5 * np.log(2.0 * np.pi)
    for n in range(K - 1, -1, -1):
        r = obs_row[n]
        if r >= 0:
            resid = U[r] - Hs @ m
            m, L, X, w, flag = correct(m, L, Hs, Rs, resid)
            nll += 0.5 * np.sum(w * w) + k * half_log_2pi
            for i in range(k):
                nll += np.log(abs(X[i, i]))
            worst = max(worst, flag)
        if n > 0:
            m, L = chain_predict(m, L, gains[n - 1], offsets[n - 1], noises[n - 1], sqk)
    return nll, worst


@njit(cache=True)
def regression_posterior(xi, Lam, gains, offsets, noises, obs_row, U, Hs, Rs, sqk):
    """Time-reversed filter followed by a forward-in-time smoothing pass."""
    K = obs_row.size
    D = xi.size
    k = Hs.shape[0]
    filt_m = np.zeros((K, D))
    filt_L = np.zeros((K, D, D))
    pred_m = np.zeros((K, D))
    sgain = np.zeros((K, D, D))
    snoise = np.zeros((K, D, D))
    n_obs = 0
    for n in range(K):
        if obs_row[n] >= 0:
            n_obs += 1
    resids = np.zeros((n_obs, k))
    innov = np.zeros((n_obs, k, k))
    m = xi.copy()
    L = sqk * Lam
    nll = 0.0
    worst = 0
    half_log_2pi = 0.5 * np.log(2.0 * np.pi)
    j = n_obs - 1
    for n in range(K - 1, -1, -1):
        r = obs_row[n]
        if r >= 0:
            resid = U[r] - Hs @ m
            resids[j] = resid
            m, L, X, w, flag = correct(m, L, Hs, Rs, resid)
            innov[j] = X @ X.T
            j -= 1
            nll += 0.5 * np.sum(w * w) + k * half_log_2pi
            for i in range(k):
                nll += np.log(abs(X[i, i]))
            worst = max(worst, flag)
        filt_m[n] = m
        filt_L[n] = L
        if n > 0:
            G = gains[n - 1]
            B = np.zeros((2 * D, 2 * D))
            B[:D, :D] = G @ L
            B[:D, D:] = sqk * noises[n - 1]
            B[D:, :D] = L
            F = tria(B)
            Xp = F[:D, :D].copy()
            Yp = F[D:, :D].copy()
            sg, flag = right_solve_lower(Yp, Xp)
            sgain[n] = sg
            # Joseph form: stays valid when the gain comes from a pseudo-inverse
            J = np.empty((D, 2 * D))
            J[:, :D] = (np.eye(D) - sg @ G) @ L
            J[:, D:] = sqk * (sg @ noises[n - 1])
            snoise[n] = tria(J)
            m = G @ m + offsets[n - 1]
            L = Xp
            pred_m[n - 1] = m
    post_m = np.zeros((K, D))
    post_L = np.zeros((K, D, D))
    post_m[0] = filt_m[0]
    post_L[0] = filt_L[0]
    for n in range(1, K):
        sg = sgain[n]
        post_m[n] = filt_m[n] + sg @ (post_m[n - 1] - pred_m[n - 1])
        B = np.empty((D, 2 * D))
        B[:, :D] = sg @ post_L[n - 1]
        B[:, D:] = snoise[n]
        post_L[n] = tria(B)
    return nll, worst, post_m, post_L, resids, innov
