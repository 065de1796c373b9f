"""Fused per-step kernel for the FBSDE forward sweep.

Computes the ensemble moments, the affine feedback control and the
simulated-innovation EnKBF update in three passes over the members.
Numerically equivalent to ``filter.simulated_step`` plus
``ensemble.cross_cov`` and ``model.control_law`` (checked in tests).

Ensembles are stored member-last, ``(E, d, M)``, so every inner loop runs
over contiguous memory.
"""
import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def moments_and_step(X, FX, HX, L, lv, G, dW, Rinv, Rsqrt, dt, means, C, Cxf, Cxh, U, X_out):
    E, d, M = X.shape
    p = HX.shape[1]
    du = G.shape[1]
    xbar = np.empty(d)
    fbar = np.empty(d)
    hbar = np.empty(p)
    gu = np.empty(d)
    y = np.empty(d)
    gain = np.empty((d, p))
    shift = np.empty(d)
    rdw = np.empty(p)
    dX = np.empty((d, M))
    dH = np.empty((p, M))
    for e in range(E):
        for i in range(d):
            sx = 0.0
            sf = 0.0
            for m in range(M):
                sx += X[e, i, m]
                sf += FX[e, i, m]
            xbar[i] = sx / M
            fbar[i] = sf / M
            means[e, i] = xbar[i]
            for m in range(M):
                dX[i, m] = X[e, i, m] - xbar[i]
        for a in range(p):
            s = 0.0
            for m in range(M):
                s += HX[e, a, m]
            hbar[a] = s / M
            for m in range(M):
                dH[a, m] = HX[e, a, m] - hbar[a]
        for i in range(d):
            for j in range(d):
                sc = 0.0
                sf = 0.0
                for m in range(M):
                    sc += dX[i, m] * dX[j, m]
                    sf += dX[i, m] * (FX[e, j, m] - fbar[j])
                C[e, i, j] = sc / M
                Cxf[e, i, j] = sf / M
            for a in range(p):
                s = 0.0
                for m in range(M):
                    s += dX[i, m] * dH[a, m]
                Cxh[e, i, a] = s / M

        # u = -G^T (L xbar + l)
        for i in range(d):
            s = lv[e, i]
            for j in range(d):
                s += L[e, i, j] * xbar[j]
            y[i] = s
        for c in range(du):
            s = 0.0
            for i in range(d):
                s -= G[i, c] * y[i]
            U[e, c] = s
        for i in range(d):
            s = 0.0
            for c in range(du):
                s += G[i, c] * U[e, c]
            gu[i] = s

        # gain = C^{xh} R^{-1};  shift = C^{xh} R^{-1} R^{1/2} dW
        for a in range(p):
            s = 0.0
            for b in range(p):
                s += Rsqrt[a, b] * dW[e, b]
            rdw[a] = s
        for i in range(d):
            s = 0.0
            for a in range(p):
                g = 0.0
                for b in range(p):
                    g += Cxh[e, i, b] * Rinv[b, a]
                gain[i, a] = g
                s += g * rdw[a]
            shift[i] = s
        for i in range(d):
            base = dt * gu[i] + shift[i]
            for m in range(M):
                X_out[e, i, m] = X[e, i, m] + dt * FX[e, i, m] + base
            for a in range(p):
                ga = 0.5 * dt * gain[i, a]
                for m in range(M):
                    X_out[e, i, m] -= ga * dH[a, m]


@njit(cache=True)
def _cholesky(A, Lc):
    """Lower Cholesky factor of the small SPD matrix ``A``; returns the smallest squared pivot."""
    d = A.shape[0]
    pmin = np.inf
    for j in range(d):
        s = A[j, j]
        for k in range(j):
            s -= Lc[j, k] * Lc[j, k]
        if s < pmin:
            pmin = s
        if s <= 0.0:
            return s
        Lc[j, j] = np.sqrt(s)
        for i in range(j + 1, d):
            t = A[i, j]
            for k in range(j):
                t -= Lc[i, k] * Lc[j, k]
            Lc[i, j] = t / Lc[j, j]
    return pmin


@njit(cache=True)
def _chol_solve_vec(Lc, b, out):
    d = Lc.shape[0]
    for i in range(d):
        s = b[i]
        for k in range(i):
            s -= Lc[i, k] * out[k]
        out[i] = s / Lc[i, i]
    for i in range(d - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, d):
            s -= Lc[k, i] * out[k]
        out[i] = s / Lc[i, i]


@njit(cache=True)
def backward_sweep_kernel(means, cov, cxf, F, grad, GGt, dt, rel, tiny, symmetrize, cond_floor,
                          Lambda, lam, costate):
    """Backward regression sweep for ``E`` independent problems.

    ``means``/``F``/``grad``/``costate`` are ``(E, N+1, K, d)`` and hold the
    realization means, the drift and the running-cost gradient at them, and
    the costate (node ``N`` filled on entry). ``Lambda``/``lam`` have node
    ``N`` filled on entry. Returns a per-problem flag that is set when a
    factorization fails or the regression matrix has an eigenvalue ratio
    below ``cond_floor``, so that the caller can redo the sweep with the
    reference implementation.
    """
    E, N1, K, d = means.shape
    flags = np.zeros(E, dtype=np.bool_)
    A = np.empty((d, d))
    Lc = np.zeros((d, d))
    J = np.empty((d, d))
    col = np.empty(d)
    sol = np.empty(d)
    gam = np.empty((K, d))
    xb = np.empty((K, d))
    xc = np.empty(d)
    gm = np.empty(d)
    Cxx = np.empty((d, d))
    Bm = np.empty((d, d))
    Lnew = np.empty((d, d))
    for e in range(E):
        for n in range(N1 - 2, -1, -1):
            for i in range(d):
                xc[i] = 0.0
                gm[i] = 0.0
            for k in range(K):
                # statistical Jacobian J = (C_k + eps I)^{-1} C_k^{xf}
                tr = 0.0
                for i in range(d):
                    tr += cov[e, n + 1, k, i, i]
                eps = rel * tr / d + tiny
                for i in range(d):
                    for j in range(d):
                        A[i, j] = cov[e, n + 1, k, i, j]
                    A[i, i] += eps
                if _cholesky(A, Lc) <= 0.0:
                    flags[e] = True
                    break
                for j in range(d):
                    for i in range(d):
                        col[i] = cxf[e, n + 1, k, i, j]
                    _chol_solve_vec(Lc, col, sol)
                    for i in range(d):
                        J[i, j] = sol[i]
                # regression target and back-integrated mean
                for i in range(d):
                    sj = 0.0
                    sg = 0.0
                    for j in range(d):
                        y = costate[e, n + 1, k, j]
                        sj += J[i, j] * y
                        sg += GGt[i, j] * y
                    g = costate[e, n + 1, k, i] + dt * sj + dt * grad[e, n + 1, k, i]
                    x = means[e, n + 1, k, i] - dt * (F[e, n + 1, k, i] - sg)
                    gam[k, i] = g
                    xb[k, i] = x
                    gm[i] += g
                    xc[i] += x
            if flags[e]:
                break
            for i in range(d):
                gm[i] /= K
                xc[i] /= K
            for k in range(K):
                for i in range(d):
                    xb[k, i] -= xc[i]
                    gam[k, i] -= gm[i]
            tr = 0.0
            for i in range(d):
                for j in range(i, d):
                    s = 0.0
                    for k in range(K):
                        s += xb[k, i] * xb[k, j]
                    Cxx[i, j] = s / K
                    Cxx[j, i] = s / K
                tr += Cxx[i, i]
            ridge = rel * tr / d + tiny
            # B = C^{gx} - P C^{xx}, P the slope of the following node
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for k in range(K):
                        s += gam[k, i] * xb[k, j]
                    s /= K
                    for m in range(d):
                        s -= Lambda[e, n + 1, i, m] * Cxx[m, j]
                    Bm[i, j] = s
                    A[i, j] = Cxx[i, j]
                A[i, i] += ridge
            w = np.linalg.eigvalsh(A)
            if w[0] <= 0.0 or w[0] <= cond_floor * w[d - 1] or _cholesky(A, Lc) <= 0.0:
                flags[e] = True
                break
            # Lambda = P + B A^{-1}: solve A z = B[i, :] row by row (A symmetric)
            for i in range(d):
                for j in range(d):
                    col[j] = Bm[i, j]
                _chol_solve_vec(Lc, col, sol)
                for j in range(d):
                    Lnew[i, j] = Lambda[e, n + 1, i, j] + sol[j]
            for i in range(d):
                for j in range(d):
                    if symmetrize:
                        Lambda[e, n, i, j] = 0.5 * (Lnew[i, j] + Lnew[j, i])
                    else:
                        Lambda[e, n, i, j] = Lnew[i, j]
            for i in range(d):
                s = gm[i]
                for j in range(d):
                    s -= Lambda[e, n, i, j] * xc[j]
                lam[e, n, i] = s
            for k in range(K):
                for i in range(d):
                    s = lam[e, n, i]
                    for j in range(d):
                        s += Lambda[e, n, i, j] * means[e, n, k, j]
                    costate[e, n, k, i] = s
    return flags
