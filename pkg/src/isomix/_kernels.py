"""Inner loops of the Metropolis-within-Gibbs sampler.

Everything here takes plain arrays so it compiles under numba; with
``ISOMIX_DISABLE_JIT=1`` the same functions run as ordinary Python.
Random numbers come only from the ``Generator`` passed in.

Frozen-block flags index: 0 phi, 1 beta, 2 s, 3 c, 4 Sigma, 5 kappa, 6 tau.
"""
import math

import numpy as np

from ._jit import njit

LOG_2PI = math.log(2.0 * math.pi)


# -- small dense linear algebra (J is 1-3 in practice) -----------------------

@njit
def chol(A, L):
    """Lower Cholesky factor of ``A`` into ``L``; returns False if not PD."""
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@njit
def forward(L, b, out):
    """Solve ``L x = b`` for lower-triangular ``L``."""
    n = L.shape[0]
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]


@njit
def backward_t(L, b, out):
    """Solve ``L' x = b`` for lower-triangular ``L``."""
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]


@njit
def inv_logdet(S, Sinv, L, work, work2):
    """Inverse and log-determinant of SPD ``S``; logdet is ``inf`` if not PD."""
    n = S.shape[0]
    if not chol(S, L):
        return np.inf
    ld = 0.0
    for i in range(n):
        ld += 2.0 * math.log(L[i, i])
    for col in range(n):
        for i in range(n):
            work[i] = 1.0 if i == col else 0.0
        forward(L, work, work2)
        backward_t(L, work2, work)
        for i in range(n):
            Sinv[i, col] = work[i]
    return ld


@njit
def quad_form(d, P):
    n = d.shape[0]
    acc = 0.0
    for a in range(n):
        row = 0.0
        for b in range(n):
            row += P[a, b] * d[b]
        acc += d[a] * row
    return acc


# -- model pieces ------------------------------------------------------------

@njit
def ilr_inv_row(phi, V, out):
    K = V.shape[0]
    zmax = -np.inf
    for k in range(K):
        z = 0.0
        for r in range(V.shape[1]):
            z += V[k, r] * phi[r]
        out[k] = z
        if z > zmax:
            zmax = z
    tot = 0.0
    for k in range(K):
        out[k] = math.exp(out[k] - zmax)
        tot += out[k]
    for k in range(K):
        out[k] /= tot


@njit
def mix_weights(p, q, has_q, w):
    """Per-isotope source weights ``w[k, j]``."""
    K, J = w.shape
    for j in range(J):
        if has_q:
            tot = 0.0
            for k in range(K):
                w[k, j] = p[k] * q[k, j]
                tot += w[k, j]
            for k in range(K):
                w[k, j] /= tot
        else:
            for k in range(K):
                w[k, j] = p[k]


@njit
def mix_mean_row(p, s_i, c_i, q, has_q, w, out):
    mix_weights(p, q, has_q, w)
    K, J = w.shape
    for j in range(J):
        acc = 0.0
        for k in range(K):
            acc += w[k, j] * (s_i[k, j] + c_i[k, j])
        out[j] = acc


@njit
def row_loglik(y, m, Sinv, logdet, d):
    J = y.shape[0]
    for j in range(J):
        d[j] = y[j] - m[j]
    return -0.5 * (J * LOG_2PI + logdet + quad_form(d, Sinv))


@njit
def phi_prior_row(phi_i, gamma_i, kappa):
    acc = 0.0
    for r in range(phi_i.shape[0]):
        e = phi_i[r] - gamma_i[r]
        acc -= 0.5 * e * e / kappa[r]
    return acc


@njit
def phi_target(y, phi_i, gamma_i, kappa, s_i, c_i, q, has_q, V, Sinv, logdet, p_out, m_out, w, d):
    """Log target of one consumer's ilr coordinates, up to a constant."""
    ilr_inv_row(phi_i, V, p_out)
    mix_mean_row(p_out, s_i, c_i, q, has_q, w, m_out)
    return row_loglik(y, m_out, Sinv, logdet, d) + phi_prior_row(phi_i, gamma_i, kappa)


@njit
def beta_prior_local(beta, r, l, val, beta_sd, sp_lo, sp_hi, tau):
    """Terms of the coefficient prior that involve ``beta[r, l]`` set to ``val``."""
    if sp_lo <= l < sp_hi:
        acc = 0.0
        if l == sp_lo:
            acc -= 0.5 * val * val / (beta_sd * beta_sd)
        else:
            e = val - beta[r, l - 1]
            acc -= 0.5 * tau[r] * e * e
        if l + 1 < sp_hi:
            e = beta[r, l + 1] - val
            acc -= 0.5 * tau[r] * e * e
        return acc
    return -0.5 * val * val / (beta_sd * beta_sd)


@njit
def beta_delta_target(X, phi, gamma, kappa, r, l, delta, helmert):
    """Change in the phi-prior term when ``beta[r, l]`` moves by ``delta``."""
    N, K1 = phi.shape
    acc = 0.0
    for i in range(N):
        x = X[i, l] * delta
        if x == 0.0:
            continue
        for rr in range(K1):
            if rr == r or (helmert and r == 0):
                e_old = phi[i, rr] - gamma[i, rr]
                e_new = e_old - x
                acc -= 0.5 * (e_new * e_new - e_old * e_old) / kappa[rr]
    return acc


@njit
def shift_move(rng, Y, X, s, c, q, has_q, V, helmert, beta, phi, gamma, p, mean, Sinv, logdet,
               r, l, delta, beta_sd, sp_lo, sp_hi, tau, phi_t, p_t, m_t, w, d):
    """Move ``beta[r, l]`` and the matching ilr coordinates together.

    Residuals ``phi - gamma`` are unchanged, so only the likelihood and the
    coefficient prior enter the ratio. Returns True on acceptance.
    """
    N, J = Y.shape
    K1 = phi.shape[1]
    K = V.shape[0]
    lr = beta_prior_local(beta, r, l, beta[r, l] + delta, beta_sd, sp_lo, sp_hi, tau)
    lr -= beta_prior_local(beta, r, l, beta[r, l], beta_sd, sp_lo, sp_hi, tau)
    for i in range(N):
        x = X[i, l] * delta
        for rr in range(K1):
            phi_t[i, rr] = phi[i, rr]
            if x != 0.0 and (rr == r or (helmert and r == 0)):
                phi_t[i, rr] += x
        if x == 0.0:
            continue
        ilr_inv_row(phi_t[i], V, p_t[i])
        mix_mean_row(p_t[i], s[i], c[i], q, has_q, w, m_t[i])
        lr += row_loglik(Y[i], m_t[i], Sinv, logdet, d) - row_loglik(Y[i], mean[i], Sinv, logdet, d)
    if math.log(rng.random()) < lr:
        beta[r, l] += delta
        for i in range(N):
            x = X[i, l] * delta
            if x == 0.0:
                continue
            for rr in range(K1):
                if rr == r or (helmert and r == 0):
                    gamma[i, rr] += x
                phi[i, rr] = phi_t[i, rr]
            for k in range(K):
                p[i, k] = p_t[i, k]
            for j in range(J):
                mean[i, j] = m_t[i, j]
        return True
    return False


@njit
def draw_inv_wishart(rng, dof, S, out, L, A, T, work, work2):
    """``out ~ IW(dof, S)`` by the Bartlett decomposition."""
    n = S.shape[0]
    chol(S, L)
    for i in range(n):
        for j in range(n):
            A[i, j] = 0.0
        A[i, i] = math.sqrt(2.0 * rng.standard_gamma(0.5 * (dof - i)))
        for j in range(i):
            A[i, j] = rng.standard_normal()
    # T = A^{-1}, lower triangular
    for col in range(n):
        for i in range(n):
            work[i] = 1.0 if i == col else 0.0
        forward(A, work, work2)
        for i in range(n):
            T[i, col] = work2[i]
    # Sigma = M M' with M = L T'
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += L[i, k] * T[j, k]
            A[i, j] = acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += A[i, k] * A[j, k]
            out[i, j] = acc
    for i in range(n):
        for j in range(i):
            v = 0.5 * (out[i, j] + out[j, i])
            out[i, j] = v
            out[j, i] = v


@njit
def gibbs_latent(rng, y, mean_i, lat_i, mu, prec, w, Sinv, P, L, b, z, tmp, r_vec):
    """Conditionally Gaussian update of one consumer's source (or TEF) rows.

    ``lat_i`` is updated in place and ``mean_i`` kept consistent.
    """
    K, J = lat_i.shape
    for k in range(K):
        for j in range(J):
            r_vec[j] = y[j] - (mean_i[j] - w[k, j] * lat_i[k, j])
        for a in range(J):
            acc = 0.0
            for c in range(J):
                P[a, c] = prec[k, a, c] + w[k, a] * Sinv[a, c] * w[k, c]
                acc += prec[k, a, c] * mu[k, c] + w[k, a] * Sinv[a, c] * r_vec[c]
            b[a] = acc
        chol(P, L)
        forward(L, b, tmp)
        backward_t(L, tmp, z)  # z = P^{-1} b
        for j in range(J):
            tmp[j] = rng.standard_normal()
        backward_t(L, tmp, r_vec)
        for j in range(J):
            new = z[j] + r_vec[j]
            mean_i[j] += w[k, j] * (new - lat_i[k, j])
            lat_i[k, j] = new


@njit
def sweep(rng, Y, X, mu_s, prec_s, mu_c, prec_c, q, has_q, V, helmert, sp_lo, sp_hi,
          beta_sd, nu0, Psi, ka, kb, ta, tb,
          beta, phi, kappa, Sigma, s, c, tau,
          gamma, p, mean, Sinv, logdet,
          phi_scale, beta_scale, shift_scale, phi_acc, beta_acc, shift_acc, frozen):
    """One full sweep. Returns nothing; all state arrays are updated in place.

    ``logdet`` is a length-1 array holding log|Sigma|.
    """
    N, J = Y.shape
    K = V.shape[0]
    K1 = K - 1
    L_cols = X.shape[1]
    w = np.empty((K, J))
    d = np.empty(J)
    p_new = np.empty(K)
    m_new = np.empty(J)
    phi_new = np.empty(K1)
    P = np.empty((J, J))
    Lm = np.empty((J, J))
    bv = np.empty(J)
    zv = np.empty(J)
    tmp = np.empty(J)
    rv = np.empty(J)

    # ilr coordinates, one random-walk block per consumer
    if not frozen[0]:
        for i in range(N):
            cur = row_loglik(Y[i], mean[i], Sinv, logdet[0], d) + phi_prior_row(phi[i], gamma[i], kappa)
            for r in range(K1):
                phi_new[r] = phi[i, r] + phi_scale[i] * rng.standard_normal()
            new = phi_target(Y[i], phi_new, gamma[i], kappa, s[i], c[i], q, has_q, V, Sinv, logdet[0],
                             p_new, m_new, w, d)
            if math.log(rng.random()) < new - cur:
                for r in range(K1):
                    phi[i, r] = phi_new[r]
                for k in range(K):
                    p[i, k] = p_new[k]
                for j in range(J):
                    mean[i, j] = m_new[j]
                phi_acc[i] += 1

    # regression / spline coefficients, scalar random walks
    if not frozen[1]:
        for r in range(K1):
            for l in range(L_cols):
                delta = beta_scale[r, l] * rng.standard_normal()
                old = beta[r, l]
                lr = beta_delta_target(X, phi, gamma, kappa, r, l, delta, helmert)
                lr += beta_prior_local(beta, r, l, old + delta, beta_sd, sp_lo, sp_hi, tau)
                lr -= beta_prior_local(beta, r, l, old, beta_sd, sp_lo, sp_hi, tau)
                if math.log(rng.random()) < lr:
                    beta[r, l] = old + delta
                    for i in range(N):
                        x = X[i, l] * delta
                        for rr in range(K1):
                            if rr == r or (helmert and r == 0):
                                gamma[i, rr] += x
                    beta_acc[r, l] += 1

    # joint shifts of coefficients and ilr coordinates
    if not (frozen[0] or frozen[1]) and N > 0:
        phi_t = np.empty((N, K1))
        p_t = np.empty((N, K))
        m_t = np.empty((N, J))
        for r in range(K1):
            for l in range(L_cols):
                delta = shift_scale[r, l] * rng.standard_normal()
                if shift_move(rng, Y, X, s, c, q, has_q, V, helmert, beta, phi, gamma, p, mean, Sinv, logdet[0],
                              r, l, delta, beta_sd, sp_lo, sp_hi, tau, phi_t, p_t, m_t, w, d):
                    shift_acc[r, l] += 1

    # source and TEF random effects (exact Gibbs)
    if not (frozen[2] and frozen[3]):
        for i in range(N):
            mix_weights(p[i], q, has_q, w)
            if not frozen[2]:
                gibbs_latent(rng, Y[i], mean[i], s[i], mu_s[i], prec_s[i], w, Sinv, P, Lm, bv, zv, tmp, rv)
            if not frozen[3]:
                gibbs_latent(rng, Y[i], mean[i], c[i], mu_c[i], prec_c[i], w, Sinv, P, Lm, bv, zv, tmp, rv)

    # residual covariance, inverse-Wishart
    if not frozen[4]:
        S = Psi.copy()
        for i in range(N):
            for a in range(J):
                d[a] = Y[i, a] - mean[i, a]
            for a in range(J):
                for b in range(J):
                    S[a, b] += d[a] * d[b]
        A = np.empty((J, J))
        T = np.empty((J, J))
        draw_inv_wishart(rng, nu0 + N, S, Sigma, Lm, A, T, tmp, zv)
        ld = inv_logdet(Sigma, Sinv, Lm, tmp, zv)
        logdet[0] = ld

    # random-effect variances, inverse-gamma
    if not frozen[5]:
        for r in range(K1):
            ss = 0.0
            for i in range(N):
                e = phi[i, r] - gamma[i, r]
                ss += e * e
            shape = ka + 0.5 * N
            rate = kb + 0.5 * ss
            kappa[r] = rate / rng.standard_gamma(shape)

    # spline roughness precisions, gamma
    if sp_hi > sp_lo and not frozen[6]:
        for r in range(K1):
            ss = 0.0
            for l in range(sp_lo + 1, sp_hi):
                e = beta[r, l] - beta[r, l - 1]
                ss += e * e
            shape = ta + 0.5 * (sp_hi - sp_lo - 1)
            rate = tb + 0.5 * ss
            tau[r] = rng.standard_gamma(shape) / rate


@njit
def deviance(Y, mean, Sinv, logdet):
    N, J = Y.shape
    d = np.empty(J)
    acc = 0.0
    for i in range(N):
        acc += row_loglik(Y[i], mean[i], Sinv, logdet, d)
    return -2.0 * acc


@njit
def regenerate_y(rng, Y, mean, Sigma):
    """Replace consumer data by a draw from the likelihood at the current state."""
    N, J = Y.shape
    L = np.empty((J, J))
    chol(Sigma, L)
    z = np.empty(J)
    for i in range(N):
        for j in range(J):
            z[j] = rng.standard_normal()
        for a in range(J):
            acc = mean[i, a]
            for b in range(a + 1):
                acc += L[a, b] * z[b]
            Y[i, a] = acc


@njit
def refresh_caches(X, V, q, has_q, helmert, beta, phi, s, c, Sigma, gamma, p, mean, Sinv):
    """Recompute derived arrays from the primary state; returns log|Sigma|."""
    N = phi.shape[0]
    K, K1 = V.shape
    J = Sigma.shape[0]
    L_cols = X.shape[1]
    w = np.empty((K, J))
    for i in range(N):
        for r in range(K1):
            acc = 0.0
            for l in range(L_cols):
                b = beta[r, l]
                if helmert and r > 0:
                    b += beta[0, l]
                acc += X[i, l] * b
            gamma[i, r] = acc
        ilr_inv_row(phi[i], V, p[i])
        mix_mean_row(p[i], s[i], c[i], q, has_q, w, mean[i])
    Lm = np.empty((J, J))
    return inv_logdet(Sigma, Sinv, Lm, np.empty(J), np.empty(J))


@njit
def run_chain(rng, Y, X, mu_s, prec_s, mu_c, prec_c, q, has_q, V, helmert, sp_lo, sp_hi,
              beta_sd, nu0, Psi, ka, kb, ta, tb,
              beta, phi, kappa, Sigma, s, c, tau,
              phi_scale, beta_scale, shift_scale, frozen,
              n_iter, burn_in, thin, adapt_window, target_phi, target_beta, regen_y,
              out_beta, out_phi, out_kappa, out_Sigma, out_s, out_c, out_tau, out_dev, out_iter,
              phi_acc, beta_acc, shift_acc):
    """Run ``n_iter`` sweeps, adapting proposal scales during burn-in only.

    Draw ``it`` (0-based) is kept when ``it >= burn_in`` and
    ``(it - burn_in + 1) % thin == 0``. Acceptance counts cover the
    post-burn-in sweeps.
    """
    N, J = Y.shape
    K, K1 = V.shape
    gamma = np.empty((N, K1))
    p = np.empty((N, K))
    mean = np.empty((N, J))
    Sinv = np.empty((J, J))
    logdet = np.empty(1)
    logdet[0] = refresh_caches(X, V, q, has_q, helmert, beta, phi, s, c, Sigma, gamma, p, mean, Sinv)
    win_phi = np.zeros(N)
    win_beta = np.zeros(beta.shape)
    win_shift = np.zeros(beta.shape)
    n_batch = 0
    kept = 0
    for it in range(n_iter):
        adapting = it < burn_in
        if adapting:
            sweep(rng, Y, X, mu_s, prec_s, mu_c, prec_c, q, has_q, V, helmert, sp_lo, sp_hi,
                  beta_sd, nu0, Psi, ka, kb, ta, tb, beta, phi, kappa, Sigma, s, c, tau,
                  gamma, p, mean, Sinv, logdet, phi_scale, beta_scale, shift_scale, win_phi, win_beta,
                  win_shift, frozen)
            if (it + 1) % adapt_window == 0:
                n_batch += 1
                gain = 2.0 / (n_batch + 1.0) ** 0.6
                for i in range(N):
                    rate = win_phi[i] / adapt_window
                    phi_scale[i] *= math.exp(gain * (rate - target_phi))
                    win_phi[i] = 0.0
                for r in range(K1):
                    for l in range(beta.shape[1]):
                        rate = win_beta[r, l] / adapt_window
                        beta_scale[r, l] *= math.exp(gain * (rate - target_beta))
                        win_beta[r, l] = 0.0
                        rate = win_shift[r, l] / adapt_window
                        shift_scale[r, l] *= math.exp(gain * (rate - target_beta))
                        win_shift[r, l] = 0.0
        else:
            sweep(rng, Y, X, mu_s, prec_s, mu_c, prec_c, q, has_q, V, helmert, sp_lo, sp_hi,
                  beta_sd, nu0, Psi, ka, kb, ta, tb, beta, phi, kappa, Sigma, s, c, tau,
                  gamma, p, mean, Sinv, logdet, phi_scale, beta_scale, shift_scale, phi_acc, beta_acc,
                  shift_acc, frozen)
        if regen_y:
            regenerate_y(rng, Y, mean, Sigma)
        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            out_beta[kept] = beta
            out_phi[kept] = phi
            out_kappa[kept] = kappa
            out_Sigma[kept] = Sigma
            out_s[kept] = s
            out_c[kept] = c
            out_tau[kept] = tau
            out_dev[kept] = deviance(Y, mean, Sinv, logdet[0])
            out_iter[kept] = it + 1
            kept += 1
    return kept
