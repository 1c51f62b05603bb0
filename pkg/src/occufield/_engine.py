"""Compiled Gibbs/Metropolis engine for one MCMC chain.

Update sweep per iteration (all conditionals of the same augmented joint):
  z (exact Bernoulli, forced to 1 at detections) ->
  w ~ PG(1, occupancy linear predictor) ->
  beta (conjugate normal) -> omega (sequential site conditionals under the
  neighbor factorization) -> sigma2 (inverse gamma) -> phi (adaptive
  random-walk on log scale) -> eta (sequential AR(1) conditionals) ->
  sigma2T (inverse gamma) -> rho (adaptive random-walk on atanh scale) ->
  alpha (PG-augmented conjugate normal over surveyed occupied cells).

Everything runs on one numpy Generator so chains are bit-reproducible.
Status codes: 0 ok, 1 factorization failure, 2 non-finite state.
"""

import math

import numpy as np
from numba import njit

from .pg import pg_draw

_LOG_2PI = math.log(2.0 * math.pi)
_JITTER = 1e-8
_EPS = 1e-12


@njit(cache=True)
def _expit(x):
    if x > 35.0:
        x = 35.0
    elif x < -35.0:
        x = -35.0
    p = 1.0 / (1.0 + math.exp(-x))
    if p < _EPS:
        p = _EPS
    elif p > 1.0 - _EPS:
        p = 1.0 - _EPS
    return p


@njit(cache=True)
def _chol_solve_small(a, rhs, sol):
    """In-place Cholesky of a, then solve a @ sol = rhs. Returns 0 on success."""
    n = a.shape[0]
    for i in range(n):
        s = a[i, i]
        for q in range(i):
            s -= a[i, q] * a[i, q]
        if s <= 0.0:
            return 1
        a[i, i] = math.sqrt(s)
        for r in range(i + 1, n):
            s2 = a[r, i]
            for q in range(i):
                s2 -= a[r, q] * a[i, q]
            a[r, i] = s2 / a[i, i]
    for i in range(n):
        s = rhs[i]
        for q in range(i):
            s -= a[i, q] * sol[q]
        sol[i] = s / a[i, i]
    for i in range(n - 1, -1, -1):
        s = sol[i]
        for q in range(i + 1, n):
            s -= a[q, i] * sol[q]
        sol[i] = s / a[i, i]
    return 0


@njit(cache=True)
def _mvn_from_precision(gen, prec, rhs, out):
    """Draw N(prec^-1 rhs, prec^-1); prec is destroyed. Returns 0 on success."""
    n = prec.shape[0]
    mu = np.empty(n)
    if _chol_solve_small(prec, rhs, mu) != 0:
        return 1
    # prec now holds L; solve L^T u = standard normal for the fluctuation
    zdraw = np.empty(n)
    for i in range(n):
        zdraw[i] = gen.standard_normal()
    for i in range(n - 1, -1, -1):
        s = zdraw[i]
        for q in range(i + 1, n):
            s -= prec[q, i] * out[q]
        out[i] = s / prec[i, i]
    for i in range(n):
        out[i] += mu[i]
    return 0


@njit(cache=True)
def _nngp_factors(nbr_count, d_self, d_cross, phi, b_out, f_out):
    """Conditional coefficients/variances for each ordered site at decay phi.

    Correlation scale: multiply f by sigma2 for the actual variance.
    Jitters the neighbor correlation diagonal once on failure.
    """
    n_sites, m = d_self.shape
    cmat = np.empty((m, m))
    v = np.empty(m)
    sol = np.empty(m)
    for k in range(n_sites):
        c = nbr_count[k]
        if c == 0:
            f_out[k] = 1.0
            for s in range(m):
                b_out[k, s] = 0.0
            continue
        ok = 1
        for attempt in range(2):
            jit = _JITTER if attempt == 1 else 0.0
            for a in range(c):
                v[a] = math.exp(-phi * d_self[k, a])
                for bb in range(c):
                    cmat[a, bb] = math.exp(-phi * d_cross[k, a, bb])
                cmat[a, a] += jit
            ok = _chol_solve_small(cmat[:c, :c], v[:c], sol[:c])
            if ok == 0:
                fk = 1.0
                for a in range(c):
                    fk -= sol[a] * v[a]
                if fk > 0.0:
                    f_out[k] = fk
                    for s in range(c):
                        b_out[k, s] = sol[s]
                    for s in range(c, m):
                        b_out[k, s] = 0.0
                    break
                ok = 1
        if ok != 0:
            return 1
    return 0


@njit(cache=True)
def _nngp_log_density(omega_ord, nbr_idx, nbr_count, b, f, sigma2):
    n_sites = omega_ord.shape[0]
    out = 0.0
    for k in range(n_sites):
        mean = 0.0
        for s in range(nbr_count[k]):
            mean += b[k, s] * omega_ord[nbr_idx[k, s]]
        var = sigma2 * f[k]
        r = omega_ord[k] - mean
        out += -0.5 * (_LOG_2PI + math.log(var) + r * r / var)
    return out


@njit(cache=True)
def _ar1_log_density(eta, rho, sigma2T):
    out = -0.5 * (_LOG_2PI + math.log(sigma2T) + eta[0] * eta[0] / sigma2T)
    v = sigma2T * (1.0 - rho * rho)
    for t in range(1, eta.shape[0]):
        r = eta[t] - rho * eta[t - 1]
        out += -0.5 * (_LOG_2PI + math.log(v) + r * r / v)
    return out


@njit(cache=True)
def _marginal_loglik_shifted(y, g, any_det, x_occ, v_det, beta, alpha,
                             omega_ord, inv_order, eta, d_beta0, d_alpha0):
    """Occupancy-state-marginalized log likelihood with the two intercepts
    shifted by (d_beta0, d_alpha0); z and the augmentation variables are
    integrated out, so this supports collapsed intercept moves."""
    n_i, n_t, n_j = y.shape
    kb = x_occ.shape[2]
    ka = v_det.shape[3]
    total = 0.0
    for i in range(n_i):
        om_i = omega_ord[inv_order[i]]
        for t in range(n_t):
            n_surv = 0
            det_ll = 0.0
            abs_ll = 0.0
            has_det = any_det[i, t] == 1
            for j in range(n_j):
                if g[i, t, j] > 0.0:
                    n_surv += 1
                    s = d_alpha0
                    for q in range(ka):
                        s += v_det[i, t, j, q] * alpha[q]
                    p = _expit(s)
                    if has_det:
                        det_ll += math.log(p) if y[i, t, j] > 0.0 else math.log1p(-p)
                    else:
                        abs_ll += math.log1p(-p)
            if n_surv == 0:
                continue
            s = om_i + eta[t] + d_beta0
            for q in range(kb):
                s += x_occ[i, t, q] * beta[q]
            psi = _expit(s)
            if has_det:
                total += math.log(psi) + det_ll
            else:
                total += np.logaddexp(math.log(psi) + abs_ll, math.log1p(-psi))
    return total


@njit(cache=True)
def run_chain(
    gen,
    # data
    y,            # (I, T, J) float64 in {0, 1}
    g,            # (I, T, J) float64 in {0, 1}
    any_det,      # (I, T) uint8
    x_occ,        # (I, T, Kb)
    v_det,        # (I, T, J, Ka), zeros where unsurveyed
    # neighbor graph (ordered space)
    order,        # (I,) ordered position -> original site
    inv_order,    # (I,) original site -> ordered position
    nbr_idx, nbr_count, d_self, d_cross,
    child_ptr, child_idx, child_slot,
    # priors
    beta_pm, beta_pv, alpha_pm, alpha_pv,
    sig2_shape, sig2_scale, sig2t_shape, sig2t_scale,
    phi_lo, phi_hi,
    # controls
    n_iter, n_burn, thin, batch_length,
    fix_phi, fix_sigma2, fix_rho, fix_sigma2t, has_intercept, has_det_intercept,
    # initial state
    beta0, alpha0, omega0_ord, eta0, z0, phi0, sigma20, rho0, sigma2t0,
    step_phi0, step_rho0,
    # outputs
    out_beta, out_alpha, out_phi, out_sigma2, out_rho, out_sigma2t,
    out_omega, out_eta, out_z, out_psi, out_rates, status,
):
    n_i, n_t, n_j = y.shape
    kb = x_occ.shape[2]
    ka = v_det.shape[3]

    beta = beta0.copy()
    alpha = alpha0.copy()
    omega_ord = omega0_ord.copy()
    eta = eta0.copy()
    z = z0.copy().astype(np.float64)
    phi = phi0
    sigma2 = sigma20
    rho = rho0
    sigma2t = sigma2t0

    b = np.zeros((n_i, nbr_idx.shape[1]))
    f = np.ones(n_i)
    if _nngp_factors(nbr_count, d_self, d_cross, phi, b, f) != 0:
        status[0] = 1
        status[1] = -1
        return

    b_prop = np.zeros_like(b)
    f_prop = np.ones(n_i)

    w = np.empty((n_i, n_t))
    lin_occ = np.empty((n_i, n_t))
    lin_det = np.empty((n_i, n_t, n_j))
    lik_prec_site = np.empty(n_i)
    lik_num_site = np.empty(n_i)

    step_phi = step_phi0
    step_rho = step_rho0
    acc_phi = 0
    acc_rho = 0
    acc_phi_total = 0
    acc_rho_total = 0
    acc_pcg_total = 0
    batch_no = 0
    draw_idx = 0

    prec_b = np.empty((kb, kb))
    rhs_b = np.empty(kb)
    prec_a = np.empty((ka, ka))
    rhs_a = np.empty(ka)

    # running (Welford) covariance of the two intercepts drives the
    # collapsed seesaw proposal; full-history adaptation is diminishing
    pcg_n = 0.0
    pcg_mb = 0.0
    pcg_ma = 0.0
    pcg_m2b = 0.0
    pcg_m2a = 0.0
    pcg_mab = 0.0
    pcg_l11 = 0.10
    pcg_l21 = 0.0
    pcg_l22 = 0.05
    pcg_scale = 1.0
    acc_pcg = 0

    for it in range(n_iter):
        # collapsed intercept move: with single-visit data the occupancy
        # and detection levels trade off almost freely given z, so update
        # (beta0, alpha0) jointly under the z-marginalized likelihood and
        # let the z redraw below restore the augmented state
        if has_intercept == 1 and has_det_intercept == 1:
            e1 = gen.standard_normal()
            e2 = gen.standard_normal()
            db = pcg_scale * pcg_l11 * e1
            da = pcg_scale * (pcg_l21 * e1 + pcg_l22 * e2)
            cur_ll = _marginal_loglik_shifted(
                y, g, any_det, x_occ, v_det, beta, alpha, omega_ord, inv_order, eta, 0.0, 0.0
            )
            prop_ll = _marginal_loglik_shifted(
                y, g, any_det, x_occ, v_det, beta, alpha, omega_ord, inv_order, eta, db, da
            )
            log_ratio = prop_ll - cur_ll
            log_ratio += -0.5 * ((beta[0] + db - beta_pm[0]) ** 2 - (beta[0] - beta_pm[0]) ** 2) / beta_pv[0]
            log_ratio += -0.5 * ((alpha[0] + da - alpha_pm[0]) ** 2 - (alpha[0] - alpha_pm[0]) ** 2) / alpha_pv[0]
            if math.log(gen.random()) < log_ratio:
                beta[0] += db
                alpha[0] += da
                acc_pcg += 1
                acc_pcg_total += 1
        # detection linear predictors under current alpha
        for i in range(n_i):
            for t in range(n_t):
                for j in range(n_j):
                    if g[i, t, j] > 0.0:
                        s = 0.0
                        for q in range(ka):
                            s += v_det[i, t, j, q] * alpha[q]
                        lin_det[i, t, j] = s

        # occupancy linear predictors and z update
        for i in range(n_i):
            om_i = omega_ord[inv_order[i]]
            for t in range(n_t):
                s = 0.0
                for q in range(kb):
                    s += x_occ[i, t, q] * beta[q]
                s += om_i + eta[t]
                lin_occ[i, t] = s
                if any_det[i, t] == 1:
                    z[i, t] = 1.0
                else:
                    psi = _expit(s)
                    log_q = 0.0
                    for j in range(n_j):
                        if g[i, t, j] > 0.0:
                            log_q += math.log1p(-_expit(lin_det[i, t, j]))
                    num = psi * math.exp(log_q)
                    pr = num / (num + 1.0 - psi)
                    z[i, t] = 1.0 if gen.random() < pr else 0.0

        # PG weights for the occupancy layer
        for i in range(n_i):
            for t in range(n_t):
                w[i, t] = pg_draw(gen, lin_occ[i, t])

        # beta: conjugate normal given w
        for a in range(kb):
            rhs_b[a] = beta_pm[a] / beta_pv[a]
            for bb in range(kb):
                prec_b[a, bb] = 1.0 / beta_pv[a] if a == bb else 0.0
        for i in range(n_i):
            om_i = omega_ord[inv_order[i]]
            for t in range(n_t):
                wt = w[i, t]
                kappa = z[i, t] - 0.5
                resid = kappa - wt * (om_i + eta[t])
                for a in range(kb):
                    xa = x_occ[i, t, a]
                    rhs_b[a] += xa * resid
                    for bb in range(a, kb):
                        prec_b[a, bb] += wt * xa * x_occ[i, t, bb]
        for a in range(kb):
            for bb in range(a):
                prec_b[a, bb] = prec_b[bb, a]
        if _mvn_from_precision(gen, prec_b, rhs_b, beta) != 0:
            status[0] = 1
            status[1] = it
            return

        # omega: site-likelihood terms, then a sequential sweep in ordered space
        for i in range(n_i):
            acc_p = 0.0
            acc_n = 0.0
            for t in range(n_t):
                s = 0.0
                for q in range(kb):
                    s += x_occ[i, t, q] * beta[q]
                acc_p += w[i, t]
                acc_n += (z[i, t] - 0.5) - w[i, t] * (s + eta[t])
            lik_prec_site[i] = acc_p
            lik_num_site[i] = acc_n
        for k in range(n_i):
            orig = order[k]
            fk = sigma2 * f[k]
            prec = 1.0 / fk + lik_prec_site[orig]
            mean_par = 0.0
            for s in range(nbr_count[k]):
                mean_par += b[k, s] * omega_ord[nbr_idx[k, s]]
            num = mean_par / fk + lik_num_site[orig]
            for ci in range(child_ptr[k], child_ptr[k + 1]):
                ch = child_idx[ci]
                slot = child_slot[ci]
                r = omega_ord[ch]
                for s in range(nbr_count[ch]):
                    if s != slot:
                        r -= b[ch, s] * omega_ord[nbr_idx[ch, s]]
                fc = sigma2 * f[ch]
                bcs = b[ch, slot]
                prec += bcs * bcs / fc
                num += bcs * r / fc
            omega_ord[k] = num / prec + gen.standard_normal() / math.sqrt(prec)

        # sigma2: inverse gamma with the factorized quadratic form
        if fix_sigma2 == 0:
            quad = 0.0
            for k in range(n_i):
                mean_par = 0.0
                for s in range(nbr_count[k]):
                    mean_par += b[k, s] * omega_ord[nbr_idx[k, s]]
                r = omega_ord[k] - mean_par
                quad += r * r / f[k]
            shape = sig2_shape + 0.5 * n_i
            scale = sig2_scale + 0.5 * quad
            # inverse gamma via gamma on the precision
            sigma2 = scale / gen.standard_gamma(shape)

        # phi: random walk on log scale with batch adaptation
        if fix_phi == 0:
            phi_prop = phi * math.exp(step_phi * gen.standard_normal())
            if phi_lo < phi_prop < phi_hi:
                if _nngp_factors(nbr_count, d_self, d_cross, phi_prop, b_prop, f_prop) == 0:
                    cur = _nngp_log_density(omega_ord, nbr_idx, nbr_count, b, f, sigma2)
                    prop = _nngp_log_density(omega_ord, nbr_idx, nbr_count, b_prop, f_prop, sigma2)
                    log_ratio = prop - cur + math.log(phi_prop) - math.log(phi)
                    if math.log(gen.random()) < log_ratio:
                        phi = phi_prop
                        b, b_prop = b_prop, b
                        f, f_prop = f_prop, f
                        acc_phi += 1
                        acc_phi_total += 1

        # eta: sequential AR(1) conditionals
        for t in range(n_t):
            acc_p = 0.0
            acc_n = 0.0
            for i in range(n_i):
                s = 0.0
                for q in range(kb):
                    s += x_occ[i, t, q] * beta[q]
                acc_p += w[i, t]
                acc_n += (z[i, t] - 0.5) - w[i, t] * (s + omega_ord[inv_order[i]])
            if n_t == 1:
                prior_prec = 1.0 / sigma2t
                prior_num = 0.0
            else:
                v_in = sigma2t * (1.0 - rho * rho)
                if t == 0:
                    prior_prec = 1.0 / sigma2t + rho * rho / v_in
                    prior_num = rho * eta[1] / v_in
                elif t == n_t - 1:
                    prior_prec = 1.0 / v_in
                    prior_num = rho * eta[t - 1] / v_in
                else:
                    prior_prec = (1.0 + rho * rho) / v_in
                    prior_num = rho * (eta[t - 1] + eta[t + 1]) / v_in
            prec = prior_prec + acc_p
            num = prior_num + acc_n
            eta[t] = num / prec + gen.standard_normal() / math.sqrt(prec)

        # translation sweeps: the likelihood only sees beta0 + eta_t and
        # beta0 + omega_i through the intercept, so shifting mass between
        # the intercept and a field mean is an exact Gibbs move along the
        # ridge; it sharply improves intercept mixing
        if has_intercept == 1:
            # (beta0 + d, eta - d)
            v_in = sigma2t * (1.0 - rho * rho)
            prec_d = 1.0 / sigma2t + 1.0 / beta_pv[0]
            num_d = eta[0] / sigma2t + (beta_pm[0] - beta[0]) / beta_pv[0]
            if n_t > 1:
                c1 = (1.0 - rho) * (1.0 - rho) / v_in
                for t in range(1, n_t):
                    prec_d += c1
                    num_d += (1.0 - rho) * (eta[t] - rho * eta[t - 1]) / v_in
            d = num_d / prec_d + gen.standard_normal() / math.sqrt(prec_d)
            beta[0] += d
            for t in range(n_t):
                eta[t] -= d
            # (beta0 + d, omega - d)
            prec_d = 1.0 / beta_pv[0]
            num_d = (beta_pm[0] - beta[0]) / beta_pv[0]
            for k in range(n_i):
                bsum = 0.0
                resid = omega_ord[k]
                for s in range(nbr_count[k]):
                    bsum += b[k, s]
                    resid -= b[k, s] * omega_ord[nbr_idx[k, s]]
                fk = sigma2 * f[k]
                one_m = 1.0 - bsum
                prec_d += one_m * one_m / fk
                num_d += resid * one_m / fk
            d = num_d / prec_d + gen.standard_normal() / math.sqrt(prec_d)
            beta[0] += d
            for k in range(n_i):
                omega_ord[k] -= d

        # sigma2T: inverse gamma
        if fix_sigma2t == 0:
            quad = eta[0] * eta[0]
            if n_t > 1:
                opr = 1.0 - rho * rho
                for t in range(1, n_t):
                    r = eta[t] - rho * eta[t - 1]
                    quad += r * r / opr
            sigma2t = (sig2t_scale + 0.5 * quad) / gen.standard_gamma(sig2t_shape + 0.5 * n_t)

        # rho: random walk on atanh scale
        if fix_rho == 0:
            s_cur = math.atanh(rho)
            rho_prop = math.tanh(s_cur + step_rho * gen.standard_normal())
            if -1.0 < rho_prop < 1.0:
                cur = _ar1_log_density(eta, rho, sigma2t)
                prop = _ar1_log_density(eta, rho_prop, sigma2t)
                log_ratio = prop - cur + math.log1p(-rho_prop * rho_prop) - math.log1p(-rho * rho)
                if math.log(gen.random()) < log_ratio:
                    rho = rho_prop
                    acc_rho += 1
                    acc_rho_total += 1

        # alpha: PG-augmented update over surveyed cells with z = 1
        for a in range(ka):
            rhs_a[a] = alpha_pm[a] / alpha_pv[a]
            for bb in range(ka):
                prec_a[a, bb] = 1.0 / alpha_pv[a] if a == bb else 0.0
        for i in range(n_i):
            for t in range(n_t):
                if z[i, t] > 0.0:
                    for j in range(n_j):
                        if g[i, t, j] > 0.0:
                            wd = pg_draw(gen, lin_det[i, t, j])
                            kappa = y[i, t, j] - 0.5
                            for a in range(ka):
                                va = v_det[i, t, j, a]
                                rhs_a[a] += va * kappa
                                for bb in range(a, ka):
                                    prec_a[a, bb] += wd * va * v_det[i, t, j, bb]
        for a in range(ka):
            for bb in range(a):
                prec_a[a, bb] = prec_a[bb, a]
        if _mvn_from_precision(gen, prec_a, rhs_a, alpha) != 0:
            status[0] = 1
            status[1] = it
            return

        # track the intercept pair for the collapsed-move proposal
        if has_intercept == 1 and has_det_intercept == 1:
            pcg_n += 1.0
            db_m = beta[0] - pcg_mb
            pcg_mb += db_m / pcg_n
            pcg_m2b += db_m * (beta[0] - pcg_mb)
            da_m = alpha[0] - pcg_ma
            pcg_ma += da_m / pcg_n
            pcg_m2a += da_m * (alpha[0] - pcg_ma)
            pcg_mab += db_m * (alpha[0] - pcg_ma)

        # batch adaptation toward 0.43 acceptance
        if (it + 1) % batch_length == 0:
            batch_no += 1
            delta = min(0.05, 1.0 / math.sqrt(batch_no))
            if fix_phi == 0:
                if acc_phi / batch_length > 0.43:
                    step_phi *= math.exp(delta)
                else:
                    step_phi *= math.exp(-delta)
                acc_phi = 0
            if fix_rho == 0:
                if acc_rho / batch_length > 0.43:
                    step_rho *= math.exp(delta)
                else:
                    step_rho *= math.exp(-delta)
                acc_rho = 0
            if has_intercept == 1 and has_det_intercept == 1:
                if pcg_n > 2.0 * batch_length:
                    scale = 2.38 * 2.38 / 2.0
                    c11 = scale * pcg_m2b / (pcg_n - 1.0) + 1e-9
                    c22 = scale * pcg_m2a / (pcg_n - 1.0) + 1e-9
                    c12 = scale * pcg_mab / (pcg_n - 1.0)
                    pcg_l11 = math.sqrt(c11)
                    pcg_l21 = c12 / pcg_l11
                    pcg_l22 = math.sqrt(max(c22 - pcg_l21 * pcg_l21, 1e-12))
                if acc_pcg / batch_length > 0.3:
                    pcg_scale *= math.exp(delta)
                else:
                    pcg_scale *= math.exp(-delta)
                acc_pcg = 0

        # store retained draw
        if it >= n_burn and (it - n_burn) % thin == thin - 1:
            finite = True
            for q in range(kb):
                finite = finite and math.isfinite(beta[q])
            for q in range(ka):
                finite = finite and math.isfinite(alpha[q])
            finite = (
                finite
                and math.isfinite(phi)
                and math.isfinite(sigma2)
                and math.isfinite(rho)
                and math.isfinite(sigma2t)
            )
            if not finite:
                status[0] = 2
                status[1] = it
                return
            for q in range(kb):
                out_beta[draw_idx, q] = beta[q]
            for q in range(ka):
                out_alpha[draw_idx, q] = alpha[q]
            out_phi[draw_idx] = phi
            out_sigma2[draw_idx] = sigma2
            out_rho[draw_idx] = rho
            out_sigma2t[draw_idx] = sigma2t
            for i in range(n_i):
                om_i = omega_ord[inv_order[i]]
                if not math.isfinite(om_i):
                    status[0] = 2
                    status[1] = it
                    return
                out_omega[draw_idx, i] = om_i
                for t in range(n_t):
                    s = 0.0
                    for q in range(kb):
                        s += x_occ[i, t, q] * beta[q]
                    out_psi[draw_idx, i, t] = _expit(s + om_i + eta[t])
                    out_z[draw_idx, i, t] = np.uint8(z[i, t])
            for t in range(n_t):
                out_eta[draw_idx, t] = eta[t]
            draw_idx += 1

    n_total = float(n_iter)
    out_rates[0] = acc_phi_total / n_total
    out_rates[1] = acc_rho_total / n_total
    out_rates[2] = step_phi
    out_rates[3] = step_rho
    out_rates[4] = acc_pcg_total / n_total
    status[0] = 0
    status[1] = n_iter
