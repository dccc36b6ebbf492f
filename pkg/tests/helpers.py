"""Independent oracles and state builders shared across the test modules.

Everything here deliberately avoids the library's own computational paths:
moments come from quadrature, Bessel values from mpmath, and the CAVI
quantities from straight-line loop re-implementations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

import vbnn
from vbnn.cavi import CaviState, make_state, sweep_once, CaviOptions
from vbnn.data import make_dataset
from vbnn.state import initialize


# ---------------------------------------------------------------------------
# distribution oracles
# ---------------------------------------------------------------------------

def gig_moment_quad(nu, delta, lam, power):
    """E[x^power] under GIG(nu, delta, lam) by adaptive quadrature.

    Substitutes x = e^u and integrates the max-shifted unnormalized
    density, so no Bessel functions (and no overflow) are involved.
    """
    d2, l2 = delta**2, lam**2

    def logf(u, p):
        return (p + nu) * u - 0.5 * (d2 * np.exp(-u) + l2 * np.exp(u))

    def log_integral(p):
        grid = np.linspace(-60.0, 60.0, 4001)
        vals = logf(grid, p)
        shift = vals.max()
        val, _ = integrate.quad(
            lambda u: math.exp(logf(u, p) - shift), -np.inf, np.inf,
            epsabs=0.0, epsrel=1e-12, limit=400,
        )
        return math.log(val) + shift

    return math.exp(log_integral(power) - log_integral(0.0))


def pg_mean_series(b, c, n_terms=200_000):
    """PG mean from the weighted-sum-of-gammas representation plus an
    analytic integral tail."""
    a = c / (2.0 * math.pi)
    k = np.arange(1, n_terms + 1, dtype=float)
    body = np.sum(1.0 / ((k - 0.5) ** 2 + a**2))
    if a == 0.0:
        tail = 1.0 / n_terms
    else:
        tail = (math.pi / 2.0 - math.atan(n_terms / a)) / a
    return b / (2.0 * math.pi**2) * (body + tail)


def log_bessel_k_mpmath(nu, x, dps=50):
    import mpmath as mp

    with mp.workdps(dps):
        return float(mp.log(mp.besselk(nu, x)))


def log_bessel_k_quad(nu, x, dps=40):
    """Adaptive quadrature of the integral representation
    K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt, in mpmath."""
    import mpmath as mp

    with mp.workdps(dps):
        val = mp.quad(lambda t: mp.e ** (-x * mp.cosh(t)) * mp.cosh(nu * t), [0, mp.inf])
        return float(mp.log(val))


# ---------------------------------------------------------------------------
# state builders
# ---------------------------------------------------------------------------

def random_dataset(rng, n, d0, dy=1):
    x = rng.normal(size=(n, d0))
    w = rng.normal(size=(d0, dy))
    y = np.tanh(x @ w) * 3.0 + 0.3 * rng.normal(size=(n, dy))
    names = [f"x{j}" for j in range(d0)]
    return make_dataset(x, y, names, [f"y{j}" for j in range(dy)])


def random_config(rng, dims, family="ig", seed=None):
    return vbnn.NetworkConfig(
        dims=tuple(dims),
        temperature=float(rng.uniform(0.05, 0.5)),
        prior_family=family,
        seed=int(rng.integers(0, 2**31)) if seed is None else seed,
    )


def trained_state(rng, dims, n=12, family="ig", sweeps=2) -> CaviState:
    """A valid, internally consistent state: initialized then swept a little.

    Sweeping guarantees the cached moments, PG tilts and gates all satisfy
    their definitions, which the ELBO oracles rely on.
    """
    data = random_dataset(rng, n, dims[0], dims[-1])
    config = random_config(rng, dims, family)
    gv, lv = initialize(config, data, "laplace", np.random.default_rng(config.seed))
    st = make_state(config, data, gv, lv)
    opts = CaviOptions(max_sweeps=sweeps)
    for _ in range(sweeps):
        sweep_once(st, opts)
    return st


# ---------------------------------------------------------------------------
# straight-line CAVI oracles (explicit loops, no shared code)
# ---------------------------------------------------------------------------

def naive_w_tilde_sq(gv, i, d):
    m = gv.m[i][d]
    return gv.B[i][d] + np.outer(m, m)


def naive_eta_beta_hidden(st: CaviState, l: int) -> np.ndarray:
    """beta for hidden layer l by direct summation, joint cross moments."""
    gv, lv, cfg = st.gv, st.lv, st.config
    i = l - 1
    n = lv.n_obs
    d_l = cfg.dims[l]
    prior = cfg.noise_prior_hidden
    out = np.zeros(d_l)
    for d in range(d_l):
        acc = 0.0
        for nn in range(n):
            eaa_dd = lv.eaat[l][nn][1 + d, 1 + d]
            rho = lv.rho[i][nn, d]
            cross = lv.cross[i][nn, d]       # E[a_{l,d} a~_{l-1}]
            m = gv.m[i][d]
            tr = float(np.sum(naive_w_tilde_sq(gv, i, d) * lv.eaat[i][nn]))
            acc += eaa_dd - 2.0 * rho * float(m @ cross) + rho * tr
        out[d] = prior.beta + 0.5 * acc
    return out


def naive_eta_beta_output(st: CaviState) -> np.ndarray:
    gv, lv, cfg = st.gv, st.lv, st.config
    L = st.n_hidden_layers
    dy = cfg.dims[-1]
    prior = cfg.noise_prior_out
    out = np.zeros(dy)
    for d in range(dy):
        acc = 0.0
        for nn in range(lv.n_obs):
            ea_aug = lv.eaat[L][nn][0]
            m = gv.m[L][d]
            tr = float(np.sum(naive_w_tilde_sq(gv, L, d) * lv.eaat[L][nn]))
            acc += st.y[nn, d] ** 2 - 2.0 * st.y[nn, d] * float(m @ ea_aug) + tr
        out[d] = prior.beta + 0.5 * acc
    return out


def naive_omega_tilt(st: CaviState, l: int) -> np.ndarray:
    gv, lv = st.gv, st.lv
    i = l - 1
    n, d_l = lv.rho[i].shape
    out = np.zeros((n, d_l))
    for nn in range(n):
        for d in range(d_l):
            tr = float(np.sum(naive_w_tilde_sq(gv, i, d) * lv.eaat[i][nn]))
            out[nn, d] = math.sqrt(max(tr, 0.0)) / st.config.temperature
    return out


def naive_gamma_probs(st: CaviState, l: int) -> np.ndarray:
    gv, lv = st.gv, st.lv
    i = l - 1
    T = st.config.temperature
    n, d_l = lv.rho[i].shape
    out = np.zeros((n, d_l))
    for nn in range(n):
        for d in range(d_l):
            inv_eta = gv.alpha[i][d] / gv.beta[i][d]
            m = gv.m[i][d]
            tr = float(np.sum(naive_w_tilde_sq(gv, i, d) * lv.eaat[i][nn]))
            logit = (
                -0.5 * inv_eta * tr
                + inv_eta * float(m @ lv.cross[i][nn, d])
                + float(m @ lv.eaat[i][nn][0]) / T
            )
            out[nn, d] = 1.0 / (1.0 + math.exp(-logit))
    return out


def naive_backward(st: CaviState):
    """Activation updates (S, t, M) per observation by literal recursion."""
    gv, lv, cfg = st.gv, st.lv, st.config
    L = st.n_hidden_layers
    T = cfg.temperature
    n = lv.n_obs
    S_out, t_out, M_out = [None] * L, [None] * L, [None] * L

    s_list = [np.zeros((n, cfg.dims[l], cfg.dims[l])) for l in range(1, L + 1)]
    sinv_list = [np.zeros_like(s) for s in s_list]
    t_list = [np.zeros((n, cfg.dims[l])) for l in range(1, L + 1)]
    m_list = [np.zeros((n, cfg.dims[l], cfg.dims[l - 1])) for l in range(1, L + 1)]

    for nn in range(n):
        # top layer
        i = L - 1
        inv_eta_l = gv.alpha[i] / gv.beta[i]
        sinv = np.diag(inv_eta_l).copy()
        rhs = inv_eta_l * lv.rho[i][nn] * gv.m[i][:, 0]
        if st.y is not None:
            inv_eta_out = gv.alpha[L] / gv.beta[L]
            for d in range(cfg.dims[-1]):
                w = gv.m[L][d, 1:]
                bw_cov = gv.B[L][d, 1:, 0]
                w2 = gv.B[L][d, 1:, 1:] + np.outer(w, w)
                sinv += inv_eta_out[d] * w2
                ewb = w * gv.m[L][d, 0] + bw_cov
                rhs += inv_eta_out[d] * (w * st.y[nn, d] - ewb)
        s = np.linalg.inv(sinv)
        s_list[i][nn] = s
        sinv_list[i][nn] = sinv
        t_list[i][nn] = s @ rhs
        m_list[i][nn] = s @ (np.diag(inv_eta_l * lv.rho[i][nn]) @ gv.m[i][:, 1:])

        for l in range(L - 1, 0, -1):
            i = l - 1
            inl = l
            inv_eta_l = gv.alpha[i] / gv.beta[i]
            inv_eta_next = gv.alpha[inl] / gv.beta[inl]
            sinv = np.diag(inv_eta_l).copy()
            sinv -= m_list[inl][nn].T @ sinv_list[inl][nn] @ m_list[inl][nn]
            rhs = m_list[inl][nn].T @ sinv_list[inl][nn] @ t_list[inl][nn]
            rhs = rhs + inv_eta_l * lv.rho[i][nn] * gv.m[i][:, 0]
            for d in range(cfg.dims[l + 1]):
                w = gv.m[inl][d, 1:]
                w2 = gv.B[inl][d, 1:, 1:] + np.outer(w, w)
                coef = (
                    inv_eta_next[d] * lv.rho[inl][nn, d]
                    + lv.eomega[inl][nn, d] / T**2
                )
                sinv += coef * w2
                ewb = w * gv.m[inl][d, 0] + gv.B[inl][d, 1:, 0]
                rhs += w / T * (lv.rho[inl][nn, d] - 0.5) - coef * ewb
            s = np.linalg.inv(sinv)
            s_list[i][nn] = s
            sinv_list[i][nn] = sinv
            t_list[i][nn] = s @ rhs
            m_list[i][nn] = s @ (np.diag(inv_eta_l * lv.rho[i][nn]) @ gv.m[i][:, 1:])

    return s_list, t_list, m_list


def ridge_posterior(x_aug, y, inv_eta, prior_prec_diag):
    """Textbook Bayesian linear regression posterior for one output row."""
    prec = np.diag(prior_prec_diag) + inv_eta * x_aug.T @ x_aug
    cov = np.linalg.inv(prec)
    mean = cov @ (inv_eta * x_aug.T @ y)
    return mean, cov


# ---------------------------------------------------------------------------
# Monte-Carlo ELBO oracle (IG family only: every factor is sampleable with scipy)
# ---------------------------------------------------------------------------

def mc_elbo(st: CaviState, n_draws: int, rng):
    """Estimate E_q[log p - log q] by sampling, with the PG factor handled
    analytically.  Returns (estimate, standard error)."""
    gv, lv, cfg = st.gv, st.lv, st.config
    assert cfg.prior_family == "ig"
    L = st.n_hidden_layers
    T = cfg.temperature
    n = lv.n_obs
    priors = st.priors
    total = np.zeros(n_draws)

    # analytic PG block: E_q(omega)[log p(omega) - log q(omega)]
    const = 0.0
    for i in range(L):
        A = lv.A[i]
        eo = lv.eomega[i]
        const += float(np.sum(0.5 * A**2 * eo - (np.abs(A / 2) + np.log1p(np.exp(-np.abs(A))) - math.log(2.0))))
    # per-layer globals
    tau_draws = []
    psi_draws = []
    eta_draws = []
    w_draws = []
    for i in range(L + 1):
        tau = gv.tau[i]
        tq = stats.invgamma(-tau.nu, scale=tau.delta**2 / 2.0)
        x = tq.rvs(size=n_draws, random_state=rng)
        tau_draws.append(x)
        tp = stats.invgamma(-priors.glob.nu, scale=st.delta_glob**2 / 2.0)
        total += tp.logpdf(x) - tq.logpdf(x)

        loc = priors.loc[i]
        nu_q = gv.psi_nu[i]
        d_out, d_in = gv.psi_delta[i].shape
        ps = np.empty((n_draws, d_out, d_in))
        for d in range(d_out):
            for dp in range(d_in):
                pq = stats.invgamma(-nu_q, scale=gv.psi_delta[i][d, dp] ** 2 / 2.0)
                xx = pq.rvs(size=n_draws, random_state=rng)
                ps[:, d, dp] = xx
                pp = stats.invgamma(-loc.nu, scale=loc.delta**2 / 2.0)
                total += pp.logpdf(xx) - pq.logpdf(xx)
        psi_draws.append(ps)

        prior = cfg.noise_prior_out if i == L else cfg.noise_prior_hidden
        d_l = cfg.dims[i + 1]
        es = np.empty((n_draws, d_l))
        for d in range(d_l):
            eq = stats.invgamma(gv.alpha[i][d], scale=gv.beta[i][d])
            xx = eq.rvs(size=n_draws, random_state=rng)
            es[:, d] = xx
            ep = stats.invgamma(prior.alpha, scale=prior.beta)
            total += ep.logpdf(xx) - eq.logpdf(xx)
        eta_draws.append(es)

        d_l = gv.m[i].shape[0]
        p = gv.m[i].shape[1]
        ws = np.empty((n_draws, d_l, p))
        for d in range(d_l):
            chol = np.linalg.cholesky(gv.B[i][d])
            z = rng.standard_normal((n_draws, p))
            draws = gv.m[i][d] + z @ chol.T
            ws[:, d, :] = draws
            total += stats.multivariate_normal(gv.m[i][d], gv.B[i][d]).logpdf(draws)
            * -1 if False else None
            total -= stats.multivariate_normal(gv.m[i][d], gv.B[i][d], allow_singular=False).logpdf(draws)
            # prior: bias N(0, s0^2), weights N(0, tau psi)
            total += stats.norm(0.0, math.sqrt(cfg.bias_var)).logpdf(draws[:, 0])
            var_w = tau_draws[i][:, None] * ps[:, d, :]
            total += np.sum(
                -0.5 * math.log(2 * math.pi) - 0.5 * np.log(var_w) - 0.5 * draws[:, 1:] ** 2 / var_w,
                axis=1,
            )
        w_draws.append(ws)

    # local chain: gamma, a, likelihoods
    for nn in range(n):
        a_prev = np.tile(st.x[nn], (n_draws, 1))
        for l in range(1, L + 1):
            i = l - 1
            t, m, s = lv.t[i][nn], lv.M[i][nn], lv.S[i][nn]
            chol = np.linalg.cholesky(s)
            mean = t + a_prev @ m.T
            a = mean + rng.standard_normal((n_draws, t.shape[0])) @ chol.T
            total += stats.multivariate_normal(np.zeros(t.shape[0]), s).logpdf(a - mean) * 0.0
            # q(a_l | a_{l-1}) log density
            diff = a - mean
            sol = np.linalg.solve(s, diff.T).T
            _, ld = np.linalg.slogdet(s)
            total -= -0.5 * t.shape[0] * math.log(2 * math.pi) - 0.5 * ld - 0.5 * np.sum(diff * sol, axis=1)
            total += -(-0.5 * t.shape[0] * math.log(2 * math.pi) - 0.5 * ld - 0.5 * np.sum(diff * sol, axis=1)) * 0.0
            rho = lv.rho[i][nn]
            gam = (rng.random((n_draws, rho.shape[0])) < rho).astype(float)
            total -= np.sum(gam * np.log(rho) + (1 - gam) * np.log1p(-rho), axis=1)
            aug_prev = np.concatenate([np.ones((n_draws, 1)), a_prev], axis=1)
            z = np.einsum("jdp,jp->jd", w_draws[i][:, :, :], aug_prev)
            eta2 = eta_draws[i]
            total += np.sum(
                -0.5 * math.log(2 * math.pi) - 0.5 * np.log(eta2)
                - 0.5 * (a - gam * z) ** 2 / eta2,
                axis=1,
            )
            total += np.sum((gam - 0.5) * z / T - lv.eomega[i][nn] * z**2 / (2 * T**2), axis=1)
            total += -rho.shape[0] * math.log(2.0)
            a_prev = a
        # output likelihood
        aug = np.concatenate([np.ones((n_draws, 1)), a_prev], axis=1)
        z = np.einsum("jdp,jp->jd", w_draws[L], aug)
        eta2 = eta_draws[L]
        total += np.sum(
            -0.5 * math.log(2 * math.pi) - 0.5 * np.log(eta2)
            - 0.5 * (st.y[nn] - z) ** 2 / eta2,
            axis=1,
        )
    est = float(np.mean(total)) + const
    se = float(np.std(total, ddof=1) / math.sqrt(n_draws))
    return est, se
