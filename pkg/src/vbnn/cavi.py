"""Closed-form coordinate ascent for the gated-relaxation network.

Implements the seven block updates (global and local shrinkage scales,
noise variances, weight rows, Polya-Gamma tilts, Bernoulli gates,
activation chains), the exact training ELBO, the EM step for the global
shrinkage hyperparameter, and the outer training loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from . import _kernels as K
from .distributions import (
    GigParams,
    gig_elog,
    gig_log_norm,
    gig_mean_inv,
    log_cosh,
    pg_mean,
)
from .state import (
    Dataset,
    FitResult,
    GlobalVariational,
    LocalVariational,
    NetworkConfig,
    ScaledPriors,
    activation_moments,
    initialize,
    scale_hyperparameters,
)

logger = logging.getLogger("vbnn")

LOG2PI = math.log(2.0 * math.pi)


class NumericalAbort(RuntimeError):
    """Raised when a sweep produces a state no jitter level can repair."""


@dataclass
class CaviOptions:
    elbo_tol_train: float = 1e-5
    elbo_tol_predict: float = 1e-4
    max_sweeps: int = 500
    consecutive_hits: int = 3
    jitter: float = 1e-9
    em_enabled: bool = True

    def __post_init__(self):
        if self.elbo_tol_train <= 0 or self.elbo_tol_predict <= 0:
            raise ValueError("tolerances must be positive")
        if self.consecutive_hits < 1:
            raise ValueError("consecutive_hits must be >= 1")


class CaviState:
    """Everything one fit mutates: variational factors plus EM hyperparameters."""

    def __init__(self, config: NetworkConfig, priors: ScaledPriors,
                 gv: GlobalVariational, lv: LocalVariational,
                 x: np.ndarray, y: np.ndarray | None):
        self.config = config
        self.priors = priors
        self.gv = gv
        self.lv = lv
        self.x = x
        self.y = y
        self.delta_glob = priors.glob.delta
        self.lam_glob = priors.glob.lam

    @property
    def n_hidden_layers(self) -> int:
        return self.config.n_hidden_layers

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]


def _chol_ladder(mats: np.ndarray, jitter: float, what: str) -> np.ndarray:
    """Cholesky with jitter escalation; returns the (jittered) PD matrices."""
    eye = np.eye(mats.shape[-1])
    for level in (0.0, jitter, jitter * 1e3, jitter * 1e6):
        try:
            trial = mats + level * eye
            np.linalg.cholesky(trial)
            if level > 0.0:
                logger.warning("%s needed jitter %.1e", what, level)
            return trial
        except np.linalg.LinAlgError:
            continue
    raise NumericalAbort(f"{what}: not positive definite after maximal jitter")


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# shrinkage updates
# ---------------------------------------------------------------------------

def update_tau_layer(st: CaviState, l: int) -> None:
    """nu_hat = nu - D_l D_{l-1}/2, delta_hat^2 = delta^2 + sum E[1/psi] E[W^2]."""
    i = l - 1
    gv = st.gv
    w2 = gv.w2_elem(i)
    _, inv_psi = gig_mean_inv(gv.psi_nu[i], gv.psi_delta[i], gv.psi_lam[i])
    if not np.all(np.isfinite(inv_psi)):
        raise NumericalAbort(f"layer {l}: infinite E[1/psi] in tau update")
    nu_hat = st.priors.glob.nu - 0.5 * w2.size
    delta_hat = math.sqrt(st.delta_glob**2 + float(np.sum(inv_psi * w2)))
    gv.tau[i] = GigParams(nu_hat, delta_hat, st.lam_glob)


def update_psi_layer(st: CaviState, l: int) -> None:
    """nu_hat = nu_loc - 1/2, delta_hat^2 = E[1/tau] E[W^2] + delta_loc^2 per weight."""
    i = l - 1
    gv = st.gv
    loc = st.priors.loc[i]
    w2 = gv.w2_elem(i)
    tau = gv.tau[i]
    _, inv_tau = gig_mean_inv(tau.nu, tau.delta, tau.lam)
    if not np.isfinite(inv_tau):
        raise NumericalAbort(f"layer {l}: infinite E[1/tau] in psi update")
    gv.psi_nu[i] = loc.nu - 0.5
    gv.psi_delta[i] = np.sqrt(inv_tau * w2 + loc.delta**2)
    gv.psi_lam[i] = loc.lam


# ---------------------------------------------------------------------------
# noise updates
# ---------------------------------------------------------------------------

def _output_sq_terms(st: CaviState, idx) -> np.ndarray:
    """E[(y - W~ a~)^2] per (n, d)."""
    gv, lv = st.gv, st.lv
    L = st.n_hidden_layers
    sel = slice(None) if idx is None else idx
    eaat = np.ascontiguousarray(lv.eaat[L][sel])
    y = st.y[sel]
    m_out = gv.m[L]
    pred = eaat[:, 0, :] @ m_out.T
    tr = K.pair_traces(gv.w_tilde_sq(L), eaat)
    return y**2 - 2.0 * y * pred + tr


def _hidden_sq_terms(st: CaviState, l: int, idx) -> np.ndarray:
    """E[(a - gamma W~ a~)^2] per (n, d), with the joint cross moment E[a a~_prev]."""
    gv, lv = st.gv, st.lv
    i = l - 1
    sel = slice(None) if idx is None else idx
    eaat_prev = np.ascontiguousarray(lv.eaat[i][sel])
    cross = lv.cross[i][sel]
    rho = lv.rho[i][sel]
    m = gv.m[i]
    eaa_diag = np.einsum("npp->np", lv.eaat[l][sel])[:, 1:]
    mc = np.einsum("ndp,dp->nd", cross, m)
    tr = K.pair_traces(gv.w_tilde_sq(i), eaat_prev)
    return eaa_diag - 2.0 * rho * mc + rho * tr


def eta_stats_layer(st: CaviState, l: int, idx=None, scale: float = 1.0) -> np.ndarray:
    """Intermediate beta for layer l from (possibly scaled) data sums."""
    cfg = st.config
    if l == st.n_hidden_layers + 1:
        prior = cfg.noise_prior_out
        sq = _output_sq_terms(st, idx)
    else:
        prior = cfg.noise_prior_hidden
        sq = _hidden_sq_terms(st, l, idx)
    return prior.beta + 0.5 * scale * sq.sum(axis=0)


def update_eta_layer(st: CaviState, l: int) -> None:
    i = l - 1
    cfg = st.config
    prior = cfg.noise_prior_out if l == st.n_hidden_layers + 1 else cfg.noise_prior_hidden
    beta = eta_stats_layer(st, l)
    if np.any(beta <= 0) or not np.all(np.isfinite(beta)):
        raise NumericalAbort(
            f"layer {l}: noise rate left the positive domain (moment cache corrupt?)"
        )
    st.gv.alpha[i] = np.full(beta.shape, prior.alpha + 0.5 * st.n_obs)
    st.gv.beta[i] = beta


# ---------------------------------------------------------------------------
# Polya-Gamma tilts and Bernoulli gates
# ---------------------------------------------------------------------------

def update_omega_layer(st: CaviState, l: int) -> None:
    """A = sqrt(E[z^2]) / T; the downstream updates consume E[omega] = pg_mean(1, A)."""
    i = l - 1
    gv, lv = st.gv, st.lv
    tr = K.pair_traces(gv.w_tilde_sq(i), np.ascontiguousarray(lv.eaat[i]))
    if np.any(tr < -1e-9):
        logger.warning("layer %s: negative E[z^2] trace clamped at 0", l)
    tr = np.maximum(tr, 0.0)
    lv.A[i] = np.sqrt(tr) / st.config.temperature
    lv.eomega[i] = pg_mean(1.0, lv.A[i])


def update_gamma_layer(st: CaviState, l: int) -> None:
    i = l - 1
    gv, lv = st.gv, st.lv
    T = st.config.temperature
    inv_eta = gv.inv_eta(i)
    m = gv.m[i]
    tr = K.pair_traces(gv.w_tilde_sq(i), np.ascontiguousarray(lv.eaat[i]))
    mc = np.einsum("ndp,dp->nd", lv.cross[i], m)
    mea = lv.ea_aug(i) @ m.T
    logits = -0.5 * inv_eta * tr + inv_eta * mc + mea / T
    lv.rho[i] = np.clip(sp.expit(logits), 1e-12, 1.0 - 1e-12)


# ---------------------------------------------------------------------------
# weight updates
# ---------------------------------------------------------------------------

def _prior_precision_diag(st: CaviState, l: int) -> np.ndarray:
    """diag of D^{-1}: bias gets 1/s0^2, weights get E[1/tau] E[1/psi]."""
    i = l - 1
    gv = st.gv
    tau = gv.tau[i]
    _, inv_tau = gig_mean_inv(tau.nu, tau.delta, tau.lam)
    _, inv_psi = gig_mean_inv(gv.psi_nu[i], gv.psi_delta[i], gv.psi_lam[i])
    if not (np.isfinite(inv_tau) and np.all(np.isfinite(inv_psi))):
        raise NumericalAbort(f"layer {l}: infinite shrinkage moment in prior precision")
    d_out, d_in = inv_psi.shape
    out = np.empty((d_out, d_in + 1))
    out[:, 0] = 1.0 / st.config.bias_var
    out[:, 1:] = inv_tau * inv_psi
    return out


def weight_stats_layer(st: CaviState, l: int, idx=None, scale: float = 1.0):
    """Natural parameters (B^{-1}, B^{-1} m^T) for every row of layer l."""
    gv, lv = st.gv, st.lv
    i = l - 1
    T = st.config.temperature
    sel = slice(None) if idx is None else idx
    eaat_prev = np.ascontiguousarray(lv.eaat[i][sel])
    dinv = _prior_precision_diag(st, l)
    p = dinv.shape[1]
    if l == st.n_hidden_layers + 1:
        inv_eta = gv.inv_eta(i)
        y = st.y[sel]
        s_eaat = eaat_prev.sum(axis=0)
        binv = scale * inv_eta[:, None, None] * s_eaat[None, :, :]
        rhs = scale * inv_eta[:, None] * K.weighted_vec(
            np.ascontiguousarray(y), np.ascontiguousarray(lv.eaat[i][sel][:, 0, :])
        )
    else:
        inv_eta = gv.inv_eta(i)
        rho = lv.rho[i][sel]
        eomega = lv.eomega[i][sel]
        cross = np.ascontiguousarray(lv.cross[i][sel])
        ea_prev = np.ascontiguousarray(lv.eaat[i][sel][:, 0, :])
        w_prec = np.ascontiguousarray(eomega / T**2 + inv_eta[None, :] * rho)
        binv = scale * K.weighted_outer(w_prec, eaat_prev)
        w_mean = np.ascontiguousarray(inv_eta[None, :] * rho)
        rhs = scale * (
            K.weighted_cross(w_mean, cross)
            + K.weighted_vec(np.ascontiguousarray(rho - 0.5), ea_prev) / T
        )
    diag_idx = np.arange(p)
    binv = binv.copy()
    binv[:, diag_idx, diag_idx] += dinv
    return _symmetrize(binv), rhs


def solve_weight_row(binv: np.ndarray, rhs: np.ndarray, jitter: float, what: str):
    """(B, m) from the natural parameters, via Cholesky with the jitter ladder."""
    binv_j = _chol_ladder(binv, jitter, what)
    cov = _symmetrize(np.linalg.inv(binv_j))
    mean = np.einsum("dpq,dq->dp", cov, rhs)
    return cov, mean


def update_weights_layer(st: CaviState, l: int, options: CaviOptions) -> None:
    i = l - 1
    binv, rhs = weight_stats_layer(st, l)
    cov, mean = solve_weight_row(binv, rhs, options.jitter, f"weight posterior layer {l}")
    st.gv.B[i] = cov
    st.gv.m[i] = mean


# ---------------------------------------------------------------------------
# activation chain update (backward) and moment refresh
# ---------------------------------------------------------------------------

def backward_activation_pass(st: CaviState, options: CaviOptions) -> None:
    """Update (S, t, M) for l = L..1, then refresh the moment caches.

    The top layer absorbs the output likelihood when targets are present;
    with y = None (prediction) its precision is just the hidden noise.
    """
    gv, lv, cfg = st.gv, st.lv, st.config
    L = st.n_hidden_layers
    T = cfg.temperature
    n = lv.n_obs

    # top hidden layer
    i = L - 1
    inv_eta_l = gv.inv_eta(i)
    eb_l = gv.m[i][:, 0]
    rho_l = lv.rho[i]
    base = inv_eta_l * rho_l * eb_l
    if st.y is not None:
        inv_eta_out = gv.inv_eta(L)
        w2_out = gv.w_only_sq(L)
        emw_out = gv.m[L][:, 1:]
        ewb_out = gv.wb_cross(L)
        sinv = np.diag(inv_eta_l) + np.einsum("d,dij->ij", inv_eta_out, w2_out)
        rhs = base + st.y @ (inv_eta_out[:, None] * emw_out) - inv_eta_out @ ewb_out
    else:
        sinv = np.diag(inv_eta_l)
        rhs = base
    sinv = _chol_ladder(sinv[None], options.jitter, f"activation precision layer {L}")[0]
    s_top = _symmetrize(np.linalg.inv(sinv))
    lv.S[i] = np.broadcast_to(s_top, (n,) + s_top.shape).copy()
    lv.t[i] = rhs @ s_top.T
    emw_l = gv.m[i][:, 1:]
    scaled_rows = (inv_eta_l * rho_l)[:, :, None] * emw_l[None, :, :]
    lv.M[i] = np.einsum("ij,njk->nik", s_top, scaled_rows)
    sinv_next = np.broadcast_to(sinv, (n,) + sinv.shape)

    # lower layers
    for l in range(L - 1, 0, -1):
        i = l - 1
        inl = l  # storage index of layer l+1
        inv_eta_l = gv.inv_eta(i)
        rho_l = lv.rho[i]
        eb_l = gv.m[i][:, 0]
        inv_eta_next = gv.inv_eta(inl)
        rho_next = lv.rho[inl]
        eomega_next = lv.eomega[inl]
        w2_next = gv.w_only_sq(inl)
        emw_next = gv.m[inl][:, 1:]
        ewb_next = gv.wb_cross(inl)
        t_next, m_next = lv.t[inl], lv.M[inl]

        coef = np.ascontiguousarray(inv_eta_next[None, :] * rho_next + eomega_next / T**2)
        g = K.coef_mix(coef, np.ascontiguousarray(w2_next))
        quad = np.einsum("nji,njk,nkl->nil", m_next, sinv_next, m_next, optimize=True)
        sinv_l = np.diag(inv_eta_l)[None, :, :] - quad + g
        sinv_l = _symmetrize(sinv_l)
        sinv_l = _chol_ladder(sinv_l, options.jitter, f"activation precision layer {l}")
        s_l = _symmetrize(np.linalg.inv(sinv_l))

        carry = np.einsum("nji,njk,nk->ni", m_next, sinv_next, t_next, optimize=True)
        rhs = (
            carry
            + inv_eta_l * rho_l * eb_l
            + (rho_next - 0.5) @ emw_next / T
            - coef @ ewb_next
        )
        lv.S[i] = s_l
        lv.t[i] = np.einsum("nij,nj->ni", s_l, rhs)
        emw_l = gv.m[i][:, 1:]
        scaled_rows = (inv_eta_l[None, :] * rho_l)[:, :, None] * emw_l[None, :, :]
        lv.M[i] = np.einsum("nij,njk->nik", s_l, scaled_rows)
        sinv_next = sinv_l

    activation_moments(lv, st.x)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def _elbo_gig_block(p_nu, p_delta, p_lam, q_nu, q_delta, q_lam, elog, einv, emean=None):
    """Sum of E_q[log p - log q] for a batch of matched GIG factors."""
    out = (
        gig_log_norm(p_nu, p_delta, p_lam)
        - gig_log_norm(q_nu, q_delta, q_lam)
        + (p_nu - q_nu) * elog
        - 0.5 * (np.asarray(p_delta) ** 2 - np.asarray(q_delta) ** 2) * einv
    )
    if p_lam != q_lam:
        out = out - 0.5 * (p_lam**2 - q_lam**2) * emean
    return float(np.sum(out))


def _elbo_global(st: CaviState) -> float:
    """Shrinkage, noise and weight blocks of the ELBO (data-independent)."""
    gv, cfg = st.gv, st.config
    L = st.n_hidden_layers
    total = 0.0
    for l in range(1, L + 2):
        i = l - 1
        tau = gv.tau[i]
        emean_tau, einv_tau = gig_mean_inv(tau.nu, tau.delta, tau.lam)
        elog_tau = gig_elog(tau.nu, tau.delta, tau.lam)
        total += _elbo_gig_block(
            st.priors.glob.nu, st.delta_glob, st.lam_glob,
            tau.nu, tau.delta, tau.lam,
            elog_tau, einv_tau, emean_tau,
        )

        loc = st.priors.loc[i]
        emean_psi, einv_psi = gig_mean_inv(gv.psi_nu[i], gv.psi_delta[i], gv.psi_lam[i])
        elog_psi = gig_elog(gv.psi_nu[i], gv.psi_delta[i], gv.psi_lam[i])
        total += _elbo_gig_block(
            loc.nu, loc.delta, loc.lam,
            gv.psi_nu[i], gv.psi_delta[i], gv.psi_lam[i],
            elog_psi, einv_psi, emean_psi,
        )

        prior = cfg.noise_prior_out if l == L + 1 else cfg.noise_prior_hidden
        alpha, beta = gv.alpha[i], gv.beta[i]
        elog_eta = np.log(beta) - sp.digamma(alpha)
        total += float(
            np.sum(
                prior.alpha * math.log(prior.beta)
                - sp.gammaln(prior.alpha)
                - alpha * np.log(beta)
                + sp.gammaln(alpha)
                + (alpha - prior.alpha) * elog_eta
                + (beta - prior.beta) * alpha / beta
            )
        )

        # Gaussian weight rows against the N(0, tau psi) prior and N(0, s0^2) bias
        m, B = gv.m[i], gv.B[i]
        p = m.shape[1]
        sign, logdet = np.linalg.slogdet(B)
        if np.any(sign <= 0):
            raise NumericalAbort(f"layer {l}: weight covariance lost positive definiteness")
        eb2 = m[:, 0] ** 2 + B[:, 0, 0]
        w2 = gv.w2_elem(i)
        total += float(
            np.sum(0.5 * logdet)
            + m.shape[0] * 0.5 * p
            - m.shape[0] * 0.5 * math.log(cfg.bias_var)
            - float(np.sum(eb2)) / (2.0 * cfg.bias_var)
            - 0.5 * float(np.sum(elog_tau + elog_psi + einv_tau * einv_psi * w2))
        )
    return total


def local_terms_pointwise(st: CaviState, idx=None, include_output: bool = True) -> np.ndarray:
    """Per-observation likelihood, gate, tilt and activation-entropy terms.

    Summed over observations (and scaled) this is the data-dependent block
    of the ELBO; kept pointwise so predictive fits can monitor each new
    input separately.
    """
    gv, lv, cfg = st.gv, st.lv, st.config
    L = st.n_hidden_layers
    T = cfg.temperature
    sel = slice(None) if idx is None else idx

    per_n = None
    if include_output:
        inv_eta = gv.inv_eta(L)
        alpha, beta = gv.alpha[L], gv.beta[L]
        elog_eta = np.log(beta) - sp.digamma(alpha)
        sq = _output_sq_terms(st, idx)
        per_n = -0.5 * float(np.sum(LOG2PI + elog_eta)) - 0.5 * sq @ inv_eta

    for l in range(1, L + 1):
        i = l - 1
        inv_eta = gv.inv_eta(i)
        alpha, beta = gv.alpha[i], gv.beta[i]
        elog_eta = np.log(beta) - sp.digamma(alpha)
        rho = lv.rho[i][sel]
        A = lv.A[i][sel]
        eomega = lv.eomega[i][sel]
        m = gv.m[i]
        if per_n is None:
            per_n = np.zeros(rho.shape[0])

        sq = _hidden_sq_terms(st, l, idx)
        ez = lv.eaat[i][sel][:, 0, :] @ m.T
        ez2 = K.pair_traces(gv.w_tilde_sq(i), np.ascontiguousarray(lv.eaat[i][sel]))

        term = (
            -0.5 * (LOG2PI + elog_eta)[None, :]
            - 0.5 * inv_eta[None, :] * sq
            - math.log(2.0)
            + (rho - 0.5) * ez / T
            - eomega * ez2 / (2.0 * T**2)
            + 0.5 * A**2 * eomega
            - log_cosh(0.5 * A)
            - rho * np.log(rho)
            - (1.0 - rho) * np.log(1.0 - rho)
        )
        sign, logdet_s = np.linalg.slogdet(lv.S[i][sel])
        if np.any(sign <= 0):
            raise NumericalAbort(f"layer {l}: activation covariance lost positive definiteness")
        per_n = per_n + term.sum(axis=1) + 0.5 * logdet_s + 0.5 * cfg.dims[l] * (1.0 + LOG2PI)
    return per_n


def elbo_local_block(st: CaviState, idx=None, scale: float = 1.0,
                     include_output: bool = True) -> float:
    """Data-dependent ELBO block; the scale factor extrapolates minibatch sums."""
    return scale * float(np.sum(local_terms_pointwise(st, idx, include_output)))


def elbo(st: CaviState, idx=None, scale: float = 1.0) -> float:
    """Full training ELBO, constants included so runs are comparable."""
    val = _elbo_global(st) + elbo_local_block(st, idx=idx, scale=scale)
    if not math.isfinite(val):
        raise NumericalAbort("ELBO evaluated non-finite")
    return val


# ---------------------------------------------------------------------------
# EM step for the global shrinkage hyperparameter
# ---------------------------------------------------------------------------

def em_update_global(st: CaviState) -> None:
    """Closed-form maximizer of the tau-prior term of the ELBO.

    IG moves delta_glob; gamma and inverse-Gaussian move lam_glob; the
    general GIG family has no closed form and skips the step.
    """
    fam = st.config.prior_family
    if fam == "gig":
        return
    gv = st.gv
    n_layers = st.n_hidden_layers + 1
    nu0 = st.priors.glob.nu
    moments = [gig_mean_inv(t.nu, t.delta, t.lam) for t in gv.tau]
    if fam == "ig":
        s = sum(inv for _, inv in moments)
        st.delta_glob = math.sqrt(-2.0 * n_layers * nu0 / s)
    elif fam == "gamma":
        s = sum(mean for mean, _ in moments)
        if not math.isfinite(s):
            raise NumericalAbort("EM: E[tau] infinite under gamma family")
        st.lam_glob = math.sqrt(2.0 * n_layers * nu0 / s)
    elif fam == "igauss":
        s = sum(mean for mean, _ in moments)
        st.lam_glob = n_layers * st.delta_glob / s


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def sweep_once(st: CaviState, options: CaviOptions) -> None:
    """One full coordinate sweep in the fixed published order."""
    L = st.n_hidden_layers
    for l in range(1, L + 1):
        update_tau_layer(st, l)
        update_psi_layer(st, l)
        update_eta_layer(st, l)
        update_omega_layer(st, l)
    update_tau_layer(st, L + 1)
    update_psi_layer(st, L + 1)
    update_eta_layer(st, L + 1)
    backward_activation_pass(st, options)
    for l in range(1, L + 1):
        update_weights_layer(st, l, options)
        update_gamma_layer(st, l)
    update_weights_layer(st, L + 1, options)
    if options.em_enabled:
        em_update_global(st)


def make_state(config: NetworkConfig, data: Dataset, gv: GlobalVariational,
               lv: LocalVariational) -> CaviState:
    return CaviState(config, scale_hyperparameters(config), gv, lv, data.x, data.y)


def fit_cavi(config: NetworkConfig, data: Dataset, options: CaviOptions | None = None,
             rng=None, init_scheme: str = "laplace") -> FitResult:
    """Train by coordinate ascent until the ELBO settles.

    Convergence requires `consecutive_hits` successive relative ELBO
    changes below the training tolerance; hitting max_sweeps first
    returns a usable result flagged converged=False.
    """
    options = options or CaviOptions()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    gv, lv = initialize(config, data, init_scheme, rng)
    st = make_state(config, data, gv, lv)
    trace = [elbo(st)]
    converged = False
    hits = 0
    for _ in range(options.max_sweeps):
        sweep_once(st, options)
        val = elbo(st)
        rel = abs(val - trace[-1]) / max(abs(trace[-1]), 1e-12)
        trace.append(val)
        hits = hits + 1 if rel < options.elbo_tol_train else 0
        if hits >= options.consecutive_hits:
            converged = True
            break
    return FitResult(
        config=config,
        global_=st.gv,
        elbo_trace=trace,
        converged=converged,
        seed=config.seed,
        wall_time=time.perf_counter() - start,
        em_delta_glob=st.delta_glob,
        em_lam_glob=st.lam_glob,
    )
