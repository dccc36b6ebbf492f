"""Minibatch training: local coordinate ascent on a subsample, scaled
sufficient statistics for the intermediate globals, and natural-parameter
interpolation along a Robbins-Monro schedule.  Convergence is judged on
noisy ELBO estimates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cavi import (
    CaviOptions,
    CaviState,
    NumericalAbort,
    backward_activation_pass,
    elbo,
    elbo_local_block,
    eta_stats_layer,
    solve_weight_row,
    update_gamma_layer,
    update_omega_layer,
    update_psi_layer,
    update_tau_layer,
    weight_stats_layer,
    _chol_ladder,
    _symmetrize,
)
from .state import (
    Dataset,
    FitResult,
    LocalVariational,
    NetworkConfig,
    activation_moments,
    initialize,
    scale_hyperparameters,
)

logger = logging.getLogger("vbnn")


@dataclass
class SviOptions:
    batch_size: int = 10
    forgetting_rate: float = 0.7
    max_iters: int = 300
    local_inner_tol: float = 1e-4
    local_inner_max: int = 50
    seed: int | None = None
    elbo_tol: float = 1e-5
    window: int = 5
    window_hits: int = 3
    init_scheme: str = "laplace"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.5 < self.forgetting_rate <= 1.0):
            raise ValueError("forgetting rate must lie in (0.5, 1]")


def learning_rate(t: int, k: float) -> float:
    """Robbins-Monro step size (1 + t)^(-k)."""
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    return float((1.0 + t) ** (-k))


class SviRun:
    """Mutable run state: the shared globals plus the full data set."""

    def __init__(self, config: NetworkConfig, data: Dataset, options: SviOptions,
                 cavi_options: CaviOptions | None = None):
        config.validate()
        self.config = config
        self.data = data
        self.options = options
        self.cavi_options = cavi_options or CaviOptions()
        self.priors = scale_hyperparameters(config)
        self.gv = None
        self.delta_glob = self.priors.glob.delta
        self.lam_glob = self.priors.glob.lam


def _local_init_from_globals(config: NetworkConfig, gv, x: np.ndarray) -> LocalVariational:
    """Forward re-initialization of a fresh minibatch from the global means."""
    T = config.temperature
    lv = LocalVariational(x.shape[0], config.dims)
    z = x
    for l in range(1, config.n_hidden_layers + 1):
        mw = gv.m[l - 1][:, 1:]
        mb = gv.m[l - 1][:, 0]
        pre = z @ mw.T + mb
        rho = np.clip(expit(pre / T), 1e-12, 1.0 - 1e-12)
        lv.rho[l - 1] = rho
        lv.M[l - 1] = rho[:, :, None] * mw[None, :, :]
        lv.t[l - 1] = mb * rho
        z = rho * pre
    activation_moments(lv, x)
    return lv


def optimize_locals(st: CaviState, cavi_options: CaviOptions, scale: float,
                    tol: float, max_iter: int) -> float:
    """Coordinate ascent on (omega, a, gamma) for the batch; returns the local ELBO."""
    L = st.n_hidden_layers
    prev = None
    val = elbo_local_block(st, scale=scale)
    for _ in range(max_iter):
        for l in range(1, L + 1):
            update_omega_layer(st, l)
        backward_activation_pass(st, cavi_options)
        for l in range(1, L + 1):
            update_gamma_layer(st, l)
        prev, val = val, elbo_local_block(st, scale=scale)
        if abs(val - prev) < tol * max(1.0, abs(prev)):
            break
    return val


def svi_step(run: SviRun, t: int, rng):
    """One stochastic update of the globals; returns (noisy ELBO, batch state).

    The minibatch is drawn uniformly without replacement; sums over it are
    scaled by N/|S| before entering the eta and weight statistics, and the
    new globals are convex combinations in natural coordinates, which keeps
    every interpolated precision SPD.
    """
    opts = run.options
    data = run.data
    n = data.n_obs
    bs = min(opts.batch_size, n)
    idx = np.sort(rng.choice(n, size=bs, replace=False))
    scale = n / bs
    x_b, y_b = data.x[idx], data.y[idx]

    if t == 0:
        batch_ds = Dataset(
            x=x_b, y=y_b, feature_names=data.feature_names,
            target_names=data.target_names, x_mean=data.x_mean,
            x_sd=data.x_sd, x_raw=data.x_raw[idx],
        )
        run.gv, lv = initialize(run.config, batch_ds, opts.init_scheme, rng)
    else:
        lv = _local_init_from_globals(run.config, run.gv, x_b)

    st = CaviState(run.config, run.priors, run.gv, lv, x_b, y_b)
    st.delta_glob = run.delta_glob
    st.lam_glob = run.lam_glob

    L = st.n_hidden_layers
    for l in range(1, L + 2):
        update_tau_layer(st, l)
        update_psi_layer(st, l)

    optimize_locals(st, run.cavi_options, scale, opts.local_inner_tol, opts.local_inner_max)

    lr = learning_rate(t, opts.forgetting_rate)
    gv = st.gv
    for l in range(1, L + 2):
        i = l - 1
        prior = run.config.noise_prior_out if l == L + 1 else run.config.noise_prior_hidden
        if t == 0:
            gv.alpha[i] = np.full(gv.alpha[i].shape, prior.alpha + 0.5 * n)
        beta_hat = eta_stats_layer(st, l, scale=scale)
        if np.any(beta_hat <= 0) or not np.all(np.isfinite(beta_hat)):
            raise NumericalAbort(f"layer {l}: nonpositive intermediate noise rate")
        gv.beta[i] = 1.0 / ((1.0 - lr) / gv.beta[i] + lr / beta_hat)

    for l in range(1, L + 2):
        i = l - 1
        binv_hat, rhs_hat = weight_stats_layer(st, l, scale=scale)
        binv_old = np.linalg.inv(
            _chol_ladder(gv.B[i], run.cavi_options.jitter, f"stored weight covariance layer {l}")
        )
        binv_new = _symmetrize((1.0 - lr) * binv_old + lr * binv_hat)
        eta1_new = (1.0 - lr) * np.einsum("dpq,dq->dp", binv_old, gv.m[i]) + lr * rhs_hat
        cov, mean = solve_weight_row(
            binv_new, eta1_new, run.cavi_options.jitter, f"interpolated weights layer {l}"
        )
        gv.B[i] = cov
        gv.m[i] = mean

    noisy = elbo(st, scale=scale)
    return noisy, st


def fit_svi(config: NetworkConfig, data: Dataset, options: SviOptions | None = None,
            cavi_options: CaviOptions | None = None, rng=None) -> FitResult:
    """Iterate svi_step, monitoring a trailing window of noisy ELBO estimates.

    Convergence: the mean over the last `window` estimates changes by less
    than elbo_tol (relative) for `window_hits` consecutive iterations.
    """
    options = options or SviOptions()
    seed = options.seed if options.seed is not None else config.seed
    if rng is None:
        rng = np.random.default_rng(seed)
    run = SviRun(config, data, options, cavi_options)
    start = time.perf_counter()
    trace = []
    prev_mean = None
    hits = 0
    converged = False
    for t in range(options.max_iters):
        noisy, _ = svi_step(run, t, rng)
        trace.append(noisy)
        if len(trace) >= options.window:
            mean = float(np.mean(trace[-options.window:]))
            if prev_mean is not None:
                rel = abs(mean - prev_mean) / max(abs(prev_mean), 1e-12)
                hits = hits + 1 if rel < options.elbo_tol else 0
                if hits >= options.window_hits:
                    converged = True
            prev_mean = mean
        if converged:
            break
    return FitResult(
        config=config,
        global_=run.gv,
        elbo_trace=trace,
        converged=converged,
        seed=seed,
        wall_time=time.perf_counter() - start,
        em_delta_glob=run.delta_glob,
        em_lam_glob=run.lam_glob,
    )
