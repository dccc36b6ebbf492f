"""Variational predictive distributions: per-point local refinement with its
own objective, closed-form mean/variance, Monte-Carlo sampling, and the
sparse variant that plugs in pruned weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cavi import (
    CaviOptions,
    CaviState,
    backward_activation_pass,
    local_terms_pointwise,
    update_gamma_layer,
    update_omega_layer,
)
from . import _kernels as K
from .state import GlobalVariational, NetworkConfig, scale_hyperparameters
from .svi import _local_init_from_globals

logger = logging.getLogger("vbnn")


@dataclass
class PredictiveSummary:
    """Predictive mean and variance per output; variance = signal + noise."""

    mean: np.ndarray
    variance: np.ndarray
    signal_variance: np.ndarray
    samples: np.ndarray | None = None


def predictive_local_fit(global_: GlobalVariational, config: NetworkConfig,
                         x_star: np.ndarray, options: CaviOptions | None = None):
    """Refine q(a*), q(gamma*), q(omega*) for one or many new inputs.

    x_star may be a single vector or an (N*, D_0) matrix; points are
    independent, so they are swept together but each stops against the
    predictive tolerance on its own objective.  Returns the batch state
    and the per-point objective trace (rows = sweeps).
    """
    options = options or CaviOptions()
    x = np.atleast_2d(np.asarray(x_star, dtype=float))
    lv = _local_init_from_globals(config, global_, x)
    st = CaviState(config, scale_hyperparameters(config), global_, lv, x, None)
    L = st.n_hidden_layers
    for l in range(1, L + 1):
        update_omega_layer(st, l)
    prev = local_terms_pointwise(st, include_output=False)
    trace = [prev]
    hits = np.zeros(x.shape[0], dtype=int)
    for _ in range(options.max_sweeps):
        backward_activation_pass(st, options)
        for l in range(1, L + 1):
            update_gamma_layer(st, l)
            update_omega_layer(st, l)
        vals = local_terms_pointwise(st, include_output=False)
        rel = np.abs(vals - prev) / np.maximum(np.abs(prev), 1e-12)
        hits = np.where(rel < options.elbo_tol_predict, hits + 1, 0)
        trace.append(vals)
        prev = vals
        if np.all(hits >= options.consecutive_hits):
            break
    return st, np.vstack(trace)


def predictive_moments(st: CaviState) -> list[PredictiveSummary]:
    """Closed-form mean and (signal + noise) variance for every fitted point."""
    gv = st.gv
    L = st.n_hidden_layers
    alpha, beta = gv.alpha[L], gv.beta[L]
    if np.any(alpha <= 1.0):
        raise ValueError("output noise mean undefined: alpha <= 1")
    noise = beta / (alpha - 1.0)
    eaat = np.ascontiguousarray(st.lv.eaat[L])
    mean = eaat[:, 0, :] @ gv.m[L].T
    tr = K.pair_traces(gv.w_tilde_sq(L), eaat)
    signal = np.maximum(tr - mean**2, 0.0)
    out = []
    for i in range(mean.shape[0]):
        out.append(
            PredictiveSummary(
                mean=mean[i],
                variance=signal[i] + noise,
                signal_variance=signal[i],
            )
        )
    return out


def sample_predictive(st: CaviState, point: int, n_samples: int, rng) -> np.ndarray:
    """Ancestral draws through the fitted activation chain for one point.

    Per draw: a* follows the conditional Gaussian chain, the output row
    and noise variance come from their posteriors, and y* is Gaussian
    around the sampled linear predictor.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    gv, lv = st.gv, st.lv
    L = st.n_hidden_layers
    a = np.tile(st.x[point], (n_samples, 1))
    for il in range(L):
        t = lv.t[il][point]
        m = lv.M[il][point]
        chol = np.linalg.cholesky(lv.S[il][point])
        z = rng.standard_normal((n_samples, t.shape[0]))
        a = t + a @ m.T + z @ chol.T
    aug = np.concatenate([np.ones((n_samples, 1)), a], axis=1)
    d_out = gv.m[L].shape[0]
    y = np.empty((n_samples, d_out))
    for d in range(d_out):
        chol = np.linalg.cholesky(gv.B[L][d])
        rows = gv.m[L][d] + rng.standard_normal((n_samples, chol.shape[0])) @ chol.T
        loc = np.einsum("jp,jp->j", rows, aug)
        eta2 = 1.0 / rng.gamma(gv.alpha[L][d], 1.0 / gv.beta[L][d], size=n_samples)
        y[:, d] = loc + np.sqrt(eta2) * rng.standard_normal(n_samples)
    return y


def predict(global_: GlobalVariational, config: NetworkConfig, x_star: np.ndarray,
            options: CaviOptions | None = None, n_samples: int = 0,
            rng=None) -> list[PredictiveSummary]:
    """Fit the predictive locals and summarize each point."""
    st, _ = predictive_local_fit(global_, config, x_star, options)
    summaries = predictive_moments(st)
    if n_samples > 0:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        for i, s in enumerate(summaries):
            s.samples = sample_predictive(st, i, n_samples, rng)
    return summaries


def sparse_predict(global_: GlobalVariational, config: NetworkConfig, mask,
                   x_star: np.ndarray, options: CaviOptions | None = None) -> list[PredictiveSummary]:
    """Same pipeline with pruned weights replaced by point masses at zero."""
    from .sparsify import apply_mask

    masked = apply_mask(global_, mask)
    if not any(layer.any() for layer in mask.keep):
        logger.warning("sparse mask prunes every weight; predictions are bias-only")
    st, _ = predictive_local_fit(masked, config, x_star, options)
    return predictive_moments(st)
