"""Multi-start fits combined by tempered-ELBO model averaging; mixture
predictive moments."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .cavi import CaviOptions, fit_cavi
from .predict import PredictiveSummary, predict
from .state import Dataset, FitResult, NetworkConfig, atomic_write_text, load_model, save_model

logger = logging.getLogger("vbnn")

_INIT_SCHEMES = ("laplace", "spike_slab")


@dataclass
class EnsembleModel:
    members: list          # FitResult per member
    weights: np.ndarray    # simplex, length K
    zeta: float


def ensemble_weights(elbos, zeta: float) -> np.ndarray:
    """softmax(zeta * ELBO) computed in log space."""
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    e = zeta * np.asarray(elbos, dtype=float)
    e = e - e.max()
    w = np.exp(e)
    return w / w.sum()


def ensemble_predict(model: EnsembleModel, x_star, options: CaviOptions | None = None) -> list[PredictiveSummary]:
    """Mixture mean and variance across members, per test point."""
    per_member = [
        predict(fit.global_, fit.config, x_star, options) for fit in model.members
    ]
    w = model.weights
    out = []
    for i in range(len(per_member[0])):
        means = np.stack([pm[i].mean for pm in per_member])
        variances = np.stack([pm[i].variance for pm in per_member])
        signals = np.stack([pm[i].signal_variance for pm in per_member])
        mean = w @ means
        variance = w @ variances + w @ means**2 - mean**2
        signal = w @ signals + w @ means**2 - mean**2
        out.append(PredictiveSummary(mean=mean, variance=variance, signal_variance=signal))
    return out


def combine_summaries(weights, summaries_per_member) -> PredictiveSummary:
    """Mixture moments for one point from precomputed member summaries."""
    w = np.asarray(weights, dtype=float)
    means = np.stack([s.mean for s in summaries_per_member])
    variances = np.stack([s.variance for s in summaries_per_member])
    signals = np.stack([s.signal_variance for s in summaries_per_member])
    mean = w @ means
    return PredictiveSummary(
        mean=mean,
        variance=w @ variances + w @ means**2 - mean**2,
        signal_variance=w @ signals + w @ means**2 - mean**2,
    )


def fit_ensemble(config: NetworkConfig, data: Dataset, k: int = 4, zeta: float = 0.05,
                 options: CaviOptions | None = None) -> EnsembleModel:
    """K independent fits from seeds seed+0..K-1, alternating init schemes.

    Non-converged members stay in the ensemble with their final ELBO but
    keep their converged=False flag.
    """
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    members = []
    for j in range(k):
        member_config = replace(config, seed=config.seed + j)
        scheme = _INIT_SCHEMES[j % 2]
        fit = fit_cavi(member_config, data, options, init_scheme=scheme)
        if not fit.converged:
            logger.warning("ensemble member %d did not converge", j)
        members.append(fit)
    weights = ensemble_weights([fit.elbo_trace[-1] for fit in members], zeta)
    return EnsembleModel(members=members, weights=weights, zeta=zeta)


def save_ensemble(path: str, model: EnsembleModel, normalization: dict | None = None) -> None:
    """Ensemble file: member model files next to it, plus weights and zeta."""
    stem, _ = os.path.splitext(path)
    member_paths = []
    for j, fit in enumerate(model.members):
        member_path = f"{stem}_member{j}.json"
        save_model(member_path, fit, normalization)
        member_paths.append(os.path.basename(member_path))
    doc = {
        "schema_version": 1,
        "kind": "ensemble",
        "zeta": model.zeta,
        "weights": model.weights.tolist(),
        "members": member_paths,
    }
    atomic_write_text(path, json.dumps(doc))


def load_ensemble(path: str) -> tuple[EnsembleModel, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "ensemble":
        raise ValueError(f"{path} is not an ensemble file")
    base = os.path.dirname(os.path.abspath(path))
    members = []
    normalization = {}
    for name in doc["members"]:
        loaded = load_model(os.path.join(base, name))
        normalization = loaded.normalization
        members.append(loaded.fit_result())
    model = EnsembleModel(
        members=members,
        weights=np.asarray(doc["weights"], dtype=float),
        zeta=doc["zeta"],
    )
    return model, normalization
