"""Post-process node selection: credible-interval scores per weight,
Bayesian FDR thresholding, and the backward structural pruning pass."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .state import GlobalVariational, atomic_write_text

logger = logging.getLogger("vbnn")


@dataclass
class SparseMask:
    """Keep flags per weight (biases are never pruned) plus the chosen threshold."""

    keep: list            # per layer l=1..L+1: bool (D_l, D_{l-1})
    node_alive: list      # per hidden layer l=1..L: bool (D_l,)
    kappa_hat: float
    target_alpha: float

    def n_kept(self) -> int:
        return int(sum(k.sum() for k in self.keep))

    def n_total(self) -> int:
        return int(sum(k.size for k in self.keep))


def weight_score(m: float, var: float) -> float:
    """Q = max(Q(W>0), Q(W<0)) = Phi(|m| / sqrt(var))."""
    if not var > 0:
        raise ValueError(f"variance must be positive, got {var}")
    return float(ndtr(abs(m) / np.sqrt(var)))


def fdr_estimate(scores, kappa: float) -> float:
    """Estimated FDR of the set scoring strictly above kappa; 0 if that set is empty."""
    s = np.asarray(scores, dtype=float)
    above = s > kappa
    if not above.any():
        return 0.0
    return float(np.sum((1.0 - s)[above]) / np.count_nonzero(above))


def _weight_scores(global_: GlobalVariational) -> list:
    out = []
    for i in range(global_.n_layers):
        m = global_.m[i][:, 1:]
        var = np.einsum("dpp->dp", global_.B[i])[:, 1:]
        out.append(ndtr(np.abs(m) / np.sqrt(var)))
    return out


def _structural_pass(keep: list) -> None:
    """Drop weights of nodes with no incoming or no outgoing kept edges, to a fixed point."""
    n_layers = len(keep)
    changed = True
    while changed:
        changed = False
        for l in range(n_layers - 1, 0, -1):
            outgoing = keep[l]       # (D_{l+1}, D_l) in 1-based layer l+1 terms
            incoming = keep[l - 1]   # (D_l, D_{l-1})
            for d in range(incoming.shape[0]):
                if not outgoing[:, d].any() and incoming[d, :].any():
                    incoming[d, :] = False
                    changed = True
                if not incoming[d, :].any() and outgoing[:, d].any():
                    outgoing[:, d] = False
                    changed = True


def select_nodes(global_: GlobalVariational, alpha: float) -> SparseMask:
    """Descend through the sorted scores while the estimated FDR stays below alpha.

    All weights scoring at least the final threshold are kept, then a
    backward pass removes edges of disconnected nodes until nothing
    changes.  If even the single best weight would violate alpha the mask
    comes back empty.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    scores = _weight_scores(global_)
    flat = np.concatenate([s.ravel() for s in scores])
    uniq = np.unique(flat)[::-1]
    if 1.0 - uniq[0] >= alpha:
        kappa = float("inf")
    else:
        kappa = uniq[0]
        for u in uniq[1:]:
            if fdr_estimate(flat, u) < alpha:
                kappa = u
            else:
                break
    keep = [s >= kappa for s in scores]
    _structural_pass(keep)
    node_alive = [keep[l][:, :].any(axis=1) & keep[l + 1].any(axis=0) for l in range(len(keep) - 1)]
    return SparseMask(keep=keep, node_alive=node_alive, kappa_hat=float(min(kappa, 1.0)) if np.isfinite(kappa) else 1.0,
                      target_alpha=alpha)


def apply_mask(global_: GlobalVariational, mask: SparseMask) -> GlobalVariational:
    """Point-mass-at-zero copy: masked weight means and covariance rows vanish."""
    gv = global_.copy()
    for i, keep in enumerate(mask.keep):
        drop = ~keep
        d_idx, w_idx = np.nonzero(drop)
        gv.m[i][d_idx, w_idx + 1] = 0.0
        for d, w in zip(d_idx, w_idx):
            gv.B[i][d, w + 1, :] = 0.0
            gv.B[i][d, :, w + 1] = 0.0
    return gv


def mask_to_json(mask: SparseMask) -> dict:
    return {
        "kappa_hat": mask.kappa_hat,
        "target_alpha": mask.target_alpha,
        "kept_indices": [
            [[int(d), int(dp)] for d, dp in zip(*np.nonzero(k))] for k in mask.keep
        ],
        "layer_shapes": [list(k.shape) for k in mask.keep],
        "node_alive": [[bool(b) for b in layer] for layer in mask.node_alive],
        "kept_per_layer": [int(k.sum()) for k in mask.keep],
        "total_per_layer": [int(k.size) for k in mask.keep],
    }


def mask_from_json(doc: dict) -> SparseMask:
    keep = []
    for shape, kept in zip(doc["layer_shapes"], doc["kept_indices"]):
        k = np.zeros(tuple(shape), dtype=bool)
        for d, dp in kept:
            k[d, dp] = True
        keep.append(k)
    node_alive = [np.array(layer, dtype=bool) for layer in doc["node_alive"]]
    return SparseMask(
        keep=keep,
        node_alive=node_alive,
        kappa_hat=doc["kappa_hat"],
        target_alpha=doc["target_alpha"],
    )


def save_mask(path: str, mask: SparseMask) -> None:
    atomic_write_text(path, json.dumps(mask_to_json(mask)))


def load_mask(path: str) -> SparseMask:
    with open(path) as f:
        return mask_from_json(json.load(f))


def mask_to_dot(mask: SparseMask, feature_names=None, target_names=None) -> str:
    """Graphviz rendering of the surviving architecture."""
    lines = ["digraph sparse_network {", "  rankdir=LR;"]
    n_layers = len(mask.keep)
    d0 = mask.keep[0].shape[1]
    feats = feature_names or [f"x{j + 1}" for j in range(d0)]
    dy = mask.keep[-1].shape[0]
    targets = target_names or [f"y{j + 1}" for j in range(dy)]

    def node_name(layer, j):
        if layer == 0:
            return feats[j]
        if layer == n_layers:
            return targets[j]
        return f"h{layer}_{j + 1}"

    for l, keep in enumerate(mask.keep):
        for d, dp in zip(*np.nonzero(keep)):
            lines.append(f'  "{node_name(l, dp)}" -> "{node_name(l + 1, d)}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
