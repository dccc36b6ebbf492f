"""Configuration, hyperparameter scaling, variational state containers,
activation-moment bookkeeping, the two random initialization schemes, and
model (de)serialization."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import _kernels as K
from .distributions import GigParams, InvGammaParams, gig_mean_inv

logger = logging.getLogger("vbnn")

FAMILIES = ("ig", "gamma", "igauss", "gig")

SCHEMA_VERSION = 1


def default_gig_prior(family: str) -> GigParams:
    """Family defaults; the IG choice nu=-1.5 gives a marginal student-t with 3 dof."""
    if family == "ig":
        return GigParams(nu=-1.5, delta=1.0, lam=0.0)
    if family == "gamma":
        return GigParams(nu=2.0, delta=0.0, lam=1.0)
    if family == "igauss":
        return GigParams(nu=-0.5, delta=1.0, lam=1.0)
    if family == "gig":
        return GigParams(nu=-1.5, delta=1.0, lam=1.0)
    raise ValueError(f"unknown prior family {family!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture, priors and temperature of one network.

    dims is [D_0, D_1, ..., D_L, D_{L+1}] with D_0 inputs and D_{L+1}
    outputs; layers are indexed 1..L+1 and carry weight matrices of shape
    D_l x D_{l-1} plus a bias column.
    """

    dims: tuple
    temperature: float = 0.1
    prior_family: str = "ig"
    glob_prior: GigParams | None = None
    loc_prior_base: GigParams | None = None
    bias_var: float = 1.0
    noise_prior_out: InvGammaParams = InvGammaParams(2.0, 0.5)
    noise_prior_hidden: InvGammaParams = InvGammaParams(3.0, 0.03)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.glob_prior is None:
            object.__setattr__(self, "glob_prior", default_gig_prior(self.prior_family))
        if self.loc_prior_base is None:
            object.__setattr__(self, "loc_prior_base", default_gig_prior(self.prior_family))

    @property
    def n_hidden_layers(self) -> int:
        return len(self.dims) - 2

    def validate(self) -> None:
        L = self.n_hidden_layers
        if L < 1:
            raise ValueError("need at least one hidden layer")
        if any(d < 1 for d in self.dims):
            raise ValueError("all layer widths must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.bias_var > 0:
            raise ValueError("bias variance must be positive")
        if self.prior_family not in FAMILIES:
            raise ValueError(f"prior family must be one of {FAMILIES}")
        for name, p in (("glob_prior", self.glob_prior), ("loc_prior_base", self.loc_prior_base)):
            if self.prior_family == "ig" and p.lam != 0.0:
                raise ValueError(f"{name}: IG family requires lam = 0")
            if self.prior_family == "gamma":
                if p.delta != 0.0:
                    raise ValueError(f"{name}: gamma family requires delta = 0")
                if p.nu <= 1.0:
                    raise ValueError(f"{name}: gamma family requires nu > 1 for finite E[1/x]")
            if self.prior_family == "igauss" and p.nu != -0.5:
                raise ValueError(f"{name}: inverse-Gaussian family requires nu = -1/2")
            if self.prior_family == "gig" and (p.delta <= 0.0 or p.lam <= 0.0):
                raise ValueError(f"{name}: general GIG requires delta > 0 and lam > 0")
            # priors must have finite E[1/x]: every weight update consumes it
            _, inv = gig_mean_inv(p.nu, p.delta if p.delta > 0 else p.delta, p.lam)
            if p.delta > 0 or p.lam > 0:
                if not np.isfinite(inv):
                    raise ValueError(f"{name}: E[1/x] is infinite for {p}")


@dataclass(frozen=True)
class ScaledPriors:
    """Per-layer priors after the depth/width scaling; built exactly once per fit."""

    glob: GigParams
    loc: tuple  # GigParams per layer l = 1..L+1


def scale_hyperparameters(config: NetworkConfig) -> ScaledPriors:
    """delta_glob / sqrt(L) and delta_loc / sqrt(D_{l-1}) per layer; nu unchanged."""
    L = config.n_hidden_layers
    g = config.glob_prior
    glob = GigParams(g.nu, g.delta / math.sqrt(L), g.lam)
    base = config.loc_prior_base
    loc = tuple(
        GigParams(base.nu, base.delta / math.sqrt(config.dims[l - 1]), base.lam)
        for l in range(1, L + 2)
    )
    return ScaledPriors(glob=glob, loc=loc)


class GlobalVariational:
    """Gaussian weight factors, inverse-gamma noise factors, GIG shrinkage factors.

    Layer index l runs 1..L+1; storage lists are 0-based.  Weight rows
    are augmented with the bias at position 0, so m[l][d] has length
    D_{l-1} + 1 and B[l][d] is the matching SPD covariance.
    """

    def __init__(self, m, B, alpha, beta, tau, psi_nu, psi_delta, psi_lam):
        self.m = m              # list of (D_l, P_l)
        self.B = B              # list of (D_l, P_l, P_l)
        self.alpha = alpha      # list of (D_l,)
        self.beta = beta        # list of (D_l,)
        self.tau = tau          # list of GigParams
        self.psi_nu = psi_nu    # list of float
        self.psi_delta = psi_delta  # list of (D_l, D_{l-1})
        self.psi_lam = psi_lam  # list of float

    @property
    def n_layers(self) -> int:
        return len(self.m)

    def w_tilde_sq(self, i: int) -> np.ndarray:
        """E[W~^T W~] per row: B + m m^T, shape (D, P, P)."""
        m = self.m[i]
        return self.B[i] + m[:, :, None] * m[:, None, :]

    def w_only_sq(self, i: int) -> np.ndarray:
        """Weights-only block E[W^T W] per row, shape (D, P-1, P-1)."""
        m = self.m[i][:, 1:]
        return self.B[i][:, 1:, 1:] + m[:, :, None] * m[:, None, :]

    def wb_cross(self, i: int) -> np.ndarray:
        """E[W b] per row (weights times own bias), shape (D, P-1)."""
        m = self.m[i]
        return m[:, 1:] * m[:, 0, None] + self.B[i][:, 1:, 0]

    def w2_elem(self, i: int) -> np.ndarray:
        """Elementwise E[W^2] (bias excluded), shape (D, P-1)."""
        m = self.m[i][:, 1:]
        diag = np.einsum("dpp->dp", self.B[i])[:, 1:]
        return m**2 + diag

    def inv_eta(self, i: int) -> np.ndarray:
        return self.alpha[i] / self.beta[i]

    def copy(self) -> "GlobalVariational":
        return GlobalVariational(
            [x.copy() for x in self.m],
            [x.copy() for x in self.B],
            [x.copy() for x in self.alpha],
            [x.copy() for x in self.beta],
            list(self.tau),
            list(self.psi_nu),
            [x.copy() for x in self.psi_delta],
            list(self.psi_lam),
        )


class LocalVariational:
    """Per-observation activation chain (t, M, S), Bernoulli gates and PG tilts.

    Levels j = 0..L hold the cached activation moments, with level 0
    pinned to the inputs.  Hidden layer l = 1..L owns rho/A/t/M/S at
    list index l-1.
    """

    def __init__(self, n_obs: int, dims):
        self.n_obs = n_obs
        self.dims = tuple(dims)
        L = len(dims) - 2
        self.rho = [np.full((n_obs, dims[l]), 0.5) for l in range(1, L + 1)]
        self.A = [np.zeros((n_obs, dims[l])) for l in range(1, L + 1)]
        self.eomega = [np.full((n_obs, dims[l]), 0.25) for l in range(1, L + 1)]
        self.t = [np.zeros((n_obs, dims[l])) for l in range(1, L + 1)]
        self.M = [np.zeros((n_obs, dims[l], dims[l - 1])) for l in range(1, L + 1)]
        self.S = [np.tile(0.01 * np.eye(dims[l]), (n_obs, 1, 1)) for l in range(1, L + 1)]
        # moment caches, refreshed by activation_moments
        self.ea = [None] * (L + 1)     # (N, D_j)
        self.eaat = [None] * (L + 1)   # (N, D_j + 1, D_j + 1) augmented with leading 1
        self.cross = [None] * L        # E[a_l a~_{l-1}^T], (N, D_l, D_{l-1}+1)

    @property
    def n_hidden_layers(self) -> int:
        return len(self.rho)

    def ea_aug(self, j: int) -> np.ndarray:
        """E[a~_j] = (1, E[a_j]) read off the cached augmented second moment."""
        return self.eaat[j][:, 0, :]

    def subset(self, idx) -> "LocalVariational":
        out = LocalVariational.__new__(LocalVariational)
        out.n_obs = len(idx)
        out.dims = self.dims
        for name in ("rho", "A", "eomega", "t", "M", "S"):
            setattr(out, name, [arr[idx] for arr in getattr(self, name)])
        out.ea = [arr[idx] if arr is not None else None for arr in self.ea]
        out.eaat = [arr[idx] if arr is not None else None for arr in self.eaat]
        out.cross = [arr[idx] if arr is not None else None for arr in self.cross]
        return out

    def copy(self) -> "LocalVariational":
        out = LocalVariational.__new__(LocalVariational)
        out.n_obs = self.n_obs
        out.dims = self.dims
        for name in ("rho", "A", "eomega", "t", "M", "S"):
            setattr(out, name, [arr.copy() for arr in getattr(self, name)])
        out.ea = [arr.copy() if arr is not None else None for arr in self.ea]
        out.eaat = [arr.copy() if arr is not None else None for arr in self.eaat]
        out.cross = [arr.copy() if arr is not None else None for arr in self.cross]
        return out


@dataclass
class Dataset:
    """Normalized inputs, raw targets, and the normalization statistics."""

    x: np.ndarray
    y: np.ndarray
    feature_names: list
    target_names: list
    x_mean: np.ndarray
    x_sd: np.ndarray
    x_raw: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]


@dataclass
class FitResult:
    config: NetworkConfig
    global_: GlobalVariational
    elbo_trace: list
    converged: bool
    seed: int
    wall_time: float
    em_delta_glob: float | None = None
    em_lam_glob: float | None = None


def activation_moments(local: LocalVariational, x: np.ndarray) -> None:
    """Refresh E[a], E[a a^T] and the layer-to-layer cross moments.

    Runs the forward recursion implied by the conditional chain: the mean
    propagates as t + M E[a_prev], the covariance as S + M V M^T, and the
    cross moment picks up t E[a_prev]^T + M E[a_prev a_prev^T].
    """
    L = local.n_hidden_layers
    ea_prev = x
    cov_prev = None  # level 0 is deterministic
    local.ea[0] = x
    if local.eaat[0] is None:
        local.eaat[0] = K.aug_outer(np.ascontiguousarray(x), np.zeros((x.shape[0], x.shape[1], x.shape[1])))
    for il in range(L):
        t, M, S = local.t[il], local.M[il], local.S[il]
        ea = t + np.einsum("nij,nj->ni", M, ea_prev)
        if cov_prev is None:
            cov = S.copy()
        else:
            cov = S + np.einsum("nij,njk,nlk->nil", M, cov_prev, M, optimize=True)
        eaa_prev = local.eaat[il][:, 1:, 1:]
        cross_a = t[:, :, None] * ea_prev[:, None, :] + np.einsum(
            "nij,njk->nik", M, eaa_prev
        )
        local.ea[il + 1] = ea
        local.eaat[il + 1] = K.aug_outer(np.ascontiguousarray(ea), np.ascontiguousarray(cov))
        local.cross[il] = np.concatenate([ea[:, :, None], cross_a], axis=2)
        ea_prev, cov_prev = ea, cov


def _draw_init_delta(prior: GigParams, rng) -> float:
    """Randomized initial delta-hat with mean-square equal to the prior delta^2.

    Draws x ~ InvGamma(|nu|, delta^2/2) and returns sqrt(2(|nu|-1) x);
    degenerate cases (delta = 0, |nu| <= 1) fall back deterministically.
    """
    anu = abs(prior.nu)
    if prior.delta == 0.0:
        return 0.0
    if anu <= 1.0:
        return prior.delta
    g = rng.gamma(anu, 2.0 / prior.delta**2)
    x = 1.0 / max(g, 1e-300)
    return math.sqrt(2.0 * (anu - 1.0) * x)


def initialize(config: NetworkConfig, data: Dataset, scheme: str, rng):
    """Random initialization of the full variational state.

    Hidden weight means come from a Laplace or spike-and-slab draw, bias
    means anchor each unit's hyperplane at a point drawn uniformly inside
    the (5 percent padded) range of the forward-propagated inputs, the
    last layer is seeded by ridge regression, and all covariances start
    at 0.01 I.
    """
    if scheme not in ("laplace", "spike_slab"):
        raise ValueError(f"unknown initialization scheme {scheme!r}")
    config.validate()
    priors = scale_hyperparameters(config)
    dims = config.dims
    L = config.n_hidden_layers
    n = data.n_obs
    T = config.temperature

    m = []
    B = []
    alpha = []
    beta = []
    tau = []
    psi_nu = []
    psi_delta = []
    psi_lam = []
    for l in range(1, L + 2):
        d_out, d_in = dims[l], dims[l - 1]
        m.append(np.zeros((d_out, d_in + 1)))
        B.append(np.tile(0.01 * np.eye(d_in + 1), (d_out, 1, 1)))
        if l == L + 1:
            alpha.append(np.full(d_out, config.noise_prior_out.alpha))
            beta.append(np.full(d_out, config.noise_prior_out.beta))
        else:
            alpha.append(np.full(d_out, config.noise_prior_hidden.alpha))
            beta.append(np.full(d_out, config.noise_prior_hidden.beta))
        loc = priors.loc[l - 1]
        tau.append(GigParams(priors.glob.nu, _draw_init_delta(priors.glob, rng), priors.glob.lam))
        psi_nu.append(loc.nu)
        psi_delta.append(
            np.array(
                [[_draw_init_delta(loc, rng) for _ in range(d_in)] for _ in range(d_out)]
            )
        )
        psi_lam.append(loc.lam)
    gv = GlobalVariational(m, B, alpha, beta, tau, psi_nu, psi_delta, psi_lam)

    lv = LocalVariational(n, dims)
    z = data.x
    for l in range(1, L + 1):
        d_out, d_in = dims[l], dims[l - 1]
        zmin, zmax = z.min(axis=0), z.max(axis=0)
        pad = 0.05 * (zmax - zmin)
        pad = np.where(zmax > zmin, pad, 1.0)
        if scheme == "laplace":
            mw = rng.laplace(0.0, math.sqrt(2.0 / d_in), size=(d_out, d_in))
        else:
            pi = 1.0 / (1.0 + math.sqrt(d_in))
            slab = rng.normal(0.0, math.sqrt(2.0 / math.sqrt(d_in)), size=(d_out, d_in))
            mw = np.where(rng.random((d_out, d_in)) < pi, slab, 0.0)
        anchors = rng.uniform(zmin - pad, zmax + pad, size=(d_out, d_in))
        mb = -np.sum(mw * anchors, axis=1)
        gv.m[l - 1][:, 0] = mb
        gv.m[l - 1][:, 1:] = mw
        pre = z @ mw.T + mb
        rho = np.clip(expit(pre / T), 1e-12, 1.0 - 1e-12)
        lv.rho[l - 1] = rho
        lv.M[l - 1] = rho[:, :, None] * mw[None, :, :]
        lv.t[l - 1] = mb * rho
        z = rho * pre

    # last layer from ridge regression of Y on the propagated z_L
    zt = np.concatenate([np.ones((n, 1)), z], axis=1)
    ridge = np.eye(dims[L] + 1)
    ridge[0, 0] = 0.0
    coeffs = np.linalg.solve(zt.T @ zt + ridge, zt.T @ data.y)
    gv.m[L][:, :] = coeffs.T

    activation_moments(lv, data.x)
    return gv, lv


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _pack_lower(mat: np.ndarray) -> list:
    idx = np.tril_indices(mat.shape[0])
    return mat[idx].tolist()


def _unpack_lower(vals, p: int) -> np.ndarray:
    out = np.zeros((p, p))
    idx = np.tril_indices(p)
    out[idx] = vals
    out = out + out.T - np.diag(np.diag(out))
    return out


def _gig_to_json(p: GigParams) -> dict:
    return {"nu": p.nu, "delta": p.delta, "lam": p.lam}


def _gig_from_json(d: dict) -> GigParams:
    return GigParams(d["nu"], d["delta"], d["lam"])


def config_to_json(config: NetworkConfig) -> dict:
    return {
        "dims": list(config.dims),
        "temperature": config.temperature,
        "prior_family": config.prior_family,
        "glob_prior": _gig_to_json(config.glob_prior),
        "loc_prior_base": _gig_to_json(config.loc_prior_base),
        "bias_var": config.bias_var,
        "noise_prior_out": {"alpha": config.noise_prior_out.alpha, "beta": config.noise_prior_out.beta},
        "noise_prior_hidden": {"alpha": config.noise_prior_hidden.alpha, "beta": config.noise_prior_hidden.beta},
        "seed": config.seed,
    }


def config_from_json(d: dict) -> NetworkConfig:
    return NetworkConfig(
        dims=tuple(d["dims"]),
        temperature=d["temperature"],
        prior_family=d["prior_family"],
        glob_prior=_gig_from_json(d["glob_prior"]),
        loc_prior_base=_gig_from_json(d["loc_prior_base"]),
        bias_var=d["bias_var"],
        noise_prior_out=InvGammaParams(**d["noise_prior_out"]),
        noise_prior_hidden=InvGammaParams(**d["noise_prior_hidden"]),
        seed=d["seed"],
    )


def atomic_write_text(path: str, text: str) -> None:
    """Write-temp-then-rename so partial files never appear."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(path: str, fit: FitResult, normalization: dict | None = None) -> None:
    gv = fit.global_
    layers = []
    for i in range(gv.n_layers):
        layers.append(
            {
                "m": gv.m[i].tolist(),
                "b_packed": [_pack_lower(gv.B[i][d]) for d in range(gv.B[i].shape[0])],
                "alpha": gv.alpha[i].tolist(),
                "beta": gv.beta[i].tolist(),
                "tau": _gig_to_json(gv.tau[i]),
                "psi": {
                    "nu": gv.psi_nu[i],
                    "lam": gv.psi_lam[i],
                    "delta": gv.psi_delta[i].tolist(),
                },
            }
        )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_json(fit.config),
        "normalization": normalization or {},
        "layers": layers,
        "elbo_trace": list(map(float, fit.elbo_trace)),
        "converged": bool(fit.converged),
        "seed": int(fit.seed),
        "wall_time": float(fit.wall_time),
        "em": {"delta_glob": fit.em_delta_glob, "lam_glob": fit.em_lam_glob},
    }
    atomic_write_text(path, json.dumps(doc))


@dataclass
class LoadedModel:
    config: NetworkConfig
    global_: GlobalVariational
    elbo_trace: list
    converged: bool
    seed: int
    wall_time: float
    normalization: dict
    em_delta_glob: float | None
    em_lam_glob: float | None

    def fit_result(self) -> FitResult:
        return FitResult(
            config=self.config,
            global_=self.global_,
            elbo_trace=self.elbo_trace,
            converged=self.converged,
            seed=self.seed,
            wall_time=self.wall_time,
            em_delta_glob=self.em_delta_glob,
            em_lam_glob=self.em_lam_glob,
        )


def load_model(path: str) -> LoadedModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {doc.get('schema_version')!r}")
    config = config_from_json(doc["config"])
    m, B, alpha, beta, tau, psi_nu, psi_delta, psi_lam = [], [], [], [], [], [], [], []
    for layer in doc["layers"]:
        marr = np.array(layer["m"], dtype=float)
        p = marr.shape[1]
        m.append(marr)
        B.append(np.stack([_unpack_lower(v, p) for v in layer["b_packed"]]))
        alpha.append(np.array(layer["alpha"], dtype=float))
        beta.append(np.array(layer["beta"], dtype=float))
        tau.append(_gig_from_json(layer["tau"]))
        psi_nu.append(float(layer["psi"]["nu"]))
        psi_lam.append(float(layer["psi"]["lam"]))
        psi_delta.append(np.array(layer["psi"]["delta"], dtype=float))
    gv = GlobalVariational(m, B, alpha, beta, tau, psi_nu, psi_delta, psi_lam)
    em = doc.get("em", {})
    return LoadedModel(
        config=config,
        global_=gv,
        elbo_trace=list(doc["elbo_trace"]),
        converged=bool(doc["converged"]),
        seed=int(doc["seed"]),
        wall_time=float(doc["wall_time"]),
        normalization=doc.get("normalization", {}),
        em_delta_glob=em.get("delta_glob"),
        em_lam_glob=em.get("lam_glob"),
    )
