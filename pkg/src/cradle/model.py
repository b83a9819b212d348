"""Encoder, counterfactual branch, decoder and generator of the causal VAE.

Parameters live in a flat ``dict`` of arrays keyed by name.  Every function
here also accepts a dict of :class:`~cradle.numerics.autodiff.Tensor`, which
is how the training objective obtains gradients.

Latent layout is fixed: decoder input is ``basal ⊕ perturbation ⊕ artifact``
and encoder input is ``normalised counts ⊕ perturbation ⊕ artifact``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .numerics import autodiff as ad
from .numerics.distributions import GaussianParams, gamma_poisson_sample, relaxed_bernoulli_rsample
from .numerics.nn import MlpSpec, init_mlp, mlp_forward

VARIANTS = ("full", "no_cf", "no_causal")
_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))


@dataclass
class ModelConfig:
    n_genes: int
    n_treatments: int
    d_z: int = 200
    emb_hidden: tuple = (400, 400, 400)
    enc_hidden: tuple = (400, 400, 400)
    dec_hidden: tuple = (400,)
    activation: str = "relu"
    mask_prior_prob: float = 0.01
    embedding_prior_scale: float = 1.0
    variant: str = "full"

    def __post_init__(self):
        if self.d_z <= 0:
            raise ValueError("d_z must be positive")
        if not 0 < self.mask_prior_prob < 1:
            raise ValueError("mask_prior_prob must lie in (0, 1)")
        if self.embedding_prior_scale <= 0:
            raise ValueError("embedding_prior_scale must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.emb_hidden = tuple(int(w) for w in self.emb_hidden)
        self.enc_hidden = tuple(int(w) for w in self.enc_hidden)
        self.dec_hidden = tuple(int(w) for w in self.dec_hidden)

    @property
    def emb_spec(self):
        d = self.d_z
        return MlpSpec((d + self.n_treatments, *self.emb_hidden), self.activation,
                       (("mean", d, "identity"), ("scale", d, "softplus")))

    @property
    def enc_spec(self):
        d = self.d_z
        return MlpSpec((self.n_genes + 2 * d, *self.enc_hidden), self.activation,
                       (("mean", d, "identity"), ("scale", d, "softplus")))

    @property
    def dec_spec(self):
        return MlpSpec((3 * self.d_z, *self.dec_hidden), self.activation,
                       (("logits", self.n_genes, "identity"),))

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Normalizer:
    """Per-gene standardisation of ``log1p`` counts."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, counts):
        logx = np.log1p(np.asarray(counts, dtype=float))
        std = logx.std(axis=0)
        return cls(logx.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, counts):
        return (np.log1p(np.asarray(counts, dtype=float)) - self.mean) / self.std


def init_params(cfg, rng):
    params = {"mask_logits": np.full((cfg.n_treatments, cfg.d_z), special.logit(cfg.mask_prior_prob))}
    params.update(init_mlp(cfg.emb_spec, "emb", rng))
    params["u.mean"] = np.zeros(cfg.d_z)
    params["u.raw_scale"] = np.full(cfg.d_z, _SOFTPLUS_INV_ONE)
    params.update(init_mlp(cfg.enc_spec, "enc", rng))
    params.update(init_mlp(cfg.dec_spec, "dec", rng))
    params["raw_theta"] = np.array(_SOFTPLUS_INV_ONE)
    return params


def inverse_dispersion(params):
    return ad.softplus(params["raw_theta"])


@dataclass
class GlobalSample:
    """One draw of the batch-global latents, with a leading particle axis."""

    m: object           # S x T x d mask sample in [0, 1]
    q_e: GaussianParams  # S x T x d
    e: object           # S x T x d
    q_u: GaussianParams  # d (None for the no_causal variant)
    u: object           # S x d

    @property
    def effects(self):
        """Per-treatment latent shifts ``e_t * m_t`` (S x T x d)."""
        return self.e * self.m


@dataclass
class LatentSample:
    zb: object
    zp: object
    za: object
    q_zb: GaussianParams
    globals: GlobalSample
    a: np.ndarray = field(repr=False, default=None)


@dataclass
class CfPair:
    rows: np.ndarray          # batch positions of eligible cells
    q_c: GaussianParams        # encoding of (x_i, z^p, u)
    q_ref: GaussianParams      # encoding of (median reference, z^p, u)


def sample_globals(params, cfg, rng, n_particles=1, temperature=1.0, hard=False):
    """Masks, perturbation embeddings and the artifact embedding, drawn once per call."""
    S, T, d = n_particles, cfg.n_treatments, cfg.d_z
    uniform = rng.uniform(size=(S, T, d))
    np.clip(uniform, 1e-12, 1 - 1e-12, out=uniform)
    eps_e = rng.standard_normal((S, T, d))
    eps_u = rng.standard_normal((S, d))
    m = relaxed_bernoulli_rsample(params["mask_logits"], temperature, uniform, hard=hard)
    onehot = np.broadcast_to(np.eye(T), (S, T, T))
    heads = mlp_forward(cfg.emb_spec, params, "emb", ad.concat([m, onehot], axis=-1))
    q_e = GaussianParams(heads["mean"], heads["scale"])
    e = q_e.mean + q_e.scale * eps_e
    if cfg.variant == "no_causal":
        q_u = None
        u = ad.broadcast_to(ad.as_tensor(params["u.mean"]), (S, d))
    else:
        q_u = GaussianParams(ad.as_tensor(params["u.mean"]), ad.softplus(params["u.raw_scale"]))
        u = q_u.mean + q_u.scale * eps_u
    return GlobalSample(m, q_e, e, q_u, u)


def compose_latents(g, perturbations, artifact):
    """``z^p = P (e ⊙ m)`` and ``z^a = a u`` for every cell and particle."""
    P = np.asarray(perturbations, dtype=float)
    a = np.asarray(artifact, dtype=float)
    zp = ad.matmul(P, g.effects)                              # S x B x d
    za = ad.as_tensor(a[:, None]) * ad.reshape(g.u, (g.u.shape[0], 1, g.u.shape[1]))
    return zp, za


def basal_posterior(params, cfg, x_norm, zp, za):
    heads = mlp_forward(cfg.enc_spec, params, "enc", ad.concat([x_norm, zp, za], axis=-1))
    return GaussianParams(heads["mean"], heads["scale"])


def _check_labels(a):
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("artifact labels must be 0 or 1")
    return a.astype(float)


def encode(params, cfg, x_norm, perturbations, artifact, rng, n_particles=1,
           temperature=1.0, hard=False, globals_=None):
    """Sample every latent for a batch (global latents once, basal state per cell)."""
    a = _check_labels(artifact)
    g = globals_ or sample_globals(params, cfg, rng, n_particles, temperature, hard)
    S = g.u.shape[0]
    zp, za = compose_latents(g, perturbations, a)
    q_zb = basal_posterior(params, cfg, x_norm, zp, za)
    eps_b = rng.standard_normal((S, len(a), cfg.d_z))
    zb = q_zb.mean + q_zb.scale * eps_b
    return LatentSample(zb, zp, za, q_zb, g, a)


def encode_counterfactual(params, cfg, latent, x_norm, rows, ref_norm):
    """Counterfactual encodings for the batch rows listed in ``rows``.

    Each listed cell must be QC-passed; its counterfactual artifact latent
    is ``(1 - a) u = u``.  ``ref_norm`` holds the normalised median
    references aligned with ``rows``.  The ``z^p`` and ``u`` draws of the
    main pass are reused.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if latent.a is not None and np.any(latent.a[rows] != 0):
        raise ValueError("counterfactual branch is only defined for QC-passed cells")
    u = latent.globals.u
    S = u.shape[0]
    zp = latent.zp[:, rows]
    za_c = ad.broadcast_to(ad.reshape(u, (S, 1, u.shape[1])), zp.shape)
    q_c = basal_posterior(params, cfg, np.asarray(x_norm)[rows], zp, za_c)
    q_ref = basal_posterior(params, cfg, np.asarray(ref_norm), zp, za_c)
    return CfPair(rows, q_c, q_ref)


def decoder_logits(params, cfg, zb, zp, za):
    return mlp_forward(cfg.dec_spec, params, "dec", ad.concat([zb, zp, za], axis=-1))["logits"]


def decode(params, cfg, zb, zp, za, library_size, rng=None):
    """Negative-binomial means ``softmax(f_dec(z)) * l`` and, with ``rng``, a count sample."""
    lib = np.asarray(library_size, dtype=float)
    if np.any(lib <= 0):
        raise ValueError("library size must be positive")
    freq = ad.softmax(decoder_logits(params, cfg, zb, zp, za), axis=-1)
    mean = freq * lib[..., None]
    sample = None
    if rng is not None:
        sample = gamma_poisson_sample(mean.data, float(inverse_dispersion(params).data), rng)
    return mean, sample


class CounterfactualReferences:
    """Per-treatment medians of QC-failed cells, keyed by the exact assignment row."""

    def __init__(self, counts, perturbations, artifact):
        counts = np.asarray(counts)
        P = np.asarray(perturbations)
        a = _check_labels(artifact)
        self.medians = {}
        self.pool_sizes = {}
        failed = np.flatnonzero(a == 1)
        keys = [P[i].tobytes() for i in failed]
        for key in dict.fromkeys(keys):
            members = failed[[k == key for k in keys]]
            self.medians[key] = np.median(counts[members].astype(float), axis=0)
            self.pool_sizes[key] = len(members)
        self._dtype = P.dtype

    def lookup(self, pattern):
        key = np.asarray(pattern, dtype=self._dtype).tobytes()
        return self.medians.get(key)

    def eligible(self, perturbations, artifact):
        """Rows with ``a = 0`` and a non-empty failed pool, plus their reference rows."""
        P = np.asarray(perturbations, dtype=self._dtype)
        a = np.asarray(artifact)
        rows, refs = [], []
        for i in np.flatnonzero(a == 0):
            ref = self.medians.get(P[i].tobytes())
            if ref is not None:
                rows.append(i)
                refs.append(ref)
        d = next(iter(self.medians.values())).shape[0] if self.medians else 0
        return np.array(rows, dtype=np.int64), (np.array(refs) if refs else np.zeros((0, d)))


def cf_reference_lookup(counts, perturbations, artifact, pattern):
    return CounterfactualReferences(counts, perturbations, artifact).lookup(pattern)


def perturbation_effect(params, cfg, t, mode="expected"):
    """Deterministic latent effect of treatment ``t``: mask probability (or hard mask) times embedding mean."""
    if not 0 <= t < cfg.n_treatments:
        raise IndexError(f"treatment index {t} out of range")
    logits = np.asarray(params["mask_logits"], dtype=float)[t]
    prob = special.expit(logits)
    mask = prob if mode == "expected" else (prob > 0.5).astype(float)
    if mode not in ("expected", "hard"):
        raise ValueError("mode must be 'expected' or 'hard'")
    inp = np.concatenate([mask, np.eye(cfg.n_treatments)[t]])[None, :]
    e_mean = mlp_forward(cfg.emb_spec, params, "emb", ad.as_tensor(inp))["mean"].data[0]
    return mask * e_mean


def latent_means(params, cfg, x_norm, perturbations, artifact, mode="hard"):
    """Noise-free latents per cell: ``(z^b mean, z^p, z^a)``, each ``N x d``.

    Perturbation effects come from :func:`perturbation_effect` and the
    artifact latent uses the posterior mean of ``u``.
    """
    a = _check_labels(artifact)
    P = np.asarray(perturbations, dtype=float)
    effects = np.stack([perturbation_effect(params, cfg, t, mode) for t in range(cfg.n_treatments)])
    zp = P @ effects
    za = a[:, None] * np.asarray(params["u.mean"], dtype=float)[None, :]
    zb = basal_posterior(params, cfg, ad.as_tensor(np.asarray(x_norm, dtype=float)),
                         ad.as_tensor(zp), ad.as_tensor(za)).mean.data
    return zb, zp, za


def generate(params, cfg, perturbations, rng, artifact_flag=0, library_size=None):
    """Draw new cells for the given assignment rows.

    Basal states come from the standard normal prior; masks, embeddings
    and the artifact embedding are drawn once for the whole call.  With
    ``artifact_flag=0`` the artifact latent is zero for every cell.
    """
    P = np.atleast_2d(np.asarray(perturbations, dtype=float))
    if P.shape[1] != cfg.n_treatments:
        raise IndexError(f"assignment rows must have {cfg.n_treatments} columns")
    if artifact_flag not in (0, 1):
        raise ValueError("artifact_flag must be 0 or 1")
    if library_size is None:
        raise ValueError("library_size is required")
    G = P.shape[0]
    g = sample_globals(params, cfg, rng, 1, hard=True)
    zp, za = compose_latents(g, P, np.full(G, float(artifact_flag)))
    zb = rng.standard_normal((1, G, cfg.d_z))
    lib = np.broadcast_to(np.asarray(library_size, dtype=float), (G,))
    _, counts = decode(params, cfg, ad.as_tensor(zb), zp, za, lib, rng)
    return counts[0]
