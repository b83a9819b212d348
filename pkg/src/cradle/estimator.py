"""scikit-learn style front end to the causal VAE."""
from __future__ import annotations

import csv
from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .model import (
    ModelConfig,
    compose_latents,
    decode,
    generate,
    latent_means,
    sample_globals,
)
from .numerics import autodiff as ad
from .train import (
    TrainConfig,
    TrainingData,
    load_state,
    prepare_training_data,
    save_state,
    train,
    validation_elbo,
)


def check_counts(X, n_genes=None):
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if np.any(X < 0) or np.any(X != np.floor(X)):
        raise ValueError("counts must be non-negative integers")
    if n_genes is not None and X.shape[1] != n_genes:
        raise ValueError(f"expected {n_genes} genes, got {X.shape[1]}")
    return X


def check_assignments(P, n_rows=None, n_treatments=None):
    P = check_array(P, dtype=np.float64, ensure_min_samples=1)
    if not np.all((P == 0) | (P == 1)):
        raise ValueError("assignment rows must be binary")
    if n_rows is not None and len(P) != n_rows:
        raise ValueError(f"expected {n_rows} assignment rows, got {len(P)}")
    if n_treatments is not None and P.shape[1] != n_treatments:
        raise IndexError(f"assignment rows must have {n_treatments} columns, got {P.shape[1]}")
    return P


def check_artifact(a, n_rows):
    a = np.asarray(a).ravel()
    if len(a) != n_rows:
        raise ValueError(f"expected {n_rows} artifact labels, got {len(a)}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("artifact labels must be 0 or 1")
    return a.astype(np.int8)


class CradleVAE(BaseEstimator):
    """Causal VAE with perturbation, artifact and basal latents.

    ``fit`` takes counts, a multi-hot treatment matrix and per-cell artifact
    labels (usually QC failures).  ``transform`` returns noise-free latents,
    ``generate`` samples new cells and ``predict`` returns their expected
    counts.  Defaults are the large-data settings; see
    :mod:`cradle.benchmark` for the small synthetic configuration.
    """

    def __init__(self, d_z=200, emb_hidden=(400, 400, 400), enc_hidden=(400, 400, 400), dec_hidden=(400,),
                 activation="relu", mask_prior_prob=0.01, embedding_prior_scale=1.0, variant="full",
                 alpha=1.0, beta=0.5, particles=5, epochs=2000, batch_size=512, lr=3e-4, clip_norm=100.0,
                 temperature_start=1.0, temperature_end=0.5, stop_gradient_reference=False,
                 precision="f64", checkpoint_every=0, random_state=0):
        self.d_z = d_z
        self.emb_hidden = emb_hidden
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.activation = activation
        self.mask_prior_prob = mask_prior_prob
        self.embedding_prior_scale = embedding_prior_scale
        self.variant = variant
        self.alpha = alpha
        self.beta = beta
        self.particles = particles
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.temperature_start = temperature_start
        self.temperature_end = temperature_end
        self.stop_gradient_reference = stop_gradient_reference
        self.precision = precision
        self.checkpoint_every = checkpoint_every
        self.random_state = random_state

    def _configs(self, n_genes, n_treatments):
        cfg = ModelConfig(n_genes, n_treatments, self.d_z, tuple(self.emb_hidden), tuple(self.enc_hidden),
                          tuple(self.dec_hidden), self.activation, self.mask_prior_prob,
                          self.embedding_prior_scale, self.variant)
        tcfg = TrainConfig(self.alpha, self.beta, self.particles, self.epochs, self.batch_size, self.lr,
                           self.clip_norm, int(self.random_state), temperature_start=self.temperature_start,
                           temperature_end=self.temperature_end,
                           stop_gradient_reference=self.stop_gradient_reference,
                           checkpoint_every=self.checkpoint_every, precision=self.precision)
        return cfg, tcfg

    @property
    def _dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def fit(self, X, perturbations, artifact, validation=None, checkpoint_path=None, resume=None,
            callback=None):
        """Train on ``(X, perturbations, artifact)``.

        ``validation`` is an optional ``(X, P, a)`` triple scored each epoch.
        ``resume`` is a checkpoint path whose state is continued; because
        each epoch's random stream depends only on ``(seed, epoch)`` the
        result matches an uninterrupted run.
        """
        X = check_counts(X)
        P = check_assignments(perturbations, len(X))
        a = check_artifact(artifact, len(X))
        cfg, tcfg = self._configs(X.shape[1], P.shape[1])
        data = prepare_training_data(X, P, a, dtype=self._dtype)
        val = None
        if validation is not None:
            Xv, Pv, av = validation
            Xv = check_counts(Xv, X.shape[1])
            Pv = check_assignments(Pv, len(Xv), P.shape[1])
            val = TrainingData(Xv, Pv, check_artifact(av, len(Xv)), data.normalizer, None, self._dtype)
        state = None
        if resume is not None:
            ck = load_state(resume, expect={"d_z": cfg.d_z, "n_genes": cfg.n_genes,
                                            "n_treatments": cfg.n_treatments, "variant": cfg.variant})
            state = ck.state
        state = train(data, cfg, tcfg, val, checkpoint_path, state, callback)
        self._set_fitted(cfg, tcfg, data.normalizer, state, data.median_library)
        return self

    def _set_fitted(self, cfg, tcfg, normalizer, state, library_size):
        self.model_config_ = cfg
        self.train_config_ = tcfg
        self.normalizer_ = normalizer
        self.state_ = state
        self.params_ = state.params
        self.history_ = state.history
        self.library_size_ = library_size
        self.n_features_in_ = cfg.n_genes
        self.n_treatments_ = cfg.n_treatments

    def _rng(self, random_state, stream):
        seed = self.random_state if random_state is None else random_state
        return np.random.default_rng([int(seed), stream])

    def transform(self, X, perturbations, artifact):
        """``N x 3d`` noise-free latents ``[z^b mean | z^p | z^a]``."""
        zb, zp, za = self.latents(X, perturbations, artifact)
        return np.hstack([zb, zp, za])

    def latents(self, X, perturbations, artifact):
        check_is_fitted(self, "params_")
        X = check_counts(X, self.n_features_in_)
        P = check_assignments(perturbations, len(X), self.n_treatments_)
        a = check_artifact(artifact, len(X))
        return latent_means(self.params_, self.model_config_, self.normalizer_.transform(X), P, a)

    def generate(self, perturbations, artifact_flag=0, library_size=None, random_state=None, rng=None):
        """One sampled cell per assignment row; ``artifact_flag`` 0 gives artifact-free cells."""
        check_is_fitted(self, "params_")
        P = check_assignments(perturbations, n_treatments=self.n_treatments_)
        rng = rng if rng is not None else self._rng(random_state, 0x6E)
        lib = self.library_size_ if library_size is None else library_size
        return generate(self.params_, self.model_config_, P, rng, artifact_flag, lib)

    def generator(self, library_size=None):
        """Adapter with the ``(P, rng, artifact_flag)`` signature used by :func:`cradle.evaluation.evaluate`."""
        return lambda P, rng, flag: self.generate(P, flag, library_size, rng=rng)

    def predict(self, perturbations, artifact_flag=0, n_samples=64, library_size=None, random_state=None):
        """Expected counts per assignment row, averaged over ``n_samples`` prior draws."""
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        P = check_assignments(perturbations, n_treatments=self.n_treatments_)
        if artifact_flag not in (0, 1):
            raise ValueError("artifact_flag must be 0 or 1")
        rng = self._rng(random_state, 0x9D)
        g = sample_globals(self.params_, cfg, rng, n_samples, hard=True)
        zp, za = compose_latents(g, P, np.full(len(P), float(artifact_flag)))
        zb = ad.as_tensor(rng.standard_normal((n_samples, len(P), cfg.d_z)))
        lib = np.full(len(P), self.library_size_ if library_size is None else library_size, dtype=float)
        mean, _ = decode(self.params_, cfg, zb, zp, za, lib)
        return mean.data.mean(axis=0)

    def score(self, X, perturbations, artifact, random_state=None):
        """Per-cell evidence lower bound with hard masks (higher is better)."""
        check_is_fitted(self, "params_")
        X = check_counts(X, self.n_features_in_)
        P = check_assignments(perturbations, len(X), self.n_treatments_)
        data = TrainingData(X, P, check_artifact(artifact, len(X)), self.normalizer_, None, self._dtype)
        seed = self.random_state if random_state is None else random_state
        return validation_elbo(self.params_, self.model_config_, self.train_config_, data, len(X), seed)

    def save(self, path):
        check_is_fitted(self, "params_")
        save_state(path, self.model_config_, self.train_config_, self.normalizer_, self.state_,
                   self.library_size_)

    @classmethod
    def load(cls, path, expect=None):
        ck = load_state(path, expect)
        cfg, tcfg = ck.model_config, ck.train_config
        est = cls(d_z=cfg.d_z, emb_hidden=cfg.emb_hidden, enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden,
                  activation=cfg.activation, mask_prior_prob=cfg.mask_prior_prob,
                  embedding_prior_scale=cfg.embedding_prior_scale, variant=cfg.variant,
                  **{k: v for k, v in asdict(tcfg).items() if k not in ("seed", "qc_n_mads")},
                  random_state=tcfg.seed)
        lib = ck.manifest.get("library_size")
        est._set_fitted(cfg, tcfg, ck.normalizer, ck.state, lib if lib is not None else float("nan"))
        return est

    def export_latents(self, path, X, perturbations, artifact, cell_ids=None, labels=None):
        """Write ``latents.csv``: cell id, artifact label, treatment label, then the three latent blocks."""
        zb, zp, za = self.latents(X, perturbations, artifact)
        a = check_artifact(artifact, len(zb))
        n, d = zb.shape
        ids = cell_ids if cell_ids is not None else [f"cell{i}" for i in range(n)]
        labels = labels if labels is not None else [""] * n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_id", "a", "treatment", *[f"z_b{j}" for j in range(d)],
                        *[f"z_p{j}" for j in range(d)], *[f"z_a{j}" for j in range(d)]])
            for i in range(n):
                w.writerow([ids[i], int(a[i]), labels[i], *map(repr, zb[i].tolist()),
                            *map(repr, zp[i].tolist()), *map(repr, za[i].tolist())])
