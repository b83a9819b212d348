"""Stochastic variational inference for the causal VAE.

The objective maximised is ``J = J1 + alpha * J2`` where ``J1`` is the
evidence lower bound and ``J2`` is minus the KL divergence between the
counterfactual basal encoding of a QC-passed cell and the encoding of its
treatment's QC-failed median reference.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .model import (
    CounterfactualReferences,
    ModelConfig,
    Normalizer,
    decoder_logits,
    encode,
    encode_counterfactual,
    init_params,
    inverse_dispersion,
)
from .numerics import autodiff as ad
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.distributions import GaussianParams, bernoulli_kl_from_logits, gamma_poisson_log_prob, normal_kl
from .numerics.nn import AdamState, NonFiniteGradient, adam_step

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "j1", "j2", "recon", "kl_zb", "kl_e", "kl_m", "kl_u",
                   "n_cf_eligible", "val_j1", "temperature")


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    particles: int = 5
    epochs: int = 2000
    batch_size: int = 512
    lr: float = 3e-4
    clip_norm: float = 100.0
    seed: int = 0
    qc_n_mads: float = 3.0
    temperature_start: float = 1.0
    temperature_end: float = 0.5
    stop_gradient_reference: bool = False
    checkpoint_every: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError("particles must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    def temperature(self, epoch):
        if self.epochs <= 1:
            return self.temperature_start
        frac = epoch / (self.epochs - 1)
        return self.temperature_start + (self.temperature_end - self.temperature_start) * frac


@dataclass
class Batch:
    counts: np.ndarray
    x_norm: np.ndarray
    perturbations: np.ndarray
    artifact: np.ndarray
    library: np.ndarray
    cf_rows: np.ndarray
    cf_ref_norm: np.ndarray

    @property
    def size(self):
        return len(self.artifact)


class TrainingData:
    """Arrays prepared once: normalised inputs, library sizes, counterfactual references."""

    def __init__(self, counts, perturbations, artifact, normalizer, references=None, dtype=np.float64):
        self.counts = np.asarray(counts, dtype=dtype)
        self.perturbations = np.asarray(perturbations, dtype=dtype)
        self.artifact = np.asarray(artifact, dtype=dtype)
        self.library = self.counts.sum(axis=1)
        if np.any(self.library <= 0):
            raise ValueError("every training cell needs a positive library size")
        self.x_norm = normalizer.transform(self.counts).astype(dtype)
        self.normalizer = normalizer
        self.references = references
        self._dtype = dtype
        if references is not None:
            self._cf_rows, refs = references.eligible(np.asarray(perturbations), np.asarray(artifact))
            self._cf_ref_norm = normalizer.transform(refs).astype(dtype) if len(refs) else refs
        else:
            self._cf_rows = np.zeros(0, dtype=np.int64)
            self._cf_ref_norm = np.zeros((0, self.counts.shape[1]))
        self._cf_lookup = {int(r): k for k, r in enumerate(self._cf_rows)}

    @property
    def n_cells(self):
        return len(self.artifact)

    @property
    def median_library(self):
        return float(np.median(self.library))

    @property
    def n_cf_eligible(self):
        return len(self._cf_rows)

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        pos = [(j, self._cf_lookup[int(i)]) for j, i in enumerate(idx) if int(i) in self._cf_lookup]
        rows = np.array([p[0] for p in pos], dtype=np.int64)
        refs = self._cf_ref_norm[[p[1] for p in pos]] if pos else np.zeros((0, self.counts.shape[1]), self._dtype)
        return Batch(self.counts[idx], self.x_norm[idx], self.perturbations[idx], self.artifact[idx],
                     self.library[idx], rows, refs)


@dataclass
class ElboTerms:
    value: object          # scalar tensor, J1
    per_particle: np.ndarray
    recon: float
    kl_zb: float
    kl_e: float
    kl_m: float
    kl_u: float


def _standard_normal_like(g):
    return GaussianParams(0.0, 1.0)


def elbo(params, cfg, batch, rng, n_particles=5, beta=0.5, n_total=None, temperature=1.0,
         hard=False, latent=None):
    """Monte Carlo estimate of the evidence lower bound, averaged per cell.

    Per-cell terms are averaged over the batch; the global KL terms (masks,
    embeddings, artifact) are divided by ``n_total`` so that summing batch
    estimates over an epoch matches the full-data bound in expectation.
    """
    n_total = batch.size if n_total is None else n_total
    if latent is None:
        latent = encode(params, cfg, batch.x_norm, batch.perturbations, batch.artifact, rng,
                        n_particles, temperature, hard)
    g = latent.globals
    logits = decoder_logits(params, cfg, latent.zb, latent.zp, latent.za)
    log_freq = ad.log_softmax(logits, axis=-1)
    log_lib = np.log(batch.library)[:, None]
    mean = ad.exp(log_freq) * batch.library[:, None]
    recon = gamma_poisson_log_prob(batch.counts, mean, inverse_dispersion(params), axis=-1,
                                   log_mean=log_freq + log_lib)                 # S x B
    kl_zb = normal_kl(latent.q_zb, _standard_normal_like(latent.q_zb), axis=-1)  # S x B
    kl_e = normal_kl(g.q_e, GaussianParams(0.0, cfg.embedding_prior_scale), axis=(-2, -1))  # S
    kl_m = bernoulli_kl_from_logits(params["mask_logits"], cfg.mask_prior_prob)  # scalar
    kl_u = normal_kl(g.q_u, GaussianParams(0.0, 1.0)) if g.q_u is not None else ad.Tensor(0.0)
    per_cell = (recon - beta * kl_zb).mean(axis=-1)                             # S
    glob = (kl_e + kl_m + kl_u) * (beta / n_total)                              # S
    per_particle = per_cell - glob
    value = per_particle.mean()
    if not np.isfinite(value.data):
        raise NumericalError(
            "non-finite ELBO: recon={:.4g} kl_zb={:.4g} kl_e={:.4g} kl_m={:.4g} kl_u={:.4g}".format(
                float(recon.data.mean()), float(kl_zb.data.mean()), float(kl_e.data.mean()),
                float(kl_m.data), float(kl_u.data)))
    return ElboTerms(value, per_particle.data.copy(), float(recon.data.mean()), float(kl_zb.data.mean()),
                     float(kl_e.data.mean()), float(kl_m.data), float(kl_u.data))


def cf_alignment_loss(params, cfg, batch, latent, stop_gradient_reference=False):
    """``J2``: minus the mean KL between counterfactual and reference basal encodings.

    Zero when no cell in the batch is eligible.
    """
    if len(batch.cf_rows) == 0:
        return ad.Tensor(0.0)
    pair = encode_counterfactual(params, cfg, latent, batch.x_norm, batch.cf_rows, batch.cf_ref_norm)
    ref = pair.q_ref
    if stop_gradient_reference:
        ref = GaussianParams(ref.mean.detach(), ref.scale.detach())
    kl = normal_kl(pair.q_c, ref, axis=-1)    # S x E
    return -kl.mean()


@dataclass
class Objective:
    loss: object    # tensor to minimise, -(J1 + alpha J2)
    j1: object
    j2: object
    terms: ElboTerms


def total_loss(params, cfg, tcfg, batch, rng, n_total=None, temperature=None, alpha=None):
    alpha = tcfg.alpha if alpha is None else alpha
    if cfg.variant == "no_cf":
        alpha = 0.0
    temperature = tcfg.temperature_start if temperature is None else temperature
    latent = encode(params, cfg, batch.x_norm, batch.perturbations, batch.artifact, rng,
                    tcfg.particles, temperature)
    terms = elbo(params, cfg, batch, rng, tcfg.particles, tcfg.beta, n_total, latent=latent)
    if cfg.variant == "no_cf":
        j2 = ad.Tensor(0.0)
    else:
        j2 = cf_alignment_loss(params, cfg, batch, latent, tcfg.stop_gradient_reference)
    loss = -(terms.value + alpha * j2)
    return Objective(loss, terms.value, j2, terms)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in HISTORY_COLUMNS])


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    epoch: int
    history: TrainHistory


def _cast(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def validation_elbo(params, cfg, tcfg, data, n_total, seed):
    rng = np.random.default_rng([seed, 0x5EED, 1])
    batch = data.batch(np.arange(data.n_cells))
    return float(elbo(params, cfg, batch, rng, tcfg.particles, tcfg.beta, n_total,
                      temperature=tcfg.temperature_end, hard=True).value.data)


def train_epoch(state, cfg, tcfg, data, n_total=None):
    """One seeded pass over ``data``; mutates ``state``."""
    e = state.epoch
    rng = np.random.default_rng([tcfg.seed, 1, e])
    temperature = tcfg.temperature(e)
    n_total = data.n_cells if n_total is None else n_total
    order = rng.permutation(data.n_cells)
    sums = dict.fromkeys(("j1", "j2", "recon", "kl_zb", "kl_e", "kl_m", "kl_u"), 0.0)
    for start in range(0, data.n_cells, tcfg.batch_size):
        batch = data.batch(order[start:start + tcfg.batch_size])
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in state.params.items()}
        try:
            obj = total_loss(tensors, cfg, tcfg, batch, rng, n_total, temperature)
        except ValueError as exc:
            # inputs were validated before the loop, so a domain error here means the
            # parameters have degenerated (e.g. a scale underflowed to zero)
            raise NumericalError(f"epoch {e}: degenerate forward pass: {exc}") from exc
        if not np.isfinite(obj.loss.data):
            raise NumericalError(f"non-finite loss at epoch {e}")
        grads = ad.grad(obj.loss, tensors)
        try:
            state.params, state.adam = adam_step(state.params, grads, state.adam)
        except NonFiniteGradient as exc:
            raise NumericalError(f"epoch {e}: {exc}") from exc
        w = batch.size / data.n_cells
        t = obj.terms
        for key, val in (("j1", float(obj.j1.data)), ("j2", float(obj.j2.data)), ("recon", t.recon),
                         ("kl_zb", t.kl_zb), ("kl_e", t.kl_e), ("kl_m", t.kl_m), ("kl_u", t.kl_u)):
            sums[key] += w * val
    record = {"epoch": e + 1, **sums, "n_cf_eligible": data.n_cf_eligible, "val_j1": float("nan"),
              "temperature": float(temperature)}
    state.epoch += 1
    return record


def checkpoint_manifest(cfg, tcfg, state, library_size=None):
    return {
        "version": __version__,
        "d_z": cfg.d_z,
        "n_treatments": cfg.n_treatments,
        "n_genes": cfg.n_genes,
        "variant": cfg.variant,
        "seed": tcfg.seed,
        "model_config": cfg.to_dict(),
        "train_config": asdict(tcfg),
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "history": state.history.records,
        "library_size": library_size,
    }


def save_state(path, cfg, tcfg, normalizer, state, library_size=None):
    tensors = dict(state.params)
    tensors["norm.mean"] = normalizer.mean
    tensors["norm.std"] = normalizer.std
    for k in state.params:
        if k in state.adam.m:
            tensors[f"adam.m.{k}"] = state.adam.m[k]
            tensors[f"adam.v.{k}"] = state.adam.v[k]
    save_checkpoint(tensors, checkpoint_manifest(cfg, tcfg, state, library_size), path)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    normalizer: Normalizer
    state: TrainState
    manifest: dict


def load_state(path, expect=None):
    tensors, manifest = load_checkpoint(path, expect)
    mc = manifest["model_config"]
    cfg = ModelConfig(**mc)
    tcfg = TrainConfig(**manifest["train_config"])
    normalizer = Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    params = {k: val for k, val in tensors.items() if not k.startswith("adam.")}
    adam = AdamState(lr=tcfg.lr, clip_norm=tcfg.clip_norm, step=manifest["adam_step"], m=m, v=v)
    history = TrainHistory(list(manifest.get("history", [])))
    return Checkpoint(cfg, tcfg, normalizer, TrainState(params, adam, manifest["epoch"], history), manifest)


def train(data, cfg, tcfg, val_data=None, checkpoint_path=None, state=None, callback=None):
    """Run the training loop to ``tcfg.epochs`` epochs.

    ``data`` is a :class:`TrainingData` for the training split.  Passing a
    ``state`` (e.g. ``load_state(path).state``) resumes; since every epoch's
    random stream depends only on ``(seed, epoch)`` a resumed run matches an
    uninterrupted one exactly.
    """
    dtype = np.float32 if tcfg.precision == "f32" else np.float64
    if state is None:
        params = _cast(init_params(cfg, np.random.default_rng([tcfg.seed, 0])), dtype)
        adam = AdamState(lr=tcfg.lr, clip_norm=tcfg.clip_norm)
        state = TrainState(params, adam, 0, TrainHistory())
    else:
        state.params = _cast(state.params, dtype)
    while state.epoch < tcfg.epochs:
        tic = time.perf_counter()
        try:
            record = train_epoch(state, cfg, tcfg, data)
        except NumericalError:
            log.error("aborting at epoch %d; last checkpoint retained", state.epoch)
            raise
        if val_data is not None and val_data.n_cells:
            record["val_j1"] = validation_elbo(state.params, cfg, tcfg, val_data, data.n_cells, tcfg.seed)
        state.history.records.append(record)
        state.history.wall_clock.append(time.perf_counter() - tic)
        if callback is not None:
            callback(state, record)
        every = tcfg.checkpoint_every
        if checkpoint_path is not None and every and state.epoch % every == 0:
            save_state(checkpoint_path, cfg, tcfg, data.normalizer, state, data.median_library)
    if checkpoint_path is not None:
        save_state(checkpoint_path, cfg, tcfg, data.normalizer, state, data.median_library)
    return state


def prepare_training_data(counts, perturbations, artifact, normalizer=None, use_references=True, dtype=np.float64):
    normalizer = normalizer or Normalizer.fit(counts)
    refs = CounterfactualReferences(counts, perturbations, artifact) if use_references else None
    return TrainingData(counts, perturbations, artifact, normalizer, refs, dtype)


def epochs_improved(history):
    j1 = history.column("j1")
    return len(j1) >= 2 and math.isfinite(j1[-1]) and j1[-1] > j1[0]
