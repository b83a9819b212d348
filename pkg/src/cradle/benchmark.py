"""The frozen desk-scale benchmark: synthetic data, split, QC and model settings.

Everything that acceptance runs depend on is pinned here by name so that
tests, the command line and ad-hoc scripts train the same thing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import split_random
from .estimator import CradleVAE
from .evaluation import evaluate
from .qc import QualityControl
from .synth import benchmark_config, synth_generate, true_ate

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
QC_N_MADS = 3.0
EPOCHS = 300
JACCARD_K = 10
N_GENERATED = 2000

# Small networks and a larger step size than the full-scale defaults: 300
# epochs of 1600 cells is a few thousand updates, not hundreds of thousands.
# The mask prior matches the generator's mask density (half the latent
# dimensions per treatment); a 0.01 prior starves 8-d masks of gradient.
MODEL = dict(
    d_z=8,
    emb_hidden=(64,),
    enc_hidden=(64, 64),
    dec_hidden=(64,),
    mask_prior_prob=0.5,
    embedding_prior_scale=1.0,
)
TRAIN = dict(
    alpha=1.0,
    beta=0.5,
    particles=5,
    epochs=EPOCHS,
    batch_size=128,
    lr=3e-3,
    clip_norm=100.0,
)


def benchmark_estimator(seed=0, variant="full", **overrides):
    params = {**MODEL, **TRAIN, "variant": variant, "random_state": seed, **overrides}
    return CradleVAE(**params)


@dataclass
class BenchmarkData:
    dataset: object
    truth: object
    split: object
    qc: QualityControl
    train_labels: np.ndarray
    ate: dict


def benchmark_data(seed=0):
    """Synthetic dataset, random split and training-split QC for one seed."""
    scfg = benchmark_config(seed)
    dataset, truth = synth_generate(scfg)
    split = split_random(dataset.n_cells, SPLIT_FRACTIONS, seed)
    train = dataset.subset(split.train_indices)
    qc = QualityControl(QC_N_MADS).fit(train.expression, doublets=train.doublets)
    labels = qc.predict(train.expression, train.doublets)
    return BenchmarkData(dataset, truth, split, qc, labels, true_ate(scfg, truth))


@dataclass
class BenchmarkRun:
    data: BenchmarkData
    model: CradleVAE
    seconds: float

    def qc_pass_rate(self, artifact_flag, n=N_GENERATED, seed=0):
        """QC pass rate of ``n`` generated control cells under the training thresholds."""
        ds = self.data.dataset
        p = ds.perturbations.encode("non-targeting")
        rng = np.random.default_rng([self.model.random_state, 0xA7, seed])
        counts = self.model.generate(np.repeat(p[None, :], n, axis=0), artifact_flag, rng=rng)
        return self.data.qc.score(ds.expression.with_counts(counts))

    def evaluate(self, n_generated=N_GENERATED, **kwargs):
        kwargs.setdefault("jaccard_k", JACCARD_K)
        kwargs.setdefault("n_mads", (3, 4, 5))
        return evaluate(self.model.generator(), self.data.dataset, self.data.split, n_generated,
                        truth_ate=self.data.ate, seed=self.model.random_state, **kwargs)


def run_benchmark(seed=0, variant="full", data=None, **overrides):
    data = data or benchmark_data(seed)
    train = data.dataset.subset(data.split.train_indices)
    model = benchmark_estimator(seed, variant, **overrides)
    tic = time.perf_counter()
    model.fit(train.expression.counts, train.perturbations.assignments, data.train_labels)
    return BenchmarkRun(data, model, time.perf_counter() - tic)
