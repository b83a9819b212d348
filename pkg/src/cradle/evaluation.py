"""Treatment-effect metrics and the evaluation driver.

Expression is compared on the ``log1p`` of counts scaled to a fixed library
of ``1e4``.  ``evaluate`` works with any generator callable, so the same
driver scores a trained model or, as an oracle, the synthetic generator.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import CONTROL_NAME
from .qc import QcConfig, qc_evaluate, qc_pass_rate

log = logging.getLogger(__name__)

ATE_SCALE = 1e4


class EvalError(ValueError):
    pass


@dataclass
class AteVector:
    effects: np.ndarray
    treatment: str = ""
    n_treated: int = 0
    n_control: int = 0

    def __post_init__(self):
        self.effects = np.asarray(self.effects, dtype=float)
        if not np.all(np.isfinite(self.effects)):
            raise EvalError(f"non-finite treatment effect for {self.treatment!r}")


def log_normalized(counts, scale=ATE_SCALE):
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    lib = counts.sum(axis=1, keepdims=True)
    if np.any(lib <= 0):
        raise EvalError("cells with zero library size cannot be normalised")
    return np.log1p(scale * counts / lib)


def average_treatment_effect(treated, control, treatment="", scale=ATE_SCALE):
    """Per-gene mean of normalised ``log1p`` expression, treated minus control."""
    treated = np.atleast_2d(np.asarray(treated))
    control = np.atleast_2d(np.asarray(control))
    if treated.size == 0 or control.size == 0:
        raise EvalError("both groups need at least one cell")
    if treated.shape[1] != control.shape[1]:
        raise EvalError(f"gene count mismatch: {treated.shape[1]} vs {control.shape[1]}")
    eff = log_normalized(treated, scale).mean(axis=0) - log_normalized(control, scale).mean(axis=0)
    return AteVector(eff, treatment, len(treated), len(control))


def _effects(v):
    return v.effects if isinstance(v, AteVector) else np.asarray(v, dtype=float)


def _pair(pred, truth):
    p, t = _effects(pred), _effects(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise EvalError(f"effect vectors must be 1-d and aligned, got {p.shape} and {t.shape}")
    if len(p) < 2:
        raise EvalError("need at least two genes")
    return p, t


def ate_pearson(pred, truth):
    p, t = _pair(pred, truth)
    pc, tc = p - p.mean(), t - t.mean()
    denom = np.sqrt((pc ** 2).sum() * (tc ** 2).sum())
    if denom == 0:
        raise EvalError("Pearson correlation undefined for a constant effect vector")
    return float(np.clip((pc * tc).sum() / denom, -1.0, 1.0))


def ate_r2(pred, truth):
    """Coefficient of determination of ``pred`` as a predictor of ``truth`` (may be negative)."""
    p, t = _pair(pred, truth)
    ss_tot = ((t - t.mean()) ** 2).sum()
    if ss_tot == 0:
        raise EvalError("R^2 undefined for a constant true effect")
    return float(1.0 - ((t - p) ** 2).sum() / ss_tot)


def top_k_genes(effects, k):
    eff = np.abs(_effects(effects))
    # stable sort on the negated magnitude keeps the lower gene index first on ties
    return np.argsort(-eff, kind="stable")[:k]


def jaccard_top_k(pred, truth, k=50):
    p, t = _effects(pred), _effects(truth)
    if not 1 <= k <= min(len(p), len(t)):
        raise EvalError(f"k={k} must lie in [1, {min(len(p), len(t))}]")
    a, b = set(top_k_genes(p, k).tolist()), set(top_k_genes(t, k).tolist())
    return len(a & b) / len(a | b)


@dataclass
class TreatmentResult:
    treatment: str
    ate_rho: float
    ate_r2: float
    jaccard: float
    true_norm: float
    n_generated: int
    n_treated: int
    n_control: int
    top: bool = False


@dataclass
class EvalReport:
    results: list
    skipped: list
    qcpr: dict
    jaccard_k: int
    top_n: int
    truth_source: str
    n_generated: int
    seed: int
    generated: np.ndarray = field(default=None, repr=False)
    generated_labels: list = field(default=None, repr=False)

    def _mean(self, attr, rows):
        vals = [getattr(r, attr) for r in rows]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def means(self):
        return {m: self._mean(m, self.results) for m in ("ate_rho", "ate_r2", "jaccard")}

    @property
    def top_means(self):
        top = [r for r in self.results if r.top]
        return {m: self._mean(m, top) for m in ("ate_rho", "ate_r2", "jaccard")}

    def to_json(self):
        return {
            "conventions": {
                "expression": f"log1p(counts / library_size * {ATE_SCALE:g})",
                "ate": "mean over treated cells minus mean over control cells, per gene",
                "jaccard": f"top-{self.jaccard_k} genes by |effect|, ties to the lower gene index",
                "top_subset": f"top {self.top_n} treatments by L2 norm of the true effect",
                "truth_source": self.truth_source,
                "generated_artifact_flag": 0,
            },
            "seed": self.seed,
            "n_generated_per_treatment": self.n_generated,
            "mean": self.means,
            "top": self.top_means,
            "qcpr": {str(k): v for k, v in self.qcpr.items()},
            "treatments": [r.__dict__ for r in self.results],
            "skipped": [{"treatment": t, "reason": why} for t, why in self.skipped],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, allow_nan=True)
            fh.write("\n")

    def write_summary_csv(self, path):
        cols = ("treatment", "status", "ate_rho", "ate_r2", "jaccard", "true_norm", "top",
                "n_generated", "n_treated", "n_control", "reason")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.results:
                w.writerow([r.treatment, "ok", repr(r.ate_rho), repr(r.ate_r2), repr(r.jaccard),
                            repr(r.true_norm), int(r.top), r.n_generated, r.n_treated, r.n_control, ""])
            for t, why in self.skipped:
                w.writerow([t, "skipped", "", "", "", "", "", "", "", "", why])


def _rows_for(dataset, idx, label):
    labels = dataset.perturbations.labels()
    return np.array([i for i in idx if labels[i] == label], dtype=np.int64)


def evaluate(generator, dataset, split, n_generated=512, n_mads=(3, 4, 5), jaccard_k=50, top_n=20,
             truth_ate=None, treatments=None, seed=0, qc_config=None):
    """Score generated cells against held-out test cells.

    ``generator(P, rng, artifact_flag)`` returns one count row per assignment
    row of ``P``.  Each test treatment gets ``n_generated`` cells, compared
    with the same number of generated control cells.  The reference effect is
    the real treated-minus-control effect on the test split unless
    ``truth_ate`` (label -> per-gene vector) supplies it.

    QC pass rate is over all generated cells, with thresholds fitted on the
    training split at each ``n_mads``.
    """
    perts = dataset.perturbations
    test = np.asarray(split.test_indices, dtype=np.int64)
    if len(test) == 0:
        raise EvalError("test split is empty")
    labels = perts.labels()
    test_labels = sorted({labels[i] for i in test} - {CONTROL_NAME})
    wanted = test_labels if treatments is None else list(treatments)
    if truth_ate is not None and treatments is None:
        wanted = [t for t in test_labels if t in truth_ate]
    rng = np.random.default_rng([seed, 0xE7A1])

    skipped, results, gen_blocks, gen_labels = [], [], [], []
    control_rows = _rows_for(dataset, test, CONTROL_NAME)
    if truth_ate is None and len(control_rows) == 0:
        control_rows = _rows_for(dataset, np.arange(dataset.n_cells), CONTROL_NAME)

    def draw(label):
        p = perts.encode(label)
        return np.asarray(generator(np.repeat(p[None, :], n_generated, axis=0), rng, 0))

    gen_control = draw(CONTROL_NAME)
    gen_blocks.append(gen_control)
    gen_labels += [CONTROL_NAME] * len(gen_control)
    counts = dataset.expression.counts
    for label in wanted:
        if label not in test_labels:
            log.warning("treatment %s absent from the test split; skipped", label)
            skipped.append((label, "absent from test split"))
            continue
        gen = draw(label)
        gen_blocks.append(gen)
        gen_labels += [label] * len(gen)
        try:
            pred = average_treatment_effect(gen, gen_control, label)
            if truth_ate is not None:
                true = AteVector(truth_ate[label], label, 0, 0)
            else:
                rows = _rows_for(dataset, test, label)
                true = average_treatment_effect(counts[rows], counts[control_rows], label)
            results.append(TreatmentResult(
                label, ate_pearson(pred, true), ate_r2(pred, true), jaccard_top_k(pred, true, jaccard_k),
                float(np.linalg.norm(true.effects)), len(gen), true.n_treated, true.n_control))
        except EvalError as exc:
            log.warning("treatment %s skipped: %s", label, exc)
            skipped.append((label, str(exc)))
    for r in sorted(results, key=lambda r: -r.true_norm)[:top_n]:
        r.top = True

    generated = np.vstack(gen_blocks)
    train = dataset.subset(split.train_indices)
    base = qc_config or QcConfig()
    qcpr = {}
    for k in n_mads:
        cfg = QcConfig(k, base.mad_scale, dict(base.sides), base.threshold_pool)
        fitted = qc_evaluate(train.expression, train.doublets, cfg).thresholds
        rep = qc_evaluate(dataset.expression.with_counts(generated), None, cfg, thresholds=fitted,
                          allow_empty=True)
        qcpr[k] = qc_pass_rate(rep.artifact_labels)
    return EvalReport(results, skipped, qcpr, jaccard_k, top_n,
                      "supplied" if truth_ate is not None else "test split", n_generated, seed,
                      generated, gen_labels)
