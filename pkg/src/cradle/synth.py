"""Synthetic Perturb-seq data with known perturbation effects and injected artifacts.

Cells follow the same family the model assumes: a Gaussian basal state,
an additive sparse perturbation shift, a fixed linear map to gene logits,
a softmax, and Gamma-Poisson counts.  QC-flagged genes (mitochondrial,
hemoglobin, ribosomal) take a share of reads set by their own logits
against a unit mass for all ordinary genes, so perturbations move
expression among ordinary genes without moving the QC statistics.
Artifact cells get their hemoglobin share boosted and library shrunk;
doublets are the sum of two cells.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .data import CONTROL_NAME, Dataset, ExpressionMatrix, PerturbationSet, combination_key
from .qc import QcConfig, qc_evaluate

ATE_SCALE = 1e4


@dataclass
class SynthConfig:
    n_cells: int = 2000
    n_genes: int = 50
    n_treatments: int = 6
    d_z: int = 8
    mask_density: float = 0.5
    effect_scale: float = 1.5
    loading_scale: float = 0.4
    flagged_loading_factor: float = 0.1
    baseline_sd: float = 1.0
    artifact_prevalence: float = 0.3
    hb_boost: float = 20.0
    library_factor: float = 0.2
    doublet_rate: float = 0.05
    library_log_mean: float = 8.0
    library_log_sd: float = 0.3
    control_fraction: float = 0.2
    combinations: list = field(default_factory=lambda: [[0, 1], [1, 2], [2, 3], [3, 4]])
    theta: float = 2.0
    n_mito: int = 4
    n_hb: int = 2
    n_ribo: int = 6
    mito_baseline: float = -4.0
    hb_baseline: float = -4.0
    ribo_baseline: float = -3.0
    n_truth_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        for name in ("artifact_prevalence", "doublet_rate", "control_fraction", "mask_density"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_genes < 10:
            raise ValueError("n_genes must be at least 10")
        if min(self.n_mito, self.n_hb, self.n_ribo) < 1:
            raise ValueError("need at least one gene per flag class")
        if self.n_mito + self.n_hb + self.n_ribo >= self.n_genes:
            raise ValueError("flagged genes must leave room for ordinary genes")
        if self.n_treatments < 2:
            raise ValueError("need a control and at least one treatment")
        n_real = self.n_treatments - 1
        for combo in self.combinations:
            if len(set(combo)) < 2 or any(not 0 <= t < n_real for t in combo):
                raise ValueError(f"bad combination {combo}: indices must be distinct treatments in [0, {n_real})")
        expected_ctrl = self.control_fraction * self.n_cells
        if self.control_fraction > 0 and expected_ctrl < 1:
            raise ValueError("control_fraction too small for n_cells: no control cells expected")

    def treatment_names(self):
        return [f"PERT{t + 1}" for t in range(self.n_treatments - 1)] + [CONTROL_NAME]


@dataclass
class SynthTruth:
    masks: np.ndarray        # T x d, control row zero
    embeddings: np.ndarray   # T x d
    loadings: np.ndarray     # D x 2d, applied to basal ⊕ perturbation
    baseline: np.ndarray     # D
    artifact: np.ndarray     # N, injected artifact flag
    doublet: np.ndarray      # N
    labels: list             # N treatment labels
    ate: dict                # label -> D vector on the log1p(CPM) scale
    artifact_log_shift: np.ndarray  # D, log-scale frequency shift before renormalising
    flagged: np.ndarray = None      # D, QC-flagged genes

    def to_json(self):
        return {
            "masks": self.masks.tolist(),
            "embeddings": self.embeddings.tolist(),
            "loadings": self.loadings.tolist(),
            "baseline": self.baseline.tolist(),
            "artifact_log_shift": self.artifact_log_shift.tolist(),
            "flagged": self.flagged.astype(int).tolist(),
            "artifact": self.artifact.astype(int).tolist(),
            "doublet": self.doublet.astype(int).tolist(),
            "labels": list(self.labels),
            "ate": {k: v.tolist() for k, v in self.ate.items()},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            np.array(obj["masks"]), np.array(obj["embeddings"]), np.array(obj["loadings"]),
            np.array(obj["baseline"]), np.array(obj["artifact"], dtype=bool), np.array(obj["doublet"], dtype=bool),
            list(obj["labels"]), {k: np.array(v) for k, v in obj["ate"].items()},
            np.array(obj["artifact_log_shift"]), np.array(obj["flagged"], dtype=bool),
        )


def _patterns(cfg):
    n_real = cfg.n_treatments - 1
    pats = [[t] for t in range(n_real)] + [sorted(set(c)) for c in cfg.combinations]
    return pats


def _logits(truth, zb, zp):
    return np.concatenate([zb, zp], axis=-1) @ truth.loadings.T + truth.baseline


def _frequencies(truth, logits):
    """Flagged genes share mass with a unit-weight ordinary block; ordinary genes split theirs by softmax."""
    flagged = truth.flagged
    lf = logits[..., flagged]
    lo = logits[..., ~flagged]
    denom = np.logaddexp(0.0, special.logsumexp(lf, axis=-1, keepdims=True))
    out = np.empty_like(logits)
    out[..., flagged] = np.exp(lf - denom)
    out[..., ~flagged] = special.softmax(lo, axis=-1) * np.exp(-denom)
    return out


def _draw_cell(cfg, truth, rng, pats, force_clean=False):
    u = rng.uniform()
    if u < cfg.control_fraction:
        members = [cfg.n_treatments - 1]
    else:
        members = pats[rng.integers(len(pats))]
    p = np.zeros(cfg.n_treatments)
    p[members] = 1.0
    zb = rng.standard_normal(cfg.d_z)
    zp = p @ (truth.masks * truth.embeddings)
    logits = _logits(truth, zb, zp)
    lib = np.exp(cfg.library_log_mean + cfg.library_log_sd * rng.standard_normal())
    artifact = (not force_clean) and rng.uniform() < cfg.artifact_prevalence
    if artifact:
        logits = logits + truth.artifact_log_shift
        lib *= cfg.library_factor
    freq = _frequencies(truth, logits)
    rate = rng.gamma(cfg.theta, freq * lib / cfg.theta)
    counts = rng.poisson(rate)
    return p, counts, artifact


def synth_generate(cfg):
    """Returns ``(Dataset, SynthTruth)``; doublet flags travel on the dataset."""
    root = np.random.default_rng([cfg.seed, 0])
    T, d, D = cfg.n_treatments, cfg.d_z, cfg.n_genes
    masks = (root.uniform(size=(T, d)) < cfg.mask_density).astype(float)
    masks[T - 1] = 0.0
    for t in range(T - 1):
        if not masks[t].any():
            masks[t, root.integers(d)] = 1.0
    embeddings = cfg.effect_scale * root.standard_normal((T, d))
    loadings = cfg.loading_scale * root.standard_normal((D, 2 * d))
    baseline = cfg.baseline_sd * root.standard_normal(D)
    mito = np.arange(0, cfg.n_mito)
    hb = np.arange(cfg.n_mito, cfg.n_mito + cfg.n_hb)
    ribo = np.arange(cfg.n_mito + cfg.n_hb, cfg.n_mito + cfg.n_hb + cfg.n_ribo)
    for idx, level in ((mito, cfg.mito_baseline), (hb, cfg.hb_baseline), (ribo, cfg.ribo_baseline)):
        baseline[idx] = level + 0.2 * root.standard_normal(len(idx))
        loadings[idx] *= cfg.flagged_loading_factor
    shift = np.zeros(D)
    shift[hb] = np.log(cfg.hb_boost)

    flagged = np.zeros(D, dtype=bool)
    flagged[np.concatenate([mito, hb, ribo])] = True
    truth = SynthTruth(masks, embeddings, loadings, baseline, None, None, None, {}, shift, flagged)
    pats = _patterns(cfg)
    names = cfg.treatment_names()

    P = np.zeros((cfg.n_cells, T), dtype=np.int8)
    counts = np.zeros((cfg.n_cells, D), dtype=np.int64)
    artifact = np.zeros(cfg.n_cells, dtype=bool)
    doublet = np.zeros(cfg.n_cells, dtype=bool)
    for i in range(cfg.n_cells):
        rng = np.random.default_rng([cfg.seed, 1, i])
        p, x, art = _draw_cell(cfg, truth, rng, pats)
        if rng.uniform() < cfg.doublet_rate:
            _, x2, _ = _draw_cell(cfg, truth, rng, pats, force_clean=True)
            x = x + x2
            doublet[i] = True
        if x.sum() == 0:
            x[rng.integers(D)] = 1
        P[i], counts[i], artifact[i] = p, x, art

    perts = PerturbationSet(P, names)
    labels = perts.labels()
    truth.artifact, truth.doublet, truth.labels = artifact, doublet, labels
    truth.ate = true_ate(cfg, truth)

    flags = np.zeros((3, D), dtype=bool)
    flags[0, mito], flags[1, hb], flags[2, ribo] = True, True, True
    gene_ids = [f"MT-{k + 1}" for k in range(len(mito))] + [f"HB-{k + 1}" for k in range(len(hb))] + \
        [f"RPL{k + 1}" for k in range(len(ribo))] + [f"GENE{k + 1}" for k in range(D - len(mito) - len(hb) - len(ribo))]
    expr = ExpressionMatrix(counts, gene_ids, [f"c{i:05d}" for i in range(cfg.n_cells)], *flags)
    return Dataset(expr, perts, doublet), truth


def true_ate(cfg, truth):
    """Treatment effects on the log1p(CPM) scale from noiseless frequencies.

    Treated and control share the same basal draws, so the result is the
    expected per-gene difference of ``log1p(1e4 * frequency)``.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    zb = rng.standard_normal((cfg.n_truth_samples, cfg.d_z))
    T = cfg.n_treatments
    names = cfg.treatment_names()

    def expr(p):
        zp = np.broadcast_to(p @ (truth.masks * truth.embeddings), zb.shape)
        return np.log1p(ATE_SCALE * _frequencies(truth, _logits(truth, zb, zp))).mean(axis=0)

    ctrl = np.zeros(T)
    ctrl[T - 1] = 1.0
    base = expr(ctrl)
    out = {}
    for pat in _patterns(cfg):
        p = np.zeros(T)
        p[pat] = 1.0
        out[combination_key(names[t] for t in pat)] = expr(p) - base
    return out


def synth_sample_clean(cfg, truth, label, n, seed):
    """Artifact-free, doublet-free cells of one treatment (for oracle checks)."""
    names = cfg.treatment_names()
    members = [names.index(s) for s in label.split("+")]
    p = np.zeros(cfg.n_treatments)
    p[members] = 1.0
    rng = np.random.default_rng([cfg.seed, 3, seed])
    zb = rng.standard_normal((n, cfg.d_z))
    zp = np.broadcast_to(p @ (truth.masks * truth.embeddings), zb.shape)
    freq = _frequencies(truth, _logits(truth, zb, zp))
    lib = np.exp(cfg.library_log_mean + cfg.library_log_sd * rng.standard_normal(n))
    rate = rng.gamma(cfg.theta, freq * lib[:, None] / cfg.theta)
    return rng.poisson(rate)


def synth_qc_consistency(dataset, truth, qc_cfg=None):
    """Confusion counts between injected artifacts and QC outcomes."""
    report = qc_evaluate(dataset.expression, dataset.doublets, qc_cfg or QcConfig())
    fail = report.artifact_labels == 1
    art = np.asarray(truth.artifact, dtype=bool)
    clean = ~art & ~np.asarray(truth.doublet, dtype=bool)
    out = {
        "artifact_fail": int(np.sum(art & fail)),
        "artifact_pass": int(np.sum(art & ~fail)),
        "clean_fail": int(np.sum(clean & fail)),
        "clean_pass": int(np.sum(clean & ~fail)),
        "doublet_fail": int(np.sum(truth.doublet & ~report.passes["doublet"])),
        "doublet_total": int(np.sum(truth.doublet)),
    }
    out["artifact_recall"] = out["artifact_fail"] / max(1, out["artifact_fail"] + out["artifact_pass"])
    out["clean_fail_rate"] = out["clean_fail"] / max(1, out["clean_fail"] + out["clean_pass"])
    out["doublet_recall"] = out["doublet_fail"] / max(1, out["doublet_total"])
    return out


BENCHMARK = SynthConfig()


def benchmark_config(seed=0):
    """The frozen desk-scale benchmark (N=2000, 50 genes, 6 treatments incl. control, d_z=8)."""
    return SynthConfig(**{**asdict(BENCHMARK), "seed": seed})


def write_truth(truth, path):
    Path(path).write_text(json.dumps(truth.to_json()))


def read_truth(path):
    return SynthTruth.from_json(json.loads(Path(path).read_text()))
