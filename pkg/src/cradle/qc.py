"""Six-criterion single-cell quality control with scaled-MAD thresholds."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import DataError, ExpressionMatrix, library_sizes

MAD_CRITERIA = ("umi_count", "n_features", "pct_mito", "pct_hb", "pct_ribo")
CRITERIA = MAD_CRITERIA + ("doublet",)
DEFAULT_SIDES = {
    "umi_count": "both",
    "n_features": "both",
    "pct_mito": "upper",
    "pct_hb": "upper",
    "pct_ribo": "both",
}


@dataclass
class QcConfig:
    n_mads: float = 3.0
    mad_scale: float = 1.4826
    sides: dict = field(default_factory=lambda: dict(DEFAULT_SIDES))
    # "all": thresholds from every cell; "singlets": exclude flagged doublets from the pools
    threshold_pool: str = "all"

    def __post_init__(self):
        if not self.n_mads >= 0:
            raise ValueError("n_mads must be nonnegative")
        if not self.mad_scale > 0:
            raise ValueError("mad_scale must be positive")
        sides = dict(DEFAULT_SIDES)
        sides.update(self.sides)
        for name, side in sides.items():
            if name not in DEFAULT_SIDES or side not in ("both", "upper", "lower"):
                raise ValueError(f"bad sidedness {name}={side!r}")
        self.sides = sides
        if self.threshold_pool not in ("all", "singlets"):
            raise ValueError("threshold_pool must be 'all' or 'singlets'")


def mad_threshold(values, n_mads=3.0, mad_scale=1.4826):
    """``median -/+ n_mads * mad_scale * median(|v - median|)``."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("mad_threshold needs at least one value")
    med = np.median(v)
    smad = mad_scale * np.median(np.abs(v - med))
    return med - n_mads * smad, med + n_mads * smad


def qc_statistics(X, allow_empty=False):
    """Per-cell values of the five MAD-thresholded statistics.

    Cells with zero reads raise unless ``allow_empty``; then their
    percentages are NaN, which fails every threshold.
    """
    counts = X.counts
    if allow_empty:
        umi = counts.sum(axis=1)
    else:
        umi = library_sizes(X)
    umi_f = umi.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = {
            key: 100.0 * counts[:, flags].sum(axis=1).astype(float) / umi_f
            for key, flags in (("pct_mito", X.is_mito), ("pct_hb", X.is_hemoglobin), ("pct_ribo", X.is_ribosomal))
        }
    return {
        "umi_count": umi_f,
        "n_features": (counts > 0).sum(axis=1).astype(float),
        **pct,
    }


@dataclass
class QcReport:
    values: dict
    is_doublet: np.ndarray
    passes: dict
    artifact_labels: np.ndarray
    thresholds: dict
    n_mads: float

    @property
    def n_cells(self):
        return len(self.artifact_labels)

    def to_csv(self, path, cell_ids=None):
        """One row per cell; the first line is a ``#``-prefixed JSON record of the thresholds."""
        ids = cell_ids if cell_ids is not None else [f"cell{i}" for i in range(self.n_cells)]
        with open(path, "w", newline="") as fh:
            fh.write("# thresholds " + json.dumps(
                {"n_mads": self.n_mads, **{k: list(v) for k, v in self.thresholds.items()}}) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_id", *MAD_CRITERIA, "is_doublet", *[f"pass_{c}" for c in CRITERIA], "a"])
            for i in range(self.n_cells):
                w.writerow([
                    ids[i],
                    *[repr(float(self.values[c][i])) for c in MAD_CRITERIA],
                    int(self.is_doublet[i]),
                    *[int(self.passes[c][i]) for c in CRITERIA],
                    int(self.artifact_labels[i]),
                ])


def read_qc_report_labels(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return np.array([int(r["a"]) for r in csv.DictReader(lines)], dtype=np.int8)


def fit_thresholds(stats, doublets, cfg):
    pool = np.ones(len(doublets), dtype=bool)
    if cfg.threshold_pool == "singlets" and not doublets.all():
        pool = ~doublets
    out = {}
    for name in MAD_CRITERIA:
        vals = stats[name][pool]
        lo, hi = mad_threshold(vals[np.isfinite(vals)], cfg.n_mads, cfg.mad_scale)
        side = cfg.sides[name]
        out[name] = (lo if side != "upper" else -np.inf, hi if side != "lower" else np.inf)
    return out


def apply_thresholds(stats, doublets, thresholds):
    passes = {}
    for name in MAD_CRITERIA:
        lo, hi = thresholds[name]
        v = stats[name]
        passes[name] = (v >= lo) & (v <= hi)
    passes["doublet"] = ~doublets
    ok = np.ones(len(doublets), dtype=bool)
    for name in CRITERIA:
        ok &= passes[name]
    return passes, (~ok).astype(np.int8)


def qc_evaluate(X, doublets=None, cfg=None, thresholds=None, allow_empty=False):
    """Compute the six criteria, thresholds (unless given) and artifact labels."""
    cfg = cfg or QcConfig()
    if doublets is None:
        doublets = np.zeros(X.n_cells, dtype=bool)
    doublets = np.asarray(doublets, dtype=bool)
    if doublets.shape != (X.n_cells,):
        raise DataError(f"need {X.n_cells} doublet flags, got {doublets.shape}")
    stats = qc_statistics(X, allow_empty=allow_empty)
    if thresholds is None:
        thresholds = fit_thresholds(stats, doublets, cfg)
    passes, labels = apply_thresholds(stats, doublets, thresholds)
    return QcReport(stats, doublets, passes, labels, dict(thresholds), cfg.n_mads)


def artifact_labels(report):
    return np.asarray(report.artifact_labels, dtype=np.int8)


def qc_pass_rate(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("qc_pass_rate of an empty label set")
    return float(np.count_nonzero(labels == 0)) / labels.size


class QualityControl(TransformerMixin, BaseEstimator):
    """Fit MAD thresholds on reference cells, then label any cells against them.

    Keeping the fitted thresholds separate from the cells they are applied
    to is what lets generated data be scored against the training data.

    Parameters
    ----------
    n_mads : float
        Width of the acceptance band in scaled MADs (3, 4 and 5 are customary).
    mad_scale : float
        Consistency constant multiplying the raw MAD.
    sides : dict, optional
        Per-criterion ``"both"``, ``"upper"`` or ``"lower"`` overrides.
    threshold_pool : {"all", "singlets"}
        Which cells contribute to the medians.
    """

    def __init__(self, n_mads=3.0, mad_scale=1.4826, sides=None, threshold_pool="all"):
        self.n_mads = n_mads
        self.mad_scale = mad_scale
        self.sides = sides
        self.threshold_pool = threshold_pool

    def _config(self):
        return QcConfig(self.n_mads, self.mad_scale, dict(self.sides or {}), self.threshold_pool)

    def fit(self, X, y=None, doublets=None):
        X = _as_expression(X)
        report = qc_evaluate(X, doublets, self._config())
        self.thresholds_ = report.thresholds
        self.n_features_in_ = X.n_genes
        return self

    def report(self, X, doublets=None, allow_empty=False):
        check_is_fitted(self, "thresholds_")
        X = _as_expression(X)
        return qc_evaluate(X, doublets, self._config(), thresholds=self.thresholds_, allow_empty=allow_empty)

    def transform(self, X, doublets=None):
        """Per-cell statistics as an ``N x 6`` array (five MAD statistics plus doublet flag)."""
        rep = self.report(X, doublets)
        return np.column_stack([rep.values[c] for c in MAD_CRITERIA] + [rep.is_doublet.astype(float)])

    def predict(self, X, doublets=None, allow_empty=False):
        """Artifact labels: 1 when any criterion fails."""
        return self.report(X, doublets, allow_empty=allow_empty).artifact_labels

    def score(self, X, y=None, doublets=None):
        return qc_pass_rate(self.predict(X, doublets, allow_empty=True))


def _as_expression(X):
    return X if isinstance(X, ExpressionMatrix) else ExpressionMatrix(X)
