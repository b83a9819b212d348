"""Count matrices, perturbation assignments, splits and their file formats."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTROL_NAME = "non-targeting"


class DataError(ValueError):
    """Malformed or invalid input data."""


def _as_count_array(values):
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DataError(f"counts must be a 2-D matrix, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DataError("counts must be integers")
    elif arr.dtype.kind not in "iub":
        raise DataError(f"counts must be numeric, got dtype {arr.dtype}")
    if np.any(arr < 0):
        raise DataError("counts must be nonnegative")
    return arr.astype(np.int64)


@dataclass
class ExpressionMatrix:
    counts: np.ndarray
    gene_ids: list = None
    cell_ids: list = None
    is_mito: np.ndarray = None
    is_hemoglobin: np.ndarray = None
    is_ribosomal: np.ndarray = None

    def __post_init__(self):
        self.counts = _as_count_array(self.counts)
        n, d = self.counts.shape
        if self.gene_ids is None:
            self.gene_ids = [f"gene{j}" for j in range(d)]
        if self.cell_ids is None:
            self.cell_ids = [f"cell{i}" for i in range(n)]
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.cell_ids = [str(c) for c in self.cell_ids]
        if len(self.gene_ids) != d:
            raise DataError(f"{len(self.gene_ids)} gene ids for {d} columns")
        if len(self.cell_ids) != n:
            raise DataError(f"{len(self.cell_ids)} cell ids for {n} rows")
        if len(set(self.gene_ids)) != d:
            raise DataError("gene ids must be unique")
        for name in ("is_mito", "is_hemoglobin", "is_ribosomal"):
            flags = getattr(self, name)
            flags = np.zeros(d, dtype=bool) if flags is None else np.asarray(flags, dtype=bool)
            if flags.shape != (d,):
                raise DataError(f"{name} must have one flag per gene")
            setattr(self, name, flags)

    @property
    def n_cells(self):
        return self.counts.shape[0]

    @property
    def n_genes(self):
        return self.counts.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return ExpressionMatrix(
            self.counts[rows], self.gene_ids, [self.cell_ids[i] for i in rows],
            self.is_mito, self.is_hemoglobin, self.is_ribosomal,
        )

    def with_counts(self, counts, cell_ids=None):
        """Same gene annotation, new cells."""
        return ExpressionMatrix(counts, self.gene_ids, cell_ids, self.is_mito, self.is_hemoglobin, self.is_ribosomal)


def combination_key(names):
    return "+".join(sorted(names))


@dataclass
class PerturbationSet:
    assignments: np.ndarray
    treatment_names: list
    control_index: int = None

    def __post_init__(self):
        a = np.asarray(self.assignments)
        if a.ndim != 2 or a.shape[1] != len(self.treatment_names):
            raise DataError("assignments must be N x T with one column per treatment name")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("assignments must be binary")
        if len(set(self.treatment_names)) != len(self.treatment_names):
            raise DataError("treatment names must be unique")
        self.assignments = a.astype(np.int8)
        self.treatment_names = list(self.treatment_names)
        if self.control_index is None and CONTROL_NAME in self.treatment_names:
            self.control_index = self.treatment_names.index(CONTROL_NAME)

    @classmethod
    def from_labels(cls, labels, registry=None, control_name=CONTROL_NAME):
        """Encode ``"+"``-joined treatment labels as a multi-hot matrix."""
        parsed = []
        for row, label in enumerate(labels):
            names = [s.strip() for s in str(label).split("+")]
            if not label or any(not s for s in names):
                raise DataError(f"row {row}: empty treatment label {label!r}")
            if len(set(names)) != len(names):
                raise DataError(f"row {row}: repeated treatment in {label!r}")
            parsed.append(names)
        if registry is None:
            registry = sorted({n for names in parsed for n in names})
        index = {name: j for j, name in enumerate(registry)}
        out = np.zeros((len(parsed), len(registry)), dtype=np.int8)
        for row, names in enumerate(parsed):
            for name in names:
                if name not in index:
                    raise DataError(f"row {row}: unknown treatment {name!r}")
                out[row, index[name]] = 1
        ctrl = index.get(control_name)
        return cls(out, list(registry), ctrl)

    @property
    def n_cells(self):
        return self.assignments.shape[0]

    @property
    def n_treatments(self):
        return self.assignments.shape[1]

    def label(self, row):
        return combination_key(self.treatment_names[j] for j in np.flatnonzero(row))

    def labels(self):
        return [self.label(r) for r in self.assignments]

    def encode(self, label):
        """Multi-hot row for one label (order-insensitive)."""
        return PerturbationSet.from_labels([label], self.treatment_names).assignments[0]

    def subset(self, rows):
        return PerturbationSet(self.assignments[np.asarray(rows, dtype=np.int64)], self.treatment_names, self.control_index)


@dataclass
class Split:
    train_indices: list
    val_indices: list
    test_indices: list
    held_out_treatments: list = field(default_factory=list)

    def __post_init__(self):
        parts = [list(map(int, p)) for p in (self.train_indices, self.val_indices, self.test_indices)]
        self.train_indices, self.val_indices, self.test_indices = parts
        seen = set()
        for p in parts:
            if seen.intersection(p) or len(set(p)) != len(p):
                raise DataError("split parts overlap")
            seen.update(p)

    def to_json(self):
        return {"train": self.train_indices, "val": self.val_indices,
                "test": self.test_indices, "held_out_treatments": list(self.held_out_treatments)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["train"], obj["val"], obj["test"], obj.get("held_out_treatments", []))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def _parse_int(field_, lineno, col):
    try:
        value = int(field_)
    except ValueError:
        try:
            fval = float(field_)
        except ValueError:
            raise DataError(f"line {lineno}, column {col}: cannot parse {field_!r} as a count") from None
        raise DataError(f"line {lineno}, column {col}: non-integer count {fval!r}") from None
    if value < 0:
        raise DataError(f"line {lineno}, column {col}: negative count {value}")
    return value


def _read_dense_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(s.strip() for s in r)]
    if not rows:
        raise DataError(f"{path}: empty counts file")
    gene_ids = None
    first = rows[0][1]
    try:
        [int(s) for s in first]
    except ValueError:
        gene_ids = [s.strip() for s in first]
        rows = rows[1:]
    width = len(gene_ids) if gene_ids is not None else len(first)
    counts = []
    for lineno, row in rows:
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} fields, got {len(row)}")
        counts.append([_parse_int(s.strip(), lineno, j + 1) for j, s in enumerate(row)])
    arr = np.array(counts, dtype=np.int64).reshape(len(counts), width)
    return arr, gene_ids


def _read_matrix_market(path):
    with open(path) as fh:
        lines = fh.readlines()
    if not lines or not lines[0].lower().startswith("%%matrixmarket"):
        raise DataError("line 1: missing %%MatrixMarket header")
    banner = lines[0].lower().split()
    if len(banner) < 5 or banner[1] != "matrix" or banner[2] != "coordinate":
        raise DataError("line 1: only 'matrix coordinate' MatrixMarket files are supported")
    if banner[3] not in ("integer", "real"):
        raise DataError(f"line 1: unsupported field type {banner[3]!r}")
    dims = None
    arr = None
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if dims is None:
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected 'rows cols nnz'")
            try:
                dims = tuple(int(p) for p in parts)
            except ValueError:
                raise DataError(f"line {lineno}: malformed size line") from None
            arr = np.zeros(dims[:2], dtype=np.int64)
            continue
        if len(parts) != 3:
            raise DataError(f"line {lineno}: expected 'row col value'")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"line {lineno}: malformed index") from None
        if not (1 <= i <= dims[0] and 1 <= j <= dims[1]):
            raise DataError(f"line {lineno}: index ({i}, {j}) out of bounds")
        arr[i - 1, j - 1] += _parse_int(parts[2], lineno, 3)
    if dims is None:
        raise DataError("missing size line")
    return arr


def read_gene_flags(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"gene_id", "is_mito", "is_hemoglobin", "is_ribosomal"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise DataError(f"{path}: genes file needs columns {sorted(need)}")
        rows = list(reader)
    out = {}
    for lineno, row in enumerate(rows, start=2):
        flags = []
        for key in ("is_mito", "is_hemoglobin", "is_ribosomal"):
            if row[key] not in ("0", "1"):
                raise DataError(f"{path} line {lineno}: {key} must be 0 or 1")
            flags.append(row[key] == "1")
        out[row["gene_id"]] = flags
    return out


def load_counts(path, format=None, genes_path=None):
    """Read a count matrix from dense CSV or MatrixMarket coordinate format.

    ``format`` is ``"dense-csv"`` or ``"matrix-market"``; when omitted it is
    taken from the file suffix.  Gene flags come from ``genes_path`` if given
    and default to all-false.
    """
    path = Path(path)
    if format is None:
        format = "matrix-market" if path.suffix == ".mtx" else "dense-csv"
    if format == "dense-csv":
        counts, gene_ids = _read_dense_csv(path)
    elif format in ("matrix-market", "matrix-market-triplet"):
        counts, gene_ids = _read_matrix_market(path), None
    else:
        raise ValueError(f"unknown counts format {format!r}")
    flags = None
    if genes_path is not None:
        table = read_gene_flags(genes_path)
        if gene_ids is None:
            gene_ids = list(table)
        missing = [g for g in gene_ids if g not in table]
        if missing:
            raise DataError(f"genes file lacks annotation for {missing[:5]}")
        flags = np.array([table[g] for g in gene_ids], dtype=bool).reshape(len(gene_ids), 3)
    em = ExpressionMatrix(counts, gene_ids)
    if flags is not None:
        em.is_mito, em.is_hemoglobin, em.is_ribosomal = flags[:, 0], flags[:, 1], flags[:, 2]
    return em


def write_counts(matrix, path, format=None):
    path = Path(path)
    if format is None:
        format = "matrix-market" if path.suffix == ".mtx" else "dense-csv"
    counts = matrix.counts if isinstance(matrix, ExpressionMatrix) else _as_count_array(matrix)
    if format == "dense-csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if isinstance(matrix, ExpressionMatrix):
                w.writerow(matrix.gene_ids)
            w.writerows(counts.tolist())
    elif format in ("matrix-market", "matrix-market-triplet"):
        rows, cols = np.nonzero(counts)
        with open(path, "w") as fh:
            fh.write("%%MatrixMarket matrix coordinate integer general\n")
            fh.write(f"{counts.shape[0]} {counts.shape[1]} {len(rows)}\n")
            for i, j in zip(rows.tolist(), cols.tolist()):
                fh.write(f"{i + 1} {j + 1} {counts[i, j]}\n")
    else:
        raise ValueError(f"unknown counts format {format!r}")


def write_gene_flags(matrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_id", "is_mito", "is_hemoglobin", "is_ribosomal"])
        for g, m, h, r in zip(matrix.gene_ids, matrix.is_mito, matrix.is_hemoglobin, matrix.is_ribosomal):
            w.writerow([g, int(m), int(h), int(r)])


def load_perturbations(path, registry=None):
    """Read ``cell_id,treatment`` rows; returns ``(PerturbationSet, cell_ids)``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cell_id", "treatment"}.issubset(reader.fieldnames):
            raise DataError(f"{path}: needs columns cell_id,treatment")
        rows = list(reader)
    labels = [r["treatment"] for r in rows]
    return PerturbationSet.from_labels(labels, registry), [r["cell_id"] for r in rows]


def write_perturbations(perts, cell_ids, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "treatment"])
        for cid, label in zip(cell_ids, perts.labels()):
            w.writerow([cid, label])


@dataclass
class Dataset:
    """Counts, treatments and doublet flags for the same cells."""

    expression: ExpressionMatrix
    perturbations: PerturbationSet
    doublets: np.ndarray = None

    def __post_init__(self):
        n = self.expression.n_cells
        if self.perturbations.n_cells != n:
            raise DataError(
                f"perturbation rows ({self.perturbations.n_cells}) do not match count rows ({n})"
            )
        self.doublets = np.zeros(n, dtype=bool) if self.doublets is None else np.asarray(self.doublets, dtype=bool)
        if self.doublets.shape != (n,):
            raise DataError("need one doublet flag per cell")

    @property
    def n_cells(self):
        return self.expression.n_cells

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.expression.subset(rows), self.perturbations.subset(rows), self.doublets[rows])


def load_dataset(directory, registry=None):
    """Read ``counts.csv`` (or ``counts.mtx``), ``genes.csv``, ``perts.csv`` and optional ``doublets.csv``."""
    d = Path(directory)
    counts_path = d / "counts.csv" if (d / "counts.csv").exists() else d / "counts.mtx"
    genes = d / "genes.csv"
    expr = load_counts(counts_path, genes_path=genes if genes.exists() else None)
    perts, cell_ids = load_perturbations(d / "perts.csv", registry)
    if len(cell_ids) != expr.n_cells:
        raise DataError(f"perts.csv has {len(cell_ids)} rows but counts have {expr.n_cells}")
    expr.cell_ids = cell_ids
    doublets = None
    if (d / "doublets.csv").exists():
        with open(d / "doublets.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if [r["cell_id"] for r in rows] != cell_ids:
            raise DataError("doublets.csv cell ids do not match perts.csv")
        doublets = np.array([r["is_doublet"] == "1" for r in rows], dtype=bool)
    return Dataset(expr, perts, doublets)


def write_dataset(dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_counts(dataset.expression, d / "counts.csv")
    write_gene_flags(dataset.expression, d / "genes.csv")
    write_perturbations(dataset.perturbations, dataset.expression.cell_ids, d / "perts.csv")
    with open(d / "doublets.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "is_doublet"])
        for cid, flag in zip(dataset.expression.cell_ids, dataset.doublets):
            w.writerow([cid, int(flag)])


def library_sizes(matrix):
    counts = matrix.counts if isinstance(matrix, ExpressionMatrix) else _as_count_array(matrix)
    lib = counts.sum(axis=1)
    bad = np.flatnonzero(lib == 0)
    if bad.size:
        raise DataError(f"cells with zero library size at rows {bad[:10].tolist()}")
    return lib


def _partition_sizes(n, fractions):
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_random(n_cells, fractions=(0.8, 0.1, 0.1), seed=0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    sizes = _partition_sizes(n_cells, fractions)
    perm = np.random.default_rng(seed).permutation(n_cells)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(sorted(perm[:a].tolist()), sorted(perm[a:b].tolist()), sorted(perm[b:].tolist()))


def split_ood_combinations(perts, fraction=0.25, seed=0, val_fraction=0.1):
    """Hold out whole multi-gene combinations for testing.

    ``ceil(fraction * n_combinations)`` combinations are drawn without
    replacement; every cell carrying one of them goes to test.  The other
    cells are divided into train and validation by ``val_fraction``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    multi = perts.assignments.sum(axis=1) >= 2
    labels = perts.labels()
    combos = sorted({labels[i] for i in np.flatnonzero(multi)})
    if not combos:
        raise DataError("no multi-gene combinations present; use split_random instead")
    k = math.ceil(round(fraction * len(combos), 9))
    rng = np.random.default_rng(seed)
    held = sorted(combos[i] for i in rng.choice(len(combos), size=k, replace=False))
    held_set = set(held)
    test = [i for i, lab in enumerate(labels) if lab in held_set]
    rest = np.array([i for i, lab in enumerate(labels) if lab not in held_set], dtype=np.int64)
    rest = rest[rng.permutation(len(rest))]
    n_val = int(round(val_fraction * len(rest)))
    return Split(sorted(rest[n_val:].tolist()), sorted(rest[:n_val].tolist()), test, held)
