"""Synthetic long-tailed single-cell data with planted marker structure."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidConfig, LengthMismatch
from .ontology import CellOntology, MarkerCatalog

MATRIX_FILE = "matrix.tsv"
POST_MATRIX_FILE = "post_matrix.tsv"
METADATA_FILE = "metadata.json"
ONTOLOGY_FILE = "ontology.json"
CATALOG_FILE = "markers.json"
SPLITS = ("train", "val", "test", "ood")


@dataclass
class GeneratorConfig:
    num_genes: int = 128
    num_types: int = 12
    num_lineages: int = 3
    num_cells: int = 3000
    alpha_gen: float = 0.4
    uniform: bool = False
    markers_per_type: int = 4
    markers_per_lineage: int = 4
    overexpression: float = 2.0
    base_scale: float = 1.0
    noise_sigma: float = 0.5
    num_batches: int = 2
    batch_shift: float = 0.5
    depth_range: tuple[float, float] = (0.8, 1.2)
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    ood_cells: int = 0
    ood_batch_shift: float = 1.0
    ood_depth_range: tuple[float, float] = (0.5, 1.5)
    perturbation_genes: int = 0
    perturbation_magnitude: float = 1.0
    perturbation_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.ood_depth_range = tuple(float(v) for v in self.ood_depth_range)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)

    def validate(self) -> None:
        if self.alpha_gen <= 0:
            raise InvalidConfig("alpha_gen must be > 0")
        if self.num_types < 1 or self.num_lineages < 1 or self.num_lineages > self.num_types:
            raise InvalidConfig("need 1 <= num_lineages <= num_types")
        if self.num_cells < self.num_types:
            raise InvalidConfig("need at least one cell per type")
        if self.markers_per_type < 1 or self.markers_per_lineage < 0:
            raise InvalidConfig("every type needs at least one marker")
        needed = self.num_types * self.markers_per_type + self.num_lineages * self.markers_per_lineage
        if needed > self.num_genes:
            raise InvalidConfig(f"{needed} disjoint marker genes needed, only {self.num_genes} genes")
        if self.num_batches < 1:
            raise InvalidConfig("num_batches must be >= 1")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise InvalidConfig("depth_range must satisfy 0 < low <= high")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise InvalidConfig("split_fractions must be three non-negative values summing to 1")
        if min(self.overexpression, self.base_scale, self.noise_sigma, self.batch_shift) < 0:
            raise InvalidConfig("scales must be non-negative")

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise InvalidConfig(f"unknown generator config keys: {sorted(unknown)}")
        try:
            cfg = cls(**mapping)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class ExpressionDataset:
    """Cells x genes expression plus aligned per-cell metadata."""

    matrix: np.ndarray
    genes: list[str]
    cell_ids: list[str]
    cell_types: list[str]
    batches: list[int]
    splits: list[str]
    post_matrix: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n = self.matrix.shape[0]
        if not (len(self.cell_ids) == len(self.cell_types) == len(self.batches) == len(self.splits) == n):
            raise LengthMismatch("metadata length does not match matrix rows")
        if self.matrix.shape[1] != len(self.genes):
            raise LengthMismatch("matrix columns do not match gene list")
        if np.any(self.matrix < 0):
            raise ValueError("expression values must be non-negative")
        if self.post_matrix is not None:
            self.post_matrix = np.asarray(self.post_matrix, dtype=np.float64)
            if self.post_matrix.shape != self.matrix.shape:
                raise LengthMismatch("post matrix shape differs from pre matrix")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def type_names(self) -> list[str]:
        return sorted(set(self.cell_types))

    def subset(self, index: Sequence[int] | np.ndarray) -> "ExpressionDataset":
        idx = np.asarray(index, dtype=np.int64)
        pick = lambda xs: [xs[i] for i in idx]  # noqa: E731
        return ExpressionDataset(
            matrix=self.matrix[idx],
            genes=list(self.genes),
            cell_ids=pick(self.cell_ids),
            cell_types=pick(self.cell_types),
            batches=pick(self.batches),
            splits=pick(self.splits),
            post_matrix=None if self.post_matrix is None else self.post_matrix[idx],
            extra=dict(self.extra),
        )

    def split(self, *names: str) -> "ExpressionDataset":
        return self.subset([i for i, s in enumerate(self.splits) if s in names])

    def type_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for t in self.cell_types:
            counts[t] = counts.get(t, 0) + 1
        return dict(sorted(counts.items()))

    # --- on-disk layout -------------------------------------------------

    def save(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / MATRIX_FILE, out / METADATA_FILE]
        _write_tsv(out / MATRIX_FILE, self.matrix, self.genes, self.cell_ids)
        meta = [
            {"cell_id": c, "cell_type": t, "batch": int(b), "split": s}
            for c, t, b, s in zip(self.cell_ids, self.cell_types, self.batches, self.splits)
        ]
        (out / METADATA_FILE).write_text(json.dumps(meta, indent=1) + "\n")
        if self.post_matrix is not None:
            _write_tsv(out / POST_MATRIX_FILE, self.post_matrix, self.genes, self.cell_ids)
            written.append(out / POST_MATRIX_FILE)
        return written

    @classmethod
    def load(cls, data_dir: str | Path) -> "ExpressionDataset":
        d = Path(data_dir)
        genes, cell_ids, matrix = _read_tsv(d / MATRIX_FILE)
        meta = json.loads((d / METADATA_FILE).read_text())
        by_id = {m["cell_id"]: m for m in meta}
        if set(by_id) != set(cell_ids):
            raise LengthMismatch("metadata cell ids do not match matrix rows")
        rows = [by_id[c] for c in cell_ids]
        post = None
        if (d / POST_MATRIX_FILE).exists():
            _, _, post = _read_tsv(d / POST_MATRIX_FILE)
        return cls(
            matrix=matrix,
            genes=genes,
            cell_ids=cell_ids,
            cell_types=[r["cell_type"] for r in rows],
            batches=[int(r["batch"]) for r in rows],
            splits=[r["split"] for r in rows],
            post_matrix=post,
        )


def _write_tsv(path: Path, matrix: np.ndarray, genes: Sequence[str], cell_ids: Sequence[str]) -> None:
    lines = ["\t".join(["cell_id", *genes])]
    for cid, row in zip(cell_ids, matrix):
        # repr of a Python float round-trips exactly
        lines.append("\t".join([cid, *(repr(float(v)) for v in row)]))
    path.write_text("\n".join(lines) + "\n")


def _read_tsv(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    if header[0] != "cell_id":
        raise ValueError(f"{path}: first header column must be cell_id")
    cell_ids, rows = [], []
    for line in lines[1:]:
        parts = line.split("\t")
        cell_ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return header[1:], cell_ids, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def power_law_frequencies(num_types: int, alpha: float) -> np.ndarray:
    """Type frequencies proportional to rank^(-1/alpha), rank 1 most common."""
    ranks = np.arange(1, num_types + 1, dtype=np.float64)
    w = ranks ** (-1.0 / alpha)
    return w / w.sum()


def allocate_counts(num_cells: int, freqs: np.ndarray, min_count: int = 1) -> np.ndarray:
    """Largest-remainder rounding of num_cells * freqs, each type at least min_count."""
    raw = num_cells * np.asarray(freqs, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    remainder = num_cells - counts.sum()
    # stable order: larger fractional part first, then lower rank
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    for i in range(len(counts)):
        while counts[i] < min_count:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def type_counts_for(cfg: GeneratorConfig) -> np.ndarray:
    if cfg.uniform:
        freqs = np.full(cfg.num_types, 1.0 / cfg.num_types)
    else:
        freqs = power_law_frequencies(cfg.num_types, cfg.alpha_gen)
    return allocate_counts(cfg.num_cells, freqs)


def _build_hierarchy(cfg: GeneratorConfig, rng: np.random.Generator):
    lineages = [f"lineage_{j}" for j in range(cfg.num_lineages)]
    types = [f"ct_{i:02d}" for i in range(cfg.num_types)]
    # frequency rank i -> lineage i mod num_lineages, so each lineage mixes head and tail
    type_lineage = {t: lineages[i % cfg.num_lineages] for i, t in enumerate(types)}
    nodes = ["root", *lineages, *types]
    edges = [("root", lin) for lin in lineages] + [(type_lineage[t], t) for t in types]
    ontology = CellOntology.from_edges(nodes, edges)

    genes = [f"G{g:04d}" for g in range(cfg.num_genes)]
    perm = rng.permutation(cfg.num_genes)
    cursor = 0
    markers: dict[str, list[int]] = {}
    for node, n in [(lin, cfg.markers_per_lineage) for lin in lineages] + [(t, cfg.markers_per_type) for t in types]:
        markers[node] = sorted(int(g) for g in perm[cursor : cursor + n])
        cursor += n
    catalog = MarkerCatalog.from_mapping(
        {node: [(genes[g], ontology.level[node]) for g in idx] for node, idx in markers.items() if idx}
    )
    return ontology, catalog, genes, types, type_lineage, markers


def _assign_splits(labels: np.ndarray, fractions, rng: np.random.Generator) -> list[str]:
    """Stratified split; types with >= 2 cells always keep one test cell."""
    splits = np.empty(len(labels), dtype=object)
    _, f_val, f_test = fractions
    for t in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == t))
        n = len(idx)
        n_test = int(np.floor(f_test * n + 0.5))
        if n >= 2 and f_test > 0:
            n_test = max(n_test, 1)
        n_test = min(n_test, n - 1)
        n_val = max(0, min(int(np.floor(f_val * n + 0.5)), n - n_test - 1))
        n_train = n - n_test - n_val
        splits[idx[:n_train]] = "train"
        splits[idx[n_train : n_train + n_val]] = "val"
        splits[idx[n_train + n_val :]] = "test"
    return list(splits)


def _simulate(cfg, rng, labels, type_names, type_lineage, markers, batch_ids, batch_offsets, depth_range):
    n, g = len(labels), cfg.num_genes
    sigma = cfg.noise_sigma
    base = cfg.base_scale * np.exp(sigma * rng.standard_normal((n, g)) - 0.5 * sigma**2)
    signal = np.zeros((n, g))
    for k, t in enumerate(type_names):
        rows = labels == k
        cols = markers[t] + markers.get(type_lineage[t], [])
        signal[np.ix_(rows, cols)] += cfg.overexpression * cfg.base_scale
    depth = rng.uniform(depth_range[0], depth_range[1], size=(n, 1))
    return (base + signal + batch_offsets[batch_ids]) * depth


def generate(cfg: GeneratorConfig) -> tuple[ExpressionDataset, CellOntology, MarkerCatalog]:
    """Sample a dataset whose marker catalog lists exactly the injected markers."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ontology, catalog, genes, types, type_lineage, markers = _build_hierarchy(cfg, rng)

    counts = type_counts_for(cfg)
    labels = rng.permutation(np.repeat(np.arange(cfg.num_types), counts))
    batch_ids = rng.integers(0, cfg.num_batches, size=len(labels))
    # non-negative offsets keep every value >= 0 without clipping
    offsets = cfg.batch_shift * cfg.base_scale * np.abs(rng.standard_normal((cfg.num_batches, cfg.num_genes)))
    matrix = _simulate(cfg, rng, labels, types, type_lineage, markers, batch_ids, offsets, cfg.depth_range)
    splits = _assign_splits(labels, cfg.split_fractions, rng)
    batches = [int(b) for b in batch_ids]

    if cfg.ood_cells > 0:
        ood_counts = allocate_counts(cfg.ood_cells, counts / counts.sum(), min_count=0)
        ood_labels = rng.permutation(np.repeat(np.arange(cfg.num_types), ood_counts))
        ood_offsets = cfg.ood_batch_shift * cfg.base_scale * np.abs(rng.standard_normal((1, cfg.num_genes)))
        ood_matrix = _simulate(
            cfg, rng, ood_labels, types, type_lineage, markers,
            np.zeros(len(ood_labels), dtype=np.int64), ood_offsets, cfg.ood_depth_range,
        )
        matrix = np.vstack([matrix, ood_matrix])
        labels = np.concatenate([labels, ood_labels])
        splits += ["ood"] * len(ood_labels)
        batches += [cfg.num_batches] * len(ood_labels)

    data = ExpressionDataset(
        matrix=matrix,
        genes=genes,
        cell_ids=[f"cell_{i:06d}" for i in range(len(labels))],
        cell_types=[types[k] for k in labels],
        batches=batches,
        splits=splits,
    )
    if cfg.perturbation_genes > 0:
        signature = np.zeros(cfg.num_genes)
        hit = rng.choice(cfg.num_genes, size=min(cfg.perturbation_genes, cfg.num_genes), replace=False)
        signature[hit] = cfg.perturbation_magnitude * cfg.base_scale * rng.choice([-1.0, 1.0], size=len(hit))
        data = apply_perturbation(data, signature, seed=cfg.seed + 1, noise=cfg.perturbation_noise)
    return data, ontology, catalog


def apply_perturbation(
    data: ExpressionDataset, signature: Sequence[float], seed: int, noise: float = 0.0
) -> ExpressionDataset:
    """Pair every cell with post = max(pre + signature + noise, 0)."""
    sig = np.asarray(signature, dtype=np.float64)
    if sig.shape != (len(data.genes),):
        raise LengthMismatch(f"signature has {sig.size} entries, dataset has {len(data.genes)} genes")
    post = data.matrix + sig[None, :]
    if noise > 0:
        post = post + noise * np.random.default_rng(seed).standard_normal(post.shape)
    out = data.subset(np.arange(len(data)))
    out.post_matrix = np.clip(post, 0.0, None)
    return out


def write_dataset(
    out_dir: str | Path, data: ExpressionDataset, ontology: CellOntology, catalog: MarkerCatalog
) -> list[Path]:
    out = Path(out_dir)
    written = data.save(out)
    ontology.save(out / ONTOLOGY_FILE)
    catalog.save(out / CATALOG_FILE)
    return written + [out / ONTOLOGY_FILE, out / CATALOG_FILE]


def read_dataset(data_dir: str | Path) -> tuple[ExpressionDataset, CellOntology, MarkerCatalog]:
    d = Path(data_dir)
    return ExpressionDataset.load(d), CellOntology.load(d / ONTOLOGY_FILE), MarkerCatalog.load(d / CATALOG_FILE)
