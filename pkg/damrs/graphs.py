"""
graphs.py - Item-item semantic and behavior graphs
Semantic graphs: cosine similarity -> mean-threshold prune -> cross-modal
consistency prune -> top-k with unit weights. Behavior graph: train
co-occurrence counts -> threshold -> top-k with raw counts and unit diagonal.
Both are symmetrized with max(A, A^T) unless disabled.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
import torch

from .config import GraphConfig
from .dataset import InteractionDataset, ModalityFeatures
from .errors import DimensionError, PreconditionError
from .storage import read_edge_list, read_sidecar, write_edge_list, write_sidecar

logger = logging.getLogger(__name__)

BEHAVIOR_GRAPH = "c"
GRAPHS_SIDECAR = "graphs.json"
ROW_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class SparseItemGraph:
    """Raw adjacency plus the symmetric-normalized weights used for propagation"""
    modality_id: str
    adjacency: sp.csr_matrix
    kind: str = "semantic"
    normalized: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def num_items(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz)

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def edges(self) -> List[Tuple[int, int, float]]:
        coo = self.adjacency.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[k]), int(coo.col[k]), float(coo.data[k])) for k in order]

    def is_symmetric(self) -> bool:
        return (self.adjacency != self.adjacency.T).nnz == 0

    def to_torch(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        if self.normalized is None:
            raise PreconditionError(f"graph '{self.modality_id}' has not been normalized")
        return sparse_to_torch(self.normalized, dtype)


def sparse_to_torch(matrix: sp.spmatrix, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert a scipy sparse matrix to a coalesced torch sparse COO tensor"""
    coo = sp.coo_matrix(matrix)
    indices = torch.from_numpy(np.vstack((coo.row, coo.col)).astype(np.int64))
    values = torch.from_numpy(coo.data.astype(np.float64)).to(dtype)
    return torch.sparse_coo_tensor(indices, values, size=coo.shape).coalesce()


def modality_similarity(features: ModalityFeatures) -> np.ndarray:
    """Dense cosine similarity; zero-norm rows are 0 against everything, self included"""
    matrix = np.asarray(features.matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    unit = np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)
    similarity = unit @ unit.T
    # exact 1 on the diagonal for nonzero rows, no rounding drift
    nonzero = norms.ravel() > 0
    np.fill_diagonal(similarity, np.where(nonzero, 1.0, 0.0))
    return similarity


def mean_threshold_prune(similarity: np.ndarray) -> np.ndarray:
    """Zero entries strictly below the mean over all |I|^2 entries"""
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1]:
        raise DimensionError(f"similarity must be square, got {similarity.shape}")
    threshold = similarity.mean()
    pruned = similarity.copy()
    pruned[similarity < threshold] = 0.0
    return pruned


def consistency_prune(similarities: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Keep (i, j) in modality m only where it is nonzero in every content modality"""
    if not similarities:
        raise PreconditionError("consistency pruning needs at least one modality")
    shapes = {m: s.shape for m, s in similarities.items()}
    if len(set(shapes.values())) != 1:
        raise DimensionError(f"modality similarity shapes differ: {shapes}")
    consistent = np.logical_and.reduce([s != 0 for s in similarities.values()])
    return {m: np.where(consistent, s, 0.0) for m, s in similarities.items()}


def topk_rows(dense: np.ndarray, k: int) -> sp.csr_matrix:
    """Per row, the k largest positive entries; ties go to the lower column index"""
    num_rows, num_cols = dense.shape
    rows, cols, vals = [], [], []
    for start in range(0, num_rows, ROW_BLOCK):
        block = dense[start:start + ROW_BLOCK]
        order = np.argsort(-block, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(block, order, axis=1)
        keep = picked > 0
        r, c = np.nonzero(keep)
        rows.append(r + start)
        cols.append(order[r, c])
        vals.append(picked[r, c])
    rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.empty(0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(num_rows, num_cols))


def _symmetrize(adjacency: sp.csr_matrix) -> sp.csr_matrix:
    return adjacency.maximum(adjacency.T).tocsr()


def build_iis_graph(pruned: np.ndarray, config: GraphConfig, modality_id: str = "v") -> SparseItemGraph:
    """Top-k of a pruned similarity matrix with weight 1; the self entry takes one slot"""
    adjacency = topk_rows(pruned, config.k)
    adjacency.data[:] = 1.0
    if config.symmetrize:
        adjacency = _symmetrize(adjacency)
    adjacency.sort_indices()
    return SparseItemGraph(modality_id=modality_id, adjacency=adjacency, kind="semantic")


def cooccurrence_counts(dataset: InteractionDataset) -> sp.csr_matrix:
    """Users sharing each item pair in train, diagonal excluded"""
    interactions = dataset.interaction_matrix("train")
    interactions.data[:] = 1.0
    counts = (interactions.T @ interactions).tocsr()
    counts.setdiag(0)
    counts.eliminate_zeros()
    return counts


def build_iib_graph(dataset: InteractionDataset, config: GraphConfig) -> SparseItemGraph:
    """Co-occurrence graph: counts >= xi_b, top-k per row by count, raw counts, unit diagonal"""
    counts = cooccurrence_counts(dataset)
    counts.data[counts.data < config.xi_b] = 0
    counts.eliminate_zeros()

    rows, cols, vals = [], [], []
    for i in range(counts.shape[0]):
        start, end = counts.indptr[i], counts.indptr[i + 1]
        idx = counts.indices[start:end]
        data = counts.data[start:end]
        order = np.lexsort((idx, -data))[:config.k]
        rows.append(np.full(len(order), i))
        cols.append(idx[order])
        vals.append(data[order])
    num_items = dataset.num_items
    adjacency = sp.csr_matrix(
        (np.concatenate(vals + [np.ones(num_items)]).astype(np.float64),
         (np.concatenate(rows + [np.arange(num_items)]), np.concatenate(cols + [np.arange(num_items)]))),
        shape=(num_items, num_items),
    )
    if config.symmetrize:
        adjacency = _symmetrize(adjacency)
    adjacency.sort_indices()
    return SparseItemGraph(modality_id=BEHAVIOR_GRAPH, adjacency=adjacency, kind="behavior")


def symmetric_normalize(matrix: sp.spmatrix) -> sp.csr_matrix:
    """w_ij / (sqrt(deg_i) * sqrt(deg_j)) with weighted row degrees; degree 0 stays 0"""
    matrix = sp.csr_matrix(matrix, dtype=np.float64)
    degree = np.asarray(matrix.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degree)
    np.power(degree, -0.5, out=inv_sqrt, where=degree > 0)
    scale = sp.diags(inv_sqrt)
    normalized = (scale @ matrix @ scale).tocsr()
    normalized.sort_indices()
    return normalized


def normalize_adjacency(graph: SparseItemGraph) -> SparseItemGraph:
    return replace(graph, normalized=symmetric_normalize(graph.adjacency))


def _nonzero_offdiag(matrix: np.ndarray) -> int:
    return int(np.count_nonzero(matrix) - np.count_nonzero(np.diag(matrix)))


def build_item_graphs(
    dataset: InteractionDataset,
    features: Sequence[ModalityFeatures],
    config: GraphConfig,
) -> Tuple[Dict[str, SparseItemGraph], pd.DataFrame]:
    """Build, normalize and report every item graph; content modalities first, then c"""
    for feat in features:
        if feat.num_items != dataset.num_items:
            raise DimensionError(
                f"features '{feat.modality_id}' have {feat.num_items} rows, dataset has {dataset.num_items} items"
            )

    stats: Dict[str, Dict] = {}
    similarities = {}
    for feat in features:
        raw = modality_similarity(feat)
        pruned = mean_threshold_prune(raw) if config.enable_mean_prune else raw
        similarities[feat.modality_id] = pruned
        stats[feat.modality_id] = {
            "kind": "semantic",
            "mean_similarity": float(raw.mean()),
            "offdiag_entries": _nonzero_offdiag(raw),
            "after_mean_prune": _nonzero_offdiag(pruned),
        }
    if config.enable_consistency_prune and similarities:
        similarities = consistency_prune(similarities)

    graphs: Dict[str, SparseItemGraph] = {}
    for modality_id, pruned in similarities.items():
        stats[modality_id]["after_consistency_prune"] = _nonzero_offdiag(pruned)
        graph = build_iis_graph(pruned, config, modality_id)
        graphs[modality_id] = normalize_adjacency(graph)
        stats[modality_id]["edges"] = graph.num_edges
        logger.info(f"Built semantic graph '{modality_id}': {graph.num_edges} edges")

    if config.build_behavior_graph:
        counts = cooccurrence_counts(dataset)
        graph = build_iib_graph(dataset, config)
        graphs[BEHAVIOR_GRAPH] = normalize_adjacency(graph)
        stats[BEHAVIOR_GRAPH] = {
            "kind": "behavior",
            "offdiag_entries": int(counts.nnz),
            "after_threshold": int(np.count_nonzero(counts.data >= config.xi_b)),
            "edges": graph.num_edges,
        }
        logger.info(f"Built behavior graph: {graph.num_edges} edges (xi_b={config.xi_b})")

    frame = pd.DataFrame([dict(graph=m, **values) for m, values in stats.items()])
    return graphs, frame


def save_graphs(graphs: Mapping[str, SparseItemGraph], out_dir, config: GraphConfig,
                stats: Optional[pd.DataFrame] = None) -> Path:
    """One `graph_<m>.tsv` edge list per graph plus graphs.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for modality_id, graph in graphs.items():
        write_edge_list(out_dir / f"graph_{modality_id}.tsv", graph.adjacency)
    write_sidecar(out_dir / GRAPHS_SIDECAR, {
        "num_items": next(iter(graphs.values())).num_items if graphs else 0,
        "graphs": [{"modality_id": m, "kind": g.kind, "edges": g.num_edges} for m, g in graphs.items()],
        "config": config.model_dump(),
        "stats": [] if stats is None else stats.to_dict(orient="records"),
    })
    if stats is not None:
        stats.to_csv(out_dir / "graph_stats.csv", index=False)
    return out_dir


def load_graphs(graph_dir, num_items: int) -> Tuple[Dict[str, SparseItemGraph], Dict]:
    """Read graphs written by save_graphs and renormalize them"""
    graph_dir = Path(graph_dir)
    sidecar = read_sidecar(graph_dir / GRAPHS_SIDECAR)
    if not sidecar:
        raise PreconditionError(f"{graph_dir} has no {GRAPHS_SIDECAR}; run build-graphs first")
    if sidecar.get("num_items") != num_items:
        raise DimensionError(f"graphs cover {sidecar.get('num_items')} items, dataset has {num_items}")
    graphs = {}
    for entry in sidecar["graphs"]:
        adjacency = read_edge_list(graph_dir / f"graph_{entry['modality_id']}.tsv", num_items)
        graph = SparseItemGraph(modality_id=entry["modality_id"], adjacency=adjacency, kind=entry["kind"])
        graphs[graph.modality_id] = normalize_adjacency(graph)
    return graphs, sidecar
