"""
model.py - Trainable tables, backbone forward pass and item-graph fusion
Users come only from the backbone (MF tables or LightGCN over the user-item
graph). Items additionally propagate the ID table over every item graph and
fuse: t = (h_id + mean_m h_m) / 2.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn

from .dataset import InteractionDataset
from .errors import DimensionError, PreconditionError
from .graphs import SparseItemGraph, sparse_to_torch, symmetric_normalize
from .storage import read_matrix, read_sidecar, write_matrix, write_sidecar

logger = logging.getLogger(__name__)

CHECKPOINT_SIDECAR = "checkpoint.json"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class DerivedEmbeddings:
    """One forward pass: backbone outputs, per-graph item embeddings and the fused items"""
    user: torch.Tensor
    h_id: torch.Tensor
    h_m: Dict[str, torch.Tensor] = field(default_factory=dict)
    h_mm: Optional[torch.Tensor] = None
    t: Optional[torch.Tensor] = None

    @property
    def modality_ids(self):
        return list(self.h_m)


def build_interaction_adjacency(dataset: InteractionDataset) -> sp.csr_matrix:
    """Symmetric-normalized (|U|+|I|) square bipartite adjacency from train pairs"""
    n_users, n_items = dataset.num_users, dataset.num_items
    interactions = dataset.interaction_matrix("train")
    bipartite = sp.bmat([[None, interactions], [interactions.T, None]], format="csr", dtype=np.float64)
    if bipartite.shape != (n_users + n_items, n_users + n_items):
        raise DimensionError(f"bipartite adjacency has shape {bipartite.shape}")
    return symmetric_normalize(bipartite)


def itemgraph_propagate(table: torch.Tensor, graph: torch.Tensor, layers: int) -> torch.Tensor:
    """h(l+1) = A h(l) starting from the table; returns the last layer only"""
    hidden = table
    for _ in range(layers):
        hidden = torch.sparse.mm(graph, hidden)
    return hidden


def fuse_item(h_id: torch.Tensor, h_m: Mapping[str, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """h_mm = mean over graphs, t = (h_id + h_mm) / 2"""
    if not h_m:
        raise PreconditionError("fuse_item needs at least one item-graph embedding")
    for modality_id, tensor in h_m.items():
        if tensor.shape != h_id.shape:
            raise DimensionError(f"h_{modality_id} has shape {tuple(tensor.shape)}, h_id has {tuple(h_id.shape)}")
    # sorted keys keep the summation order independent of map order
    h_mm = torch.stack([h_m[m] for m in sorted(h_m)], dim=0).mean(dim=0)
    return h_mm, (h_id + h_mm) / 2


def score(user: torch.Tensor, item: torch.Tensor) -> torch.Tensor:
    """Row-wise inner product of matched user and item rows"""
    return (user * item).sum(dim=-1)


def modality_score(user: torch.Tensor, h_item: torch.Tensor) -> torch.Tensor:
    return (user * h_item).sum(dim=-1)


class DamrsModel(nn.Module):
    def __init__(
        self,
        num_users: int,
        num_items: int,
        dim: int = 64,
        backbone: str = "lightgcn",
        backbone_layers: int = 2,
        layers: int = 2,
        interaction_adj: Optional[sp.spmatrix] = None,
        item_graphs: Optional[Mapping[str, SparseItemGraph]] = None,
        per_modality_tables: bool = False,
        dtype: str = "float32",
    ):
        super().__init__()
        if backbone not in ("mf", "lightgcn"):
            raise ValueError(f"Unknown backbone '{backbone}'")
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.backbone = backbone
        self.backbone_layers = backbone_layers
        self.layers = layers
        self.per_modality_tables = per_modality_tables
        self.torch_dtype = DTYPES[dtype]

        self.user_embedding = nn.Parameter(torch.empty(num_users, dim, dtype=self.torch_dtype))
        self.item_embedding = nn.Parameter(torch.empty(num_items, dim, dtype=self.torch_dtype))

        item_graphs = dict(item_graphs or {})
        self.modality_ids = list(item_graphs)
        self.modality_embeddings = nn.ParameterDict()
        if per_modality_tables:
            for modality_id in self.modality_ids:
                self.modality_embeddings[modality_id] = nn.Parameter(
                    torch.empty(num_items, dim, dtype=self.torch_dtype)
                )

        self._graphs = {m: g.to_torch(self.torch_dtype) for m, g in item_graphs.items()}
        self._interaction_adj = None
        if backbone == "lightgcn" and backbone_layers > 0:
            if interaction_adj is None:
                raise PreconditionError("LightGCN backbone needs the interaction adjacency")
            self._interaction_adj = sparse_to_torch(interaction_adj, self.torch_dtype)

    @property
    def uses_item_graphs(self) -> bool:
        return bool(self._graphs)

    def init_parameters(self, seed: int = 0) -> "DamrsModel":
        """Xavier-uniform init of every table, deterministic under seed"""
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for _, param in sorted(self.named_parameters()):
                nn.init.xavier_uniform_(param, generator=generator)
        return self

    def backbone_forward(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """MF: the tables verbatim; LightGCN: mean of layers 0..L over the bipartite graph"""
        if self._interaction_adj is None:
            return self.user_embedding, self.item_embedding
        ego = torch.cat([self.user_embedding, self.item_embedding], dim=0)
        all_embedding = [ego]
        for _ in range(self.backbone_layers):
            ego = torch.sparse.mm(self._interaction_adj, ego)
            all_embedding.append(ego)
        mean = torch.stack(all_embedding, dim=1).mean(dim=1)
        user, item = torch.split(mean, [self.num_users, self.num_items], dim=0)
        return user, item

    def forward(self) -> DerivedEmbeddings:
        user, h_id = self.backbone_forward()
        if not self._graphs:
            return DerivedEmbeddings(user=user, h_id=h_id, t=h_id)

        h_m = {}
        for modality_id, graph in self._graphs.items():
            table = self.modality_embeddings[modality_id] if self.per_modality_tables else self.item_embedding
            h_m[modality_id] = itemgraph_propagate(table, graph, self.layers)
        h_mm, t = fuse_item(h_id, h_m)
        return DerivedEmbeddings(user=user, h_id=h_id, h_m=h_m, h_mm=h_mm, t=t)

    def ego_tables(self) -> Dict[str, torch.Tensor]:
        """Parameter tables keyed by the row space they index"""
        tables = {"user": self.user_embedding, "item": self.item_embedding}
        for modality_id, param in self.modality_embeddings.items():
            tables[f"item_{modality_id}"] = param
        return tables

    @torch.no_grad()
    def representations(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """(u, t) used for ranking"""
        derived = self.forward()
        return derived.user, derived.t


@dataclass
class ScoringTables:
    """Frozen (u, t) pair restored from a checkpoint"""
    user: torch.Tensor
    item: torch.Tensor

    def representations(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.user, self.item


def build_model(
    dataset: InteractionDataset,
    graphs: Optional[Mapping[str, SparseItemGraph]],
    dim: int = 64,
    backbone: str = "lightgcn",
    backbone_layers: int = 2,
    layers: int = 2,
    per_modality_tables: bool = False,
    dtype: str = "float32",
    seed: int = 0,
) -> DamrsModel:
    interaction_adj = build_interaction_adjacency(dataset) if backbone == "lightgcn" else None
    model = DamrsModel(
        num_users=dataset.num_users,
        num_items=dataset.num_items,
        dim=dim,
        backbone=backbone,
        backbone_layers=backbone_layers,
        layers=layers,
        interaction_adj=interaction_adj,
        item_graphs=graphs,
        per_modality_tables=per_modality_tables,
        dtype=dtype,
    )
    return model.init_parameters(seed)


def save_checkpoint(model: DamrsModel, out_dir, metadata: Optional[Dict] = None) -> Path:
    """One matrix file per table, the ranking representations and checkpoint.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, table in model.ego_tables().items():
        write_matrix(out_dir / f"{name}.bin", table.detach().cpu().numpy())
    user, item = model.representations()
    write_matrix(out_dir / "user_final.bin", user.cpu().numpy())
    write_matrix(out_dir / "item_final.bin", item.cpu().numpy())
    write_sidecar(out_dir / CHECKPOINT_SIDECAR, dict(
        metadata or {},
        num_users=model.num_users,
        num_items=model.num_items,
        dim=model.dim,
        backbone=model.backbone,
        backbone_layers=model.backbone_layers,
        layers=model.layers,
        modality_ids=model.modality_ids,
        per_modality_tables=model.per_modality_tables,
        tables=sorted(model.ego_tables()),
    ))
    return out_dir


def load_checkpoint(checkpoint_dir) -> Tuple[ScoringTables, Dict]:
    checkpoint_dir = Path(checkpoint_dir)
    metadata = read_sidecar(checkpoint_dir / CHECKPOINT_SIDECAR)
    if not metadata:
        raise PreconditionError(f"{checkpoint_dir} has no {CHECKPOINT_SIDECAR}; run train first")
    user = torch.from_numpy(read_matrix(checkpoint_dir / "user_final.bin"))
    item = torch.from_numpy(read_matrix(checkpoint_dir / "item_final.bin"))
    if user.shape != (metadata["num_users"], metadata["dim"]) or item.shape != (metadata["num_items"], metadata["dim"]):
        raise DimensionError(f"checkpoint tables in {checkpoint_dir} do not match checkpoint.json")
    return ScoringTables(user=user, item=item), metadata


def load_model_tables(model: DamrsModel, checkpoint_dir) -> DamrsModel:
    """Copy the saved parameter tables into a freshly built model"""
    checkpoint_dir = Path(checkpoint_dir)
    with torch.no_grad():
        for name, table in model.ego_tables().items():
            values = torch.from_numpy(read_matrix(checkpoint_dir / f"{name}.bin"))
            if values.shape != table.shape:
                raise DimensionError(f"{name}.bin has shape {tuple(values.shape)}, model expects {tuple(table.shape)}")
            table.copy_(values.to(table.dtype))
    return model
