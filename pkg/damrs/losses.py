"""
losses.py - Ranking, denoising and alignment objectives
Every term is a torch expression; reverse-mode autograd gives the exact
gradient of the composed objective. Set selections (graded item sets, the
contradiction gate) are made without gradient and can be replayed verbatim.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F

from .config import AlignConfig, DenoiseConfig, TrainConfig
from .errors import ContractError
from .model import DerivedEmbeddings, score

logger = logging.getLogger(__name__)

# single floor for every ln argument and probability
LN_FLOOR = 1e-12
LOG_FLOOR = math.log(LN_FLOOR)
# stands in for -inf in masked log-sum-exp so empty masks keep finite gradients
MASKED_LOGIT = -1e30


class TrainingTriple(NamedTuple):
    u: int
    i: int
    j: int


@dataclass
class TripleBatch:
    users: torch.Tensor
    pos: torch.Tensor
    neg: torch.Tensor

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @classmethod
    def from_triples(cls, triples: List[TrainingTriple]) -> "TripleBatch":
        as_tensor = lambda k: torch.tensor([t[k] for t in triples], dtype=torch.long)
        return cls(users=as_tensor(0), pos=as_tensor(1), neg=as_tensor(2))


@dataclass
class ObjectiveSpec:
    """Which terms a batch objective evaluates, resolved from a TrainConfig"""
    lambda_theta: float = 1e-4
    use_dbpr: bool = False
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "ObjectiveSpec":
        return cls(
            lambda_theta=config.lambda_theta,
            use_dbpr=config.variant_spec().dbpr,
            denoise=config.denoise_config(),
            align=config.align_config(),
        )


@dataclass
class GradedSets:
    """Per modality: R (multi-modal similar) and T (single-modal similar) columns, N as a pool mask"""
    anchors: torch.Tensor
    pool: torch.Tensor
    similar: Dict[str, torch.Tensor]
    single: Dict[str, torch.Tensor]
    dissimilar: Dict[str, torch.Tensor]


@dataclass
class Selections:
    gate: Optional[torch.Tensor] = None
    sets: Optional[GradedSets] = None
    weights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


@dataclass
class LossBreakdown:
    ranking: torch.Tensor
    regularizer: torch.Tensor
    au: torch.Tensor
    ai_mm: torch.Tensor
    ai_s: torch.Tensor
    total: torch.Tensor
    selections: Selections = field(default_factory=Selections)

    def as_floats(self) -> Dict[str, float]:
        return {
            "ranking": float(self.ranking.detach()),
            "regularizer": float(self.regularizer.detach()),
            "au": float(self.au.detach()),
            "ai_mm": float(self.ai_mm.detach()),
            "ai_s": float(self.ai_s.detach()),
            "total": float(self.total.detach()),
        }


# Ranking terms

def regularizer(ego_tables: Dict[str, torch.Tensor], batch: TripleBatch) -> torch.Tensor:
    """Sum of squared norms of the ego rows each triple touches, divided by |B|"""
    total = ego_tables["user"][batch.users].pow(2).sum()
    for name, table in ego_tables.items():
        if name.startswith("item"):
            total = total + table[batch.pos].pow(2).sum() + table[batch.neg].pow(2).sum()
    return total / max(len(batch), 1)


def pair_margin(derived: DerivedEmbeddings, batch: TripleBatch) -> torch.Tensor:
    user = derived.user[batch.users]
    return score(user, derived.t[batch.pos]) - score(user, derived.t[batch.neg])


def bpr_loss(derived: DerivedEmbeddings, batch: TripleBatch) -> torch.Tensor:
    """-mean ln sigmoid(u^T (t_i - t_j))"""
    return -F.logsigmoid(pair_margin(derived, batch)).mean()


def reliability_terms(user: torch.Tensor, h_pos: Dict[str, torch.Tensor]):
    """(ln mu, s^2, max_m y^m) per triple from the modality scores of the positive item"""
    if not h_pos:
        raise ContractError("reliability needs at least one modality embedding")
    scores = torch.stack([(user * h_pos[m]).sum(dim=-1) for m in sorted(h_pos)], dim=0)
    sig = torch.sigmoid(scores)
    log_mu = torch.logsumexp(F.logsigmoid(scores), dim=0) - math.log(scores.shape[0])
    s2 = sig.var(dim=0, unbiased=False)
    return log_mu, s2, scores.max(dim=0).values


def reliability_f(user: torch.Tensor, h_pos: Dict[str, torch.Tensor], config: DenoiseConfig) -> torch.Tensor:
    """f = mu^alpha * exp(-s^2)^beta with population variance over the graphs"""
    log_mu, s2, _ = reliability_terms(user, h_pos)
    if config.f_override is not None:
        return torch.full_like(log_mu, config.f_override)
    return torch.exp(config.alpha * log_mu - config.beta * s2)


def negative_preference(
    user: torch.Tensor,
    t_neg: torch.Tensor,
    users: torch.Tensor,
    per_user: bool = False,
) -> torch.Tensor:
    """Mean sigmoid(u^T t_j) over batch negatives, or over the user's own negatives"""
    if t_neg.shape[0] == 0:
        raise ContractError("contradiction weight needs at least one negative in the batch")
    if not per_user:
        return torch.sigmoid(user @ t_neg.T).mean(dim=1)
    own = torch.sigmoid((user * t_neg).sum(dim=-1))
    _, inverse = torch.unique(users, return_inverse=True)
    sums = torch.zeros(int(inverse.max()) + 1, dtype=own.dtype).index_add(0, inverse, own)
    counts = torch.zeros_like(sums).index_add(0, inverse, torch.ones_like(own))
    return (sums / counts)[inverse]


def contradiction_g(
    max_score: torch.Tensor,
    y_neg: torch.Tensor,
    log_mu: torch.Tensor,
    config: DenoiseConfig,
    gate: Optional[torch.Tensor] = None,
):
    """g = sigmoid(max_m y^m - y_neg)^gamma where y_neg > mu, else 0; returns (g, gate)"""
    if gate is None:
        gate = (y_neg > torch.exp(log_mu)).detach()
    if config.g_override is not None:
        return torch.full_like(max_score, config.g_override), gate
    g = torch.sigmoid(max_score - y_neg).pow(config.gamma)
    return torch.where(gate, g, torch.zeros_like(g)), gate


def dbpr_loss(
    derived: DerivedEmbeddings,
    batch: TripleBatch,
    config: DenoiseConfig,
    gate: Optional[torch.Tensor] = None,
    frozen_weights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
):
    """
    -mean ln(f sigmoid(x) + g (1 - sigmoid(x))), floored at 1e-12.
    Returns (loss, gate, (ln f, g)) with the weights detached. With
    stop_gradient_weights, `frozen_weights` replays earlier (ln f, g) values.
    """
    user = derived.user[batch.users]
    margin = score(user, derived.t[batch.pos]) - score(user, derived.t[batch.neg])
    h_pos = {m: h[batch.pos] for m, h in derived.h_m.items()}
    log_mu, s2, max_score = reliability_terms(user, h_pos)

    if config.f_override is not None:
        log_f = torch.full_like(log_mu, math.log(config.f_override))
    else:
        log_f = config.alpha * log_mu - config.beta * s2
    y_neg = negative_preference(user, derived.t[batch.neg], batch.users, config.per_user_negatives)
    g, gate = contradiction_g(max_score, y_neg, log_mu, config, gate)
    if config.stop_gradient_weights:
        log_f, g = frozen_weights if frozen_weights is not None else (log_f.detach(), g.detach())

    reliable = log_f + F.logsigmoid(margin)
    # log g only where g > 0; the placeholder 1 keeps the unused branch finite
    positive = g > 0
    log_g = torch.log(torch.where(positive, g, torch.ones_like(g)))
    mixed = torch.where(positive, torch.logaddexp(reliable, log_g + F.logsigmoid(-margin)), reliable)
    return -torch.clamp(mixed, min=LOG_FLOOR).mean(), gate, (log_f.detach(), g.detach())


# User alignment

def user_pref_distributions(user: torch.Tensor, h_mm: torch.Tensor, h_id: torch.Tensor):
    """Softmax over items of u^T h_mm and u^T h_id; rows sum to 1"""
    return torch.softmax(user @ h_mm.T, dim=-1), torch.softmax(user @ h_id.T, dim=-1)


def align_user_loss(p_mm: torch.Tensor, p_id: torch.Tensor) -> torch.Tensor:
    """Sum over rows of KL(P_mm || P_id) + KL(P_id || P_mm)"""
    log_mm = torch.log(torch.clamp(p_mm, min=LN_FLOOR))
    log_id = torch.log(torch.clamp(p_id, min=LN_FLOOR))
    return ((p_mm - p_id) * (log_mm - log_id)).sum()


# Item alignment

def _unit(h: torch.Tensor) -> torch.Tensor:
    return F.normalize(h, p=2, dim=-1)


def _stable_topk(values: torch.Tensor, k: int) -> torch.Tensor:
    order = torch.sort(values, dim=-1, descending=True, stable=True).indices
    return order[:, :k]


@torch.no_grad()
def graded_sets(
    h_m: Dict[str, torch.Tensor],
    anchors: torch.Tensor,
    pool: torch.Tensor,
    k_align: int,
) -> GradedSets:
    """
    For each anchor and modality: R = top-k of T~^m + sum_m' T~^m' (self excluded),
    T = top-k of T~^m after zeroing R, N = pool items outside R, T and the anchor.
    T~ is the row softmax of the cosine similarity matrix.
    """
    num_items = next(iter(h_m.values())).shape[0]
    k_similar = min(k_align, num_items - 1)
    k_single = min(k_align, num_items - 1 - k_similar)
    rows = torch.arange(len(anchors))

    softmaxed = {}
    for modality_id, h in h_m.items():
        unit = _unit(h)
        softmaxed[modality_id] = torch.softmax(unit[anchors] @ unit.T, dim=-1)
    shared = torch.stack(list(softmaxed.values()), dim=0).sum(dim=0)

    similar, single, dissimilar = {}, {}, {}
    for modality_id, tilde in softmaxed.items():
        ranked = tilde + shared
        ranked[rows, anchors] = -math.inf
        r_idx = _stable_topk(ranked, k_similar)

        remaining = tilde.clone()
        remaining[rows, anchors] = -math.inf
        remaining.scatter_(1, r_idx, -math.inf)
        t_idx = _stable_topk(remaining, k_single)

        taken = torch.zeros_like(tilde, dtype=torch.bool)
        taken.scatter_(1, r_idx, True)
        taken.scatter_(1, t_idx, True)
        taken[rows, anchors] = True
        similar[modality_id] = r_idx
        single[modality_id] = t_idx
        dissimilar[modality_id] = ~taken[:, pool]
    return GradedSets(anchors=anchors, pool=pool, similar=similar, single=single, dissimilar=dissimilar)


def _group_lse(anchor_unit: torch.Tensor, unit: torch.Tensor, idx: torch.Tensor, tau: float) -> torch.Tensor:
    if idx.shape[1] == 0:
        return torch.full((idx.shape[0],), MASKED_LOGIT, dtype=unit.dtype)
    logits = torch.einsum("ad,akd->ak", anchor_unit, unit[idx]) / tau
    return torch.logsumexp(logits, dim=-1)


def _masked_lse(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if logits.shape[1] == 0:
        return torch.full((logits.shape[0],), MASKED_LOGIT, dtype=logits.dtype)
    return torch.logsumexp(torch.where(mask, logits, torch.full_like(logits, MASKED_LOGIT)), dim=-1)


def contrastive_term(positive_lse: torch.Tensor, negative_lse: torch.Tensor) -> torch.Tensor:
    """-ln(sum_pos phi / (sum_pos phi + sum_neg phi)) from the two log-sums"""
    return -(positive_lse - torch.logaddexp(positive_lse, negative_lse))


def align_item_losses(
    h_m: Dict[str, torch.Tensor],
    sets: GradedSets,
    tau: float,
    strategy: str = "AI",
):
    """Graded contrastive losses summed over anchors and modalities; returns (mm, s)"""
    zero = next(iter(h_m.values())).new_zeros(())
    loss_mm, loss_s = zero, zero
    for modality_id in sorted(h_m):
        unit = _unit(h_m[modality_id])
        anchor_unit = unit[sets.anchors]
        r_idx, t_idx = sets.similar[modality_id], sets.single[modality_id]
        lse_r = _group_lse(anchor_unit, unit, r_idx, tau)
        lse_t = _group_lse(anchor_unit, unit, t_idx, tau)
        lse_n = _masked_lse(anchor_unit @ unit[sets.pool].T / tau, sets.dissimilar[modality_id])
        has_r, has_t = r_idx.shape[1] > 0, t_idx.shape[1] > 0

        if strategy == "SP":
            if not (has_r or has_t):
                logger.warning(f"No positives for modality '{modality_id}'; contrastive term skipped")
                continue
            loss_mm = loss_mm + contrastive_term(torch.logaddexp(lse_r, lse_t), lse_n).sum()
            continue

        if has_r:
            loss_mm = loss_mm + contrastive_term(lse_r, torch.logaddexp(lse_t, lse_n)).sum()
        else:
            logger.warning(f"Empty multi-modal positive set for modality '{modality_id}'; skipped")
        if strategy == "AI":
            if has_t:
                loss_s = loss_s + contrastive_term(lse_t, lse_n).sum()
            else:
                logger.warning(f"Empty single-modal positive set for modality '{modality_id}'; skipped")
    return loss_mm, loss_s


def total_loss(ranking, au, ai_mm, ai_s, lambda1: float, lambda2: float):
    """L = ranking + lambda1 * AU + lambda2 * (AI-MM + AI-S)"""
    return ranking + lambda1 * au + lambda2 * (ai_mm + ai_s)


def batch_objective(
    derived: DerivedEmbeddings,
    batch: TripleBatch,
    ego_tables: Dict[str, torch.Tensor],
    spec: ObjectiveSpec,
    item_subset: Optional[torch.Tensor] = None,
    selections: Optional[Selections] = None,
) -> LossBreakdown:
    """Evaluate every active term on one batch of triples"""
    selections = selections or Selections()
    zero = derived.user.new_zeros(())

    if spec.use_dbpr:
        ranking, gate, weights = dbpr_loss(derived, batch, spec.denoise, selections.gate, selections.weights)
    else:
        ranking, gate, weights = bpr_loss(derived, batch), None, None
    reg = spec.lambda_theta * regularizer(ego_tables, batch) if spec.lambda_theta > 0 else zero

    au = zero
    if spec.align.lambda1 > 0 and derived.h_mm is not None:
        users = torch.unique(batch.users)
        h_mm, h_id = derived.h_mm, derived.h_id
        if item_subset is not None:
            h_mm, h_id = h_mm[item_subset], h_id[item_subset]
        p_mm, p_id = user_pref_distributions(derived.user[users], h_mm, h_id)
        au = align_user_loss(p_mm, p_id)

    ai_mm, ai_s, sets = zero, zero, selections.sets
    if spec.align.lambda2 > 0 and derived.h_m:
        if sets is None:
            anchors = torch.unique(batch.pos)
            pool = torch.unique(torch.cat([batch.pos, batch.neg]))
            sets = graded_sets(derived.h_m, anchors, pool, spec.align.k_align)
        ai_mm, ai_s = align_item_losses(derived.h_m, sets, spec.align.tau, spec.align.strategy)

    rec = ranking + reg
    total = total_loss(rec, au, ai_mm, ai_s, spec.align.lambda1, spec.align.lambda2)
    return LossBreakdown(
        ranking=ranking,
        regularizer=reg,
        au=au,
        ai_mm=ai_mm,
        ai_s=ai_s,
        total=total,
        selections=Selections(gate=gate, sets=sets, weights=weights),
    )
