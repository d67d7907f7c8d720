"""Adaptive adjacency built from node embeddings, plus the sampling machinery.

The adjacency is A = sigmoid(E E^T) + lambda * I, a complete weighted graph
with link probabilities off the diagonal.  Neighbor pruning keeps, for each
node i, the edges whose weight strictly exceeds

    T_i = (sum_{j != i} A_ij) / A_ii

Note the printed normalizer is the self-loop weight A_ii, not the degree;
since every off-diagonal weight is below 1 and A_ii = sigmoid(e_i.e_i) +
lambda, the candidate count is structurally capped below 1 + lambda.  Small
self-loop weights therefore give very sparse (often empty) candidate sets,
which downstream code must tolerate.

Sampling is two-level and fully deterministic: a "local" set of the top-k1
candidates by edge weight, then a "semi-global" set of the top-k2 nodes by
importance (row sum of A) drawn from the candidates of the local set, with
the node itself and its local set excluded.  Ties break toward the lower
node index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, SingularThresholdError


@dataclass
class NodeEmbeddings:
    """Learnable per-node latent vectors, shape (N, d)."""

    e: Tensor

    @classmethod
    def init(cls, n_nodes: int, dim: int, rng: np.random.Generator) -> "NodeEmbeddings":
        data = rng.standard_normal((n_nodes, dim)).astype(np.float32)
        return cls(Tensor(data, requires_grad=True))

    @property
    def n_nodes(self) -> int:
        return self.e.shape[0]


@dataclass
class AdaptiveGraph:
    """Adjacency plus the derived candidate, importance and sample structures."""

    a: Tensor
    lambda_selfloop: float
    candidate_sets: list = field(default_factory=list)
    importance: np.ndarray | None = None
    samples_local: list = field(default_factory=list)       # S_i^(1)
    samples_semiglobal: list = field(default_factory=list)  # S_i^(2)


def build_adjacency(emb: NodeEmbeddings, lam: float = 1.0) -> Tensor:
    """A = sigmoid(E E^T) + lambda * I, differentiable w.r.t. E.

    The Gram matrix is symmetrized as (M + M^T) / 2 before the sigmoid so the
    result is exactly symmetric regardless of BLAS accumulation order.
    """
    if lam < 0:
        raise ContractError(f"build_adjacency: lambda must be non-negative, got {lam}")
    e = emb.e
    gram = ag.matmul(e, ag.transpose(e, (1, 0)))
    gram = ag.scale(ag.add(gram, ag.transpose(gram, (1, 0))), 0.5)
    a = ag.sigmoid(gram)
    eye = np.eye(e.shape[0], dtype=e.data.dtype) * np.asarray(lam, dtype=e.data.dtype)
    return ag.add(a, Tensor(eye, dtype=e.data.dtype))


def _as_array(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def prune_neighbors(a) -> list:
    """Candidate sets C_i = { j != i : A_ij > T_i }, strict inequality."""
    w = _as_array(a)
    n = w.shape[0]
    if n < 2:
        raise ContractError("prune_neighbors: need at least 2 nodes")
    candidates = []
    for i in range(n):
        if w[i, i] == 0.0:
            raise SingularThresholdError(
                f"prune_neighbors: node {i} has zero self-loop weight"
            )
        off = np.delete(w[i], i)
        t_i = off.sum(dtype=np.float64) / float(w[i, i])
        keep = [j for j in range(n) if j != i and w[i, j] > t_i]
        candidates.append(keep)
    return candidates


def node_importance(a) -> np.ndarray:
    """Imp_i = full row sum of A (diagonal included)."""
    return _as_array(a).sum(axis=1)


def sample_two_level(a, candidates: list, imp: np.ndarray, k1: int, k2: int, seed: int = 0):
    """Deterministic two-level neighborhood sampling.

    Local: the top-k1 members of C_i ranked by edge weight A_ij.  Semi-global:
    the top-k2 members by importance of the pool reachable through the local
    set's own candidates, excluding i and its local set.  The seed is part of
    the signature for reproducibility bookkeeping; ranking itself is already
    deterministic with index tie-breaking.
    """
    del seed  # ranking is deterministic; kept for interface stability
    if k1 < 0 or k2 < 0:
        raise ContractError("sample_two_level: k1 and k2 must be non-negative")
    w = _as_array(a)
    n = w.shape[0]
    local, semi = [], []
    for i in range(n):
        cand = candidates[i]
        ranked = sorted(cand, key=lambda j: (-w[i, j], j))
        s1 = sorted(ranked[:k1])
        pool = set()
        for j in s1:
            pool.update(candidates[j])
        pool -= set(s1)
        pool.discard(i)
        ranked2 = sorted(pool, key=lambda j: (-imp[j], j))
        s2 = sorted(ranked2[:k2])
        local.append(s1)
        semi.append(s2)
    return local, semi


def build_graph(
    emb: NodeEmbeddings, lam: float, k1: int, k2: int, seed: int = 0
) -> AdaptiveGraph:
    """Full pipeline: adjacency, pruning, importance, two-level samples."""
    a = build_adjacency(emb, lam)
    candidates = prune_neighbors(a)
    imp = node_importance(a)
    local, semi = sample_two_level(a, candidates, imp, k1, k2, seed)
    return AdaptiveGraph(
        a=a,
        lambda_selfloop=lam,
        candidate_sets=candidates,
        importance=imp,
        samples_local=local,
        samples_semiglobal=semi,
    )


def init_live_embeddings(
    n_nodes: int, dim: int, lam: float, k1: int, k2: int, seed: int,
    max_tries: int = 200,
) -> NodeEmbeddings:
    """Seeded embedding init retried until every node gets usable samples.

    Pruning by the self-loop-normalized threshold can leave unlucky nodes with
    empty candidate sets, which silences their aggregation permanently (the
    embeddings receive no gradient, so the initial graph is the graph).  The
    retry scans deterministic sub-seeds until all nodes have at least one
    candidate and one semi-global sample, falling back to the last attempt.
    """
    emb = None
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, 1, attempt])
        emb = NodeEmbeddings(
            Tensor(rng.standard_normal((n_nodes, dim)).astype(np.float32), requires_grad=True))
        g = build_graph(emb, lam, k1, k2, seed)
        if all(len(c) >= 1 for c in g.candidate_sets) and all(
            len(s) >= 1 for s in g.samples_semiglobal
        ):
            return emb
    return emb


def padded_index_mask(sets: list, n_nodes: int):
    """Convert ragged per-node index sets into (N, kmax) index and 0/1 mask arrays.

    Empty sets pad with index 0 and mask 0; kmax is at least 1 so downstream
    gathers keep a well-formed shape.
    """
    kmax = max((len(s) for s in sets), default=0)
    kmax = max(kmax, 1)
    idx = np.zeros((len(sets), kmax), dtype=np.intp)
    valid = np.zeros((len(sets), kmax), dtype=np.float32)
    for i, s in enumerate(sets):
        for j, node in enumerate(s):
            if not 0 <= node < n_nodes:
                raise ContractError(f"padded_index_mask: node index {node} out of range")
            idx[i, j] = node
            valid[i, j] = 1.0
    return idx, valid
