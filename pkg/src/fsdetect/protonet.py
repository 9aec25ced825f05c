"""Metric-space core: class prototypes, squared-Euclidean softmax classification,
and the episodic loss with gradients through both query and support embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .embedding import EmbeddingNetwork, backward, forward
from .errors import IngestionError, InputError, StateError

REGISTRY_VERSION = 1


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prototype:
    class_id: int
    kind: str                 # "real" | "fake"
    vector: np.ndarray        # float64, shape (M,)
    support_count: int
    name: str = ""

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise InputError("prototype vector must be 1-D")
        if not np.isfinite(vec).all():
            raise InputError(f"prototype for class {self.class_id} is not finite")
        if self.support_count < 1:
            raise InputError("support_count must be >= 1")
        if self.kind not in ("real", "fake"):
            raise InputError(f"kind must be 'real' or 'fake', got {self.kind!r}")
        object.__setattr__(self, "vector", vec)


@dataclass
class PrototypeRegistry:
    prototypes: list
    embedding_dim: int
    provenance: str           # "few-shot" | "zero-shot"
    checkpoint_id: str = ""

    def __post_init__(self):
        ids = [p.class_id for p in self.prototypes]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate class ids in registry")
        for p in self.prototypes:
            if p.vector.shape != (self.embedding_dim,):
                raise InputError(
                    f"prototype {p.class_id} has dim {p.vector.shape[0]}, "
                    f"registry says {self.embedding_dim}")

    def __len__(self):
        return len(self.prototypes)

    def kinds(self):
        return [p.kind for p in self.prototypes]

    def class_ids(self):
        return [p.class_id for p in self.prototypes]

    def matrix(self) -> np.ndarray:
        return np.stack([p.vector for p in self.prototypes])


@dataclass(frozen=True)
class ClassProbabilities:
    class_ids: tuple
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (len(self.class_ids),):
            raise InputError("probability vector length must match class_ids")
        if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
            raise InputError("probabilities must be finite and in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InputError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probabilities", p)

    def p_of(self, class_id: int) -> float:
        return float(self.probabilities[self.class_ids.index(class_id)])

    def predicted_class(self) -> int:
        """Highest-probability class; exact ties go to the lowest class id."""
        best = self.probabilities.max()
        return min(cid for cid, p in zip(self.class_ids, self.probabilities) if p == best)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compute_prototype(embeddings, class_id: int, kind: str, name: str = "") -> Prototype:
    """Elementwise mean of the embeddings, summed in ascending sample order."""
    try:
        arr = np.asarray(embeddings, dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"embeddings have mixed dimensions: {exc}") from exc
    if arr.size == 0:
        raise InputError("cannot build a prototype from an empty embedding list")
    if arr.ndim != 2:
        raise InputError("embeddings must share one dimension")
    return Prototype(class_id=class_id, kind=kind, vector=arr.mean(axis=0),
                     support_count=arr.shape[0], name=name)


def sq_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def probabilities_from_distances(distances) -> np.ndarray:
    """softmax(-d) with min-distance subtraction so huge distances cannot overflow."""
    d = np.asarray(distances, dtype=np.float64)
    z = np.exp(-(d - d.min(axis=-1, keepdims=True)))
    return z / z.sum(axis=-1, keepdims=True)


def classify(query_embedding, registry: PrototypeRegistry) -> ClassProbabilities:
    """Distance-softmax class posterior of one query against a registry."""
    if len(registry) == 0:
        raise StateError("cannot classify against an empty registry")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (registry.embedding_dim,):
        raise InputError(
            f"query has dim {q.shape}, registry expects ({registry.embedding_dim},)")
    d = ((registry.matrix() - q) ** 2).sum(axis=1)
    return ClassProbabilities(tuple(registry.class_ids()), probabilities_from_distances(d))


def classify_batch(query_embeddings, registry: PrototypeRegistry):
    """Vectorized classify: returns (probabilities (B, N), nearest class id per row).

    Nearest = argmin distance with exact ties broken by lowest class id; identical
    to scanning the registry linearly.
    """
    if len(registry) == 0:
        raise StateError("cannot classify against an empty registry")
    q = np.asarray(query_embeddings, dtype=np.float64)
    protos = registry.matrix()
    d = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    probs = probabilities_from_distances(d)
    ids = np.asarray(registry.class_ids())
    order = np.argsort(ids, kind="stable")
    nearest = ids[order][np.argmin(d[:, order], axis=1)]
    return probs, nearest


# ---------------------------------------------------------------------------
# episodic loss
# ---------------------------------------------------------------------------

def prototypical_loss(support: np.ndarray, query: np.ndarray):
    """Episode loss from embeddings alone.

    support: (N_c, N_s, M), query: (N_c, N_q, M), grouped so that query class k
    is scored against prototypes built from support class k. Returns
    (J, grad_support, grad_query) in float64. J = mean negative log-probability
    of the true class over all queries; prototypes are support means, so the
    gradient has a support-path term (scaled by 1/N_s) next to the query term.
    """
    s = np.asarray(support, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if s.ndim != 3 or q.ndim != 3 or s.shape[0] != q.shape[0] or s.shape[2] != q.shape[2]:
        raise InputError("support/query must be (N_c, N_s, M) and (N_c, N_q, M)")
    n_c, n_s, m = s.shape
    n_q = q.shape[1]
    if n_c < 1 or n_s < 1 or n_q < 1:
        raise InputError("episode must have at least one class, support, and query")

    protos = s.mean(axis=1)                                   # (Nc, M)
    diff = q[:, :, None, :] - protos[None, None, :, :]        # (Nc, Nq, Nc, M)
    d = np.einsum("cqkm,cqkm->cqk", diff, diff)               # (Nc, Nq, Nc)

    logits = -d
    shift = logits.max(axis=-1, keepdims=True)
    logz = shift + np.log(np.exp(logits - shift).sum(axis=-1, keepdims=True))
    logp = logits - logz                                      # (Nc, Nq, Nc)
    eye = np.eye(n_c)
    loss = -(logp * eye[:, None, :]).sum() / (n_c * n_q)

    # dJ/dd[c,q,k] = (1[k == c] - p[c,q,k]) / (Nc * Nq)
    p = np.exp(logp)
    gd = (eye[:, None, :] - p) / (n_c * n_q)
    grad_query = 2.0 * np.einsum("cqk,cqkm->cqm", gd, diff)
    grad_proto = -2.0 * np.einsum("cqk,cqkm->km", gd, diff)
    grad_support = np.repeat(grad_proto[:, None, :] / n_s, n_s, axis=1)
    return float(loss), grad_support, grad_query


def episode_loss(net: EmbeddingNetwork, episode):
    """Loss and flat parameter gradient for one episode (single forward/backward)."""
    sup = np.asarray(episode.support)
    qry = np.asarray(episode.query)
    if sup.ndim < 3 or qry.ndim < 3:
        raise InputError("episode support/query must be (N_c, N, *input_shape)")
    n_c, n_s = sup.shape[:2]
    n_q = qry.shape[1]
    if qry.shape[0] != n_c:
        raise InputError("support and query must cover the same classes")
    if n_c < 1 or n_s < 1 or n_q < 1:
        raise InputError("degenerate episode")

    batch = np.concatenate([
        sup.reshape(n_c * n_s, *sup.shape[2:]),
        qry.reshape(n_c * n_q, *qry.shape[2:]),
    ])
    emb, trace = forward(net, batch, keep_trace=True)
    emb64 = emb.astype(np.float64)
    m = net.embedding_dim
    loss, g_sup, g_qry = prototypical_loss(
        emb64[: n_c * n_s].reshape(n_c, n_s, m),
        emb64[n_c * n_s:].reshape(n_c, n_q, m),
    )
    emb_grads = np.concatenate([
        g_sup.reshape(n_c * n_s, m),
        g_qry.reshape(n_c * n_q, m),
    ]).astype(net.dtype)
    return loss, backward(net, trace, emb_grads)


# ---------------------------------------------------------------------------
# registry persistence (UTF-8 JSON, vectors printed with 17 significant digits)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_registry(registry: PrototypeRegistry, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "{",
        f'  "version": {REGISTRY_VERSION},',
        f'  "embedding_dim": {registry.embedding_dim},',
        f'  "checkpoint_id": {json.dumps(registry.checkpoint_id)},',
        f'  "provenance": {json.dumps(registry.provenance)},',
        '  "prototypes": [',
    ]
    for i, p in enumerate(registry.prototypes):
        vec = ", ".join(_fmt(v) for v in p.vector)
        tail = "," if i + 1 < len(registry.prototypes) else ""
        lines.append(
            f'    {{"class_id": {p.class_id}, "name": {json.dumps(p.name)}, '
            f'"kind": {json.dumps(p.kind)}, "support_count": {p.support_count}, '
            f'"vector": [{vec}]}}{tail}'
        )
    lines += ["  ]", "}", ""]
    path.write_text("\n".join(lines), encoding="utf-8")


def load_registry(path) -> PrototypeRegistry:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IngestionError(f"cannot read registry {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("version") != REGISTRY_VERSION:
        raise IngestionError(f"{path}: unsupported registry version {doc.get('version')!r}")
    try:
        protos = [
            Prototype(class_id=int(e["class_id"]), kind=e["kind"],
                      vector=np.asarray(e["vector"], dtype=np.float64),
                      support_count=int(e["support_count"]), name=e.get("name", ""))
            for e in doc["prototypes"]
        ]
        return PrototypeRegistry(
            prototypes=protos,
            embedding_dim=int(doc["embedding_dim"]),
            provenance=doc.get("provenance", ""),
            checkpoint_id=doc.get("checkpoint_id", ""),
        )
    except (KeyError, TypeError, ValueError, InputError) as exc:
        raise IngestionError(f"{path}: bad registry contents: {exc}") from exc
