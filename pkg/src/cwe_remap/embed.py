"""
Translational (TransE) embedding of the knowledge graph.

A triple (h, r, t) scores ``-||h + r - t||_p``; higher is more plausible.
Training minimises the multiclass negative log-likelihood of the true tail
against sampled tails, plus an Lq penalty on the vectors of the positive
triple, with Adam. Gradients are analytic and computed in float64.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from tqdm import tqdm

from .config import TrainingConfig
from .errors import DivergenceError, EmptyInputError, ModelFormatError, TripleValidationError, UnknownEntityError
from .kg import EntityId, KnowledgeGraph, RelationKind, Triple
from .logs import get_logger

logger = get_logger(__name__)

MAGIC = b"FXV2W1"
_HEADER = struct.Struct("<IQQB")


@dataclass
class EmbeddingModel:
    """Entity and relation vectors with their row maps.

    Rows follow ``entity_ids`` and ``relation_kinds``. Trained models hold
    float32 matrices; float64 matrices are accepted for gradient checks.
    """

    entity_ids: list[EntityId]
    relation_kinds: list[RelationKind]
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    norm_p: int = 2
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.entity_vectors.shape[0] != len(self.entity_ids):
            raise ModelFormatError("entity matrix rows do not match the entity table")
        if self.relation_vectors.shape[0] != len(self.relation_kinds):
            raise ModelFormatError("relation matrix rows do not match the relation table")
        if self.entity_vectors.shape[1] != self.relation_vectors.shape[1]:
            raise ModelFormatError("entity and relation vectors differ in dimension")
        self.entity_index = {entity: row for row, entity in enumerate(self.entity_ids)}
        self.relation_index = {relation: row for row, relation in enumerate(self.relation_kinds)}

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]

    def entity_row(self, entity: EntityId) -> int:
        try:
            return self.entity_index[entity]
        except KeyError:
            raise UnknownEntityError(f"{entity} has no embedding", entity=str(entity)) from None

    def relation_row(self, relation: RelationKind) -> int:
        try:
            return self.relation_index[relation]
        except KeyError:
            raise UnknownEntityError(f"relation {relation.value} has no embedding", entity=relation.value) from None

    def knows(self, entity: EntityId) -> bool:
        return entity in self.entity_index


@dataclass
class TripleBatch:
    """Positive triples as rows, with candidate tails; column 0 of ``tails`` is the true tail."""

    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray

    def __len__(self) -> int:
        return len(self.heads)

    def shard(self, parts: int) -> list["TripleBatch"]:
        splits = np.array_split(np.arange(len(self)), parts)
        return [TripleBatch(self.heads[s], self.relations[s], self.tails[s]) for s in splits if len(s)]


@dataclass
class Gradients:
    """Sparse gradients: summed values for each touched row."""

    entity_rows: np.ndarray
    entity: np.ndarray
    relation_rows: np.ndarray
    relation: np.ndarray

    def dense(self, model: EmbeddingModel) -> tuple[np.ndarray, np.ndarray]:
        entity = np.zeros(model.entity_vectors.shape, dtype=np.float64)
        relation = np.zeros(model.relation_vectors.shape, dtype=np.float64)
        entity[self.entity_rows] = self.entity
        relation[self.relation_rows] = self.relation
        return entity, relation


def _sum_rows(rows: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    unique, inverse = np.unique(rows, return_inverse=True)
    summed = np.zeros((len(unique), values.shape[1]), dtype=np.float64)
    np.add.at(summed, inverse.reshape(-1), values)
    return unique, summed


def _distance_and_slope(diff: np.ndarray, norm_p: int) -> tuple[np.ndarray, np.ndarray]:
    """Norm of ``diff`` over the last axis and its derivative with respect to ``diff``."""
    if norm_p == 1:
        return np.abs(diff).sum(axis=-1), np.sign(diff)
    distance = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(distance > 0, distance, 1.0)
    return distance, diff / safe[..., None]


def loss_and_gradient(
    model: EmbeddingModel,
    batch: TripleBatch,
    config: TrainingConfig,
    normalizer: int | None = None,
) -> tuple[float, Gradients]:
    """Multiclass NLL of the true tails plus the Lq penalty, with analytic gradients.

    The loss of one triple is ``logsumexp(z) - z_0`` over the scores ``z`` of
    its candidate tails. The penalty is ``reg_weight / B`` times the sum of
    ``|x|^q`` over the head, relation and true-tail vectors of the batch.

    Args:
        model: Current parameters.
        batch: Positive triples with candidate tails.
        config: Supplies ``reg_weight`` and ``reg_order``; the norm comes from the model.
        normalizer: Divisor of the summed loss; defaults to the batch size.
            Shards of one batch pass the full batch size.

    Returns:
        tuple: (loss, gradients).
    """
    scale = 1.0 / (normalizer or len(batch))
    heads = model.entity_vectors[batch.heads].astype(np.float64)
    relations = model.relation_vectors[batch.relations].astype(np.float64)
    tails = model.entity_vectors[batch.tails].astype(np.float64)

    diff = heads[:, None, :] + relations[:, None, :] - tails
    distance, slope = _distance_and_slope(diff, model.norm_p)
    scores = -distance

    top = scores.max(axis=1, keepdims=True)
    shifted = np.exp(scores - top)
    total = shifted.sum(axis=1, keepdims=True)
    log_sum = top[:, 0] + np.log(total[:, 0])
    nll = log_sum - scores[:, 0]

    d_scores = shifted / total
    d_scores[:, 0] -= 1.0
    d_scores *= scale
    # d score / d diff = -slope
    d_diff = -d_scores[..., None] * slope
    g_heads = d_diff.sum(axis=1)
    g_relations = d_diff.sum(axis=1)
    g_tails = -d_diff

    q = config.reg_order
    penalty = 0.0
    if config.reg_weight > 0:
        coef = config.reg_weight * scale
        true_tails = tails[:, 0, :]
        penalty = coef * float(
            (np.abs(heads) ** q).sum() + (np.abs(relations) ** q).sum() + (np.abs(true_tails) ** q).sum()
        )
        g_heads = g_heads + coef * q * np.abs(heads) ** (q - 1) * np.sign(heads)
        g_relations = g_relations + coef * q * np.abs(relations) ** (q - 1) * np.sign(relations)
        g_tails[:, 0, :] += coef * q * np.abs(true_tails) ** (q - 1) * np.sign(true_tails)

    loss = float(nll.sum() * scale) + penalty
    entity_rows, entity_grad = _sum_rows(
        np.concatenate([batch.heads, batch.tails.reshape(-1)]),
        np.concatenate([g_heads, g_tails.reshape(-1, model.dim)]),
    )
    relation_rows, relation_grad = _sum_rows(batch.relations, g_relations)
    return loss, Gradients(entity_rows, entity_grad, relation_rows, relation_grad)


def _merge_gradients(parts: Sequence[Gradients]) -> Gradients:
    entity_rows, entity = _sum_rows(
        np.concatenate([g.entity_rows for g in parts]), np.concatenate([g.entity for g in parts])
    )
    relation_rows, relation = _sum_rows(
        np.concatenate([g.relation_rows for g in parts]), np.concatenate([g.relation for g in parts])
    )
    return Gradients(entity_rows, entity, relation_rows, relation)


class Adam:
    """Adam over named parameter matrices, updating only the rows a step touches.

    Bias correction uses the global step count.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = self.lr / bc1
        for name, (rows, g) in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.beta1 * self.m[name][rows] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name][rows] + (1.0 - self.beta2) * (g * g)
            self.m[name][rows] = m
            self.v[name][rows] = v
            params[name][rows] -= step_size * m / (np.sqrt(v / bc2) + self.epsilon)


def _xavier_uniform(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + dim))
    return rng.uniform(-bound, bound, size=(rows, dim))


def _normalize_rows(matrix: np.ndarray, rows: np.ndarray | None = None) -> None:
    target = matrix if rows is None else matrix[rows]
    norms = np.linalg.norm(target, axis=1, keepdims=True)
    target = target / np.where(norms > 0, norms, 1.0)
    if rows is None:
        matrix[...] = target
    else:
        matrix[rows] = target


def encode_triples(model: EmbeddingModel, triples: Iterable[Triple]) -> np.ndarray:
    """(N, 3) int64 array of (head row, relation row, tail row)."""
    encoded = [
        (model.entity_row(t.head), model.relation_row(t.relation), model.entity_row(t.tail)) for t in triples
    ]
    return np.array(encoded, dtype=np.int64).reshape(-1, 3)


def sample_batch(rows: np.ndarray, n_entities: int, negatives: int, rng: np.random.Generator) -> TripleBatch:
    """Attach ``negatives`` corrupted tails to each positive triple.

    Corruptions are uniform over every entity except the true tail, so a
    negative column never repeats the positive. A one-entity graph has no
    such entity and gets its true tail back.
    """
    sampled = rng.integers(0, max(n_entities - 1, 1), size=(len(rows), negatives))
    if n_entities > 1:
        sampled += sampled >= rows[:, 2:3]
    tails = np.concatenate([rows[:, 2:3], sampled], axis=1)
    return TripleBatch(rows[:, 0].copy(), rows[:, 1].copy(), tails)


def init_model(kg: KnowledgeGraph, config: TrainingConfig) -> EmbeddingModel:
    """Xavier-uniform vectors, unit-normalised, one row per entity and relation.

    Entities take rows in sorted id order and relations in declaration order,
    so the model does not depend on the order triples were inserted.
    """
    rng = np.random.default_rng(config.seed)
    entity_ids = sorted(kg.entities)
    relation_kinds = kg.relations()
    entities = _xavier_uniform(rng, len(entity_ids), config.dim)
    relations = _xavier_uniform(rng, max(len(relation_kinds), 1), config.dim)[: len(relation_kinds)]
    _normalize_rows(entities)
    _normalize_rows(relations)
    return EmbeddingModel(entity_ids, relation_kinds, entities, relations, config.norm_p)


def train(kg: KnowledgeGraph, config: TrainingConfig, progress: bool = True) -> EmbeddingModel:
    """Train embeddings on every triple of the graph.

    Negatives corrupt the tail only. With ``config.threads > 1`` each batch
    is split into shards whose gradients are computed on a thread pool and
    summed in shard order.

    Args:
        kg: Training graph.
        config: Hyperparameters.
        progress: Show a tqdm progress bar over epochs.

    Returns:
        EmbeddingModel: Trained model with float32 matrices and the per-epoch loss.

    Raises:
        EmptyInputError: The graph has no triples.
        DivergenceError: The loss became NaN or infinite.
    """
    if len(kg) == 0:
        raise EmptyInputError("cannot train on an empty graph")
    model = init_model(kg, config)
    positives = encode_triples(model, kg.iter_sorted())
    rng = np.random.default_rng(config.seed + 1)
    optimizer = Adam(lr=config.learning_rate)
    params = {"entity": model.entity_vectors, "relation": model.relation_vectors}
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    logger.info(
        "training %d-dim embeddings on %d triples (%d entities, %d relations)",
        config.dim,
        len(positives),
        len(model.entity_ids),
        len(model.relation_kinds),
    )

    try:
        epochs = tqdm(range(config.epochs), desc="Training", unit="epoch", disable=not progress)
        for epoch in epochs:
            order = rng.permutation(len(positives))
            epoch_loss = 0.0
            for number, start in enumerate(range(0, len(order), config.batch_size)):
                rows = positives[order[start : start + config.batch_size]]
                batch = sample_batch(rows, len(model.entity_ids), config.negatives, rng)
                if pool is None:
                    loss, grads = loss_and_gradient(model, batch, config)
                else:
                    shards = batch.shard(config.threads)
                    results = list(pool.map(lambda s: loss_and_gradient(model, s, config, len(batch)), shards))
                    loss = sum(r[0] for r in results)
                    grads = _merge_gradients([r[1] for r in results])
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"loss became {loss} at epoch {epoch}, batch {number}", epoch=epoch, batch=number
                    )
                optimizer.step(
                    params,
                    {"entity": (grads.entity_rows, grads.entity), "relation": (grads.relation_rows, grads.relation)},
                )
                if config.normalize_entities:
                    _normalize_rows(params["entity"], grads.entity_rows)
                epoch_loss += loss * len(batch)
                logger.debug("epoch %d batch %d loss %.6f", epoch, number, loss)
            model.loss_history.append(epoch_loss / len(positives))
            epochs.set_postfix(loss=f"{model.loss_history[-1]:.4f}")
    finally:
        if pool is not None:
            pool.shutdown()

    return EmbeddingModel(
        model.entity_ids,
        model.relation_kinds,
        params["entity"].astype(np.float32),
        params["relation"].astype(np.float32),
        model.norm_p,
        model.loss_history,
    )


def score_tails(model: EmbeddingModel, head: EntityId, relation: RelationKind, tails: Sequence[EntityId]) -> np.ndarray:
    """Scores of (head, relation, t) for every t, as float64."""
    h = model.entity_vectors[model.entity_row(head)].astype(np.float64)
    r = model.relation_vectors[model.relation_row(relation)].astype(np.float64)
    rows = [model.entity_row(t) for t in tails]
    diff = h + r - model.entity_vectors[rows].astype(np.float64)
    distance, _ = _distance_and_slope(diff.reshape(len(rows), model.dim), model.norm_p)
    return -distance


def score(model: EmbeddingModel, triple: Triple) -> float:
    """``-||h + r - t||_p`` of one triple."""
    return float(score_tails(model, triple.head, triple.relation, [triple.tail])[0])


def nearest_neighbors(model: EmbeddingModel, anchor: EntityId, pool: Iterable[EntityId], k: int) -> list[EntityId]:
    """The ``k`` pool entities closest to ``anchor`` in L2 distance, ties by id."""
    candidates = sorted(set(pool))
    if k <= 0 or not candidates:
        return []
    center = model.entity_vectors[model.entity_row(anchor)].astype(np.float64)
    vectors = model.entity_vectors[[model.entity_row(c) for c in candidates]].astype(np.float64)
    distances = np.linalg.norm(vectors - center, axis=1)
    # candidates are already id-sorted, a stable sort keeps ties in id order
    order = np.argsort(distances, kind="stable")
    return [candidates[i] for i in order[:k]]


# -- model files ---------------------------------------------------------------


def save_model(model: EmbeddingModel, path: Path) -> None:
    """Write the binary model file (little-endian, float32 matrices)."""
    chunks = [MAGIC, _HEADER.pack(model.dim, len(model.entity_ids), len(model.relation_kinds), model.norm_p)]
    for name in [e.key for e in model.entity_ids] + [r.value for r in model.relation_kinds]:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
    chunks.append(np.ascontiguousarray(model.entity_vectors, dtype="<f4").tobytes())
    chunks.append(np.ascontiguousarray(model.relation_vectors, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path: Path) -> EmbeddingModel:
    """Read a model file written by ``save_model``.

    Raises:
        ModelFormatError: Wrong magic, truncated data or trailing bytes.
    """
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ModelFormatError(f"{path} is not a model file (bad magic)", path=str(path))
    offset = len(MAGIC)
    try:
        dim, n_entities, n_relations, norm_p = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        names = []
        for _ in range(n_entities + n_relations):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + length > len(data):
                raise ModelFormatError(f"{path} is truncated in the id table", path=str(path))
            names.append(data[offset : offset + length].decode("utf-8"))
            offset += length
    except struct.error as exc:
        raise ModelFormatError(f"{path} is truncated: {exc}", path=str(path)) from exc

    expected = offset + 4 * dim * (n_entities + n_relations)
    if len(data) != expected:
        raise ModelFormatError(
            f"{path} has {len(data)} bytes, header implies {expected}", path=str(path)
        )
    entities = np.frombuffer(data, dtype="<f4", count=n_entities * dim, offset=offset).reshape(n_entities, dim)
    offset += 4 * n_entities * dim
    relations = np.frombuffer(data, dtype="<f4", count=n_relations * dim, offset=offset).reshape(n_relations, dim)
    if norm_p not in (1, 2):
        raise ModelFormatError(f"{path} declares unsupported norm {norm_p}", path=str(path))
    try:
        entity_ids = [EntityId.parse(name) for name in names[:n_entities]]
        relation_kinds = [RelationKind(name) for name in names[n_entities:]]
    except (ValueError, TripleValidationError) as exc:
        raise ModelFormatError(f"{path} has an invalid id table: {exc}", path=str(path)) from exc
    return EmbeddingModel(
        entity_ids,
        relation_kinds,
        entities.astype(np.float32),
        relations.astype(np.float32),
        int(norm_p),
    )
