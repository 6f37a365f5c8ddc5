"""Embedding extraction and triplet-based training objectives.

Embeddings are the L2-normalized bottleneck features (classification layer
discarded). Two objectives are provided over squared-Euclidean distances:

* standard hinge: sum over triplets of max(0, d_ap - d_an + margin)
* batch form: (1-beta) * (mean_ap - mean_an + margin)
  + beta * (var_ap + var_an), with the means and population variances
  taken over the current batch's positive/negative distance lists.

The batch form penalizes the spread of both score distributions, not just
the gap between their means, so it targets the decidability statistic
directly. Online sampling restricts a batch to margin-violating triplets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, LabeledImage
from .engine import autodiff
from .engine.autodiff import Node, gradients
from .engine.model import Model, forward_features, trace
from .engine.ops import l2_normalize
from .engine.optim import Sgd
from .errors import DivergenceError, StateError
from .validation import as_rng


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray          # (D,) unit-norm
    source_id: str
    label: int


@dataclass(frozen=True)
class LossConfig:
    mode: str = "batch"                 # "standard" | "batch"
    alpha: float = 0.5
    beta: float = 0.7
    online: bool = True
    max_triplets: int | None = None     # seeded subsample cap on a batch

    def __post_init__(self):
        if self.mode not in ("standard", "batch"):
            raise ValueError(f"mode must be 'standard' or 'batch', got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.max_triplets is not None and self.max_triplets < 1:
            raise ValueError("max_triplets must be positive when set")


@dataclass(frozen=True)
class FinetuneSchedule:
    steps: int
    lr: float = 0.01
    momentum: float = 0.9
    pool_classes: int = 8
    pool_per_class: int = 8


class TripletBatch:
    """Triplets of pool indices with their distance lists and batch stats."""

    def __init__(self, vectors: np.ndarray, labels: np.ndarray,
                 triplets: list[tuple[int, int, int]],
                 embeddings: list[Embedding] | None = None):
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.triplets = [tuple(int(v) for v in t) for t in triplets]
        self.embeddings = embeddings
        for a, p, n in self.triplets:
            if self.labels[a] != self.labels[p]:
                raise ValueError(f"triplet ({a},{p},{n}): anchor and positive labels differ")
            if self.labels[a] == self.labels[n]:
                raise ValueError(f"triplet ({a},{p},{n}): anchor and negative share a label")
        if self.triplets:
            ai, pi, ni = (np.array(x) for x in zip(*self.triplets))
            self.d_ap = ((self.vectors[ai] - self.vectors[pi]) ** 2).sum(axis=1)
            self.d_an = ((self.vectors[ai] - self.vectors[ni]) ** 2).sum(axis=1)
        else:
            self.d_ap = np.empty(0)
            self.d_an = np.empty(0)

    @classmethod
    def from_embeddings(cls, embeddings: list[Embedding],
                        triplets: list[tuple[int, int, int]]) -> "TripletBatch":
        vectors = np.stack([e.vector for e in embeddings])
        labels = np.array([e.label for e in embeddings])
        return cls(vectors, labels, triplets, embeddings=list(embeddings))

    def __len__(self):
        return len(self.triplets)

    @property
    def mu_ap(self) -> float:
        return float(self.d_ap.mean())

    @property
    def mu_an(self) -> float:
        return float(self.d_an.mean())

    @property
    def var_ap(self) -> float:
        return float(self.d_ap.var())    # population variance

    @property
    def var_an(self) -> float:
        return float(self.d_an.var())


# ------------------------------------------------------------ embeddings

def embed(model: Model, images, batch_size: int = 256) -> list[Embedding]:
    """Unit-norm bottleneck embeddings for a Dataset or list of images."""
    items: list[LabeledImage] = list(images.images) if isinstance(images, Dataset) else list(images)
    out: list[Embedding] = []
    for start in range(0, len(items), batch_size):
        block = items[start:start + batch_size]
        feats = forward_features(model, np.stack([im.pixels for im in block])[:, :, :, np.newaxis])
        norms = np.sqrt((feats * feats).sum(axis=1))
        if np.any(norms == 0.0):
            bad = [block[i].id for i in np.nonzero(norms == 0.0)[0]]
            raise ValueError(f"zero bottleneck feature vector for image(s) {bad}; "
                             "cannot normalize")
        unit = feats / norms[:, None]
        out += [Embedding(vector=unit[i], source_id=im.id, label=im.label)
                for i, im in enumerate(block)]
    return out


def distance(a, b) -> float:
    """Squared Euclidean distance; equals 2 - 2*cos for unit vectors."""
    va = a.vector if isinstance(a, Embedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, Embedding) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    return float(((va - vb) ** 2).sum())


# ------------------------------------------------------------ loss graphs

def _distance_nodes(z: Node, triplets) -> tuple[Node, Node]:
    ai, pi, ni = (list(x) for x in zip(*triplets))
    a = autodiff.take_rows(z, ai)
    p = autodiff.take_rows(z, pi)
    n = autodiff.take_rows(z, ni)
    d_ap = autodiff.sum_along(autodiff.square(a - p), axis=1)
    d_an = autodiff.sum_along(autodiff.square(a - n), axis=1)
    return d_ap, d_an


def standard_loss_node(z: Node, triplets, alpha: float) -> Node:
    d_ap, d_an = _distance_nodes(z, triplets)
    return autodiff.sum_along(autodiff.relu(d_ap - d_an + alpha))


def batch_loss_node(z: Node, triplets, alpha: float, beta: float) -> Node:
    d_ap, d_an = _distance_nodes(z, triplets)
    mu_ap = autodiff.mean_along(d_ap)
    mu_an = autodiff.mean_along(d_an)
    var_ap = autodiff.mean_along(autodiff.square(d_ap - mu_ap))
    var_an = autodiff.mean_along(autodiff.square(d_an - mu_an))
    return (1.0 - beta) * (mu_ap - mu_an + alpha) + beta * (var_ap + var_an)


def standard_triplet_loss(batch: TripletBatch, alpha: float) -> tuple[float, np.ndarray]:
    """Hinge loss and its gradient with respect to the pool embeddings.

    Inactive triplets (margin satisfied) contribute zero loss and zero
    subgradient.
    """
    if len(batch) == 0:
        raise StateError("standard triplet loss needs a nonempty batch")
    z = Node(batch.vectors)
    loss = standard_loss_node(z, batch.triplets, alpha)
    (grad,) = gradients(loss, [z])
    return float(loss.value), grad


def batch_triplet_loss(batch: TripletBatch, alpha: float, beta: float) -> tuple[float, np.ndarray]:
    """Mean-separation plus variance loss and its embedding gradients."""
    if len(batch) < 2:
        raise ValueError("batch triplet loss needs at least 2 triplets "
                         "(variances require more than one sample)")
    z = Node(batch.vectors)
    loss = batch_loss_node(z, batch.triplets, alpha, beta)
    (grad,) = gradients(loss, [z])
    return float(loss.value), grad


# -------------------------------------------------------- triplet mining

def _violating_triplets(vectors: np.ndarray, labels: np.ndarray, alpha: float,
                        *, online: bool = True) -> list[tuple[int, int, int]]:
    """All (a, p, n) with shared a/p label, different n label, ordered (a, p);
    with ``online`` only margin violators (d_ap + alpha > d_an) are kept."""
    n = len(labels)
    diff = vectors[:, None, :] - vectors[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    triplets = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for k in range(n):
                if labels[k] == labels[a]:
                    continue
                if not online or d2[a, p] + alpha > d2[a, k]:
                    triplets.append((a, p, k))
    return triplets


def online_sample_triplets(embeddings: list[Embedding], alpha: float,
                           max_triplets: int | None = None, rng=None) -> TripletBatch:
    """Batch of all margin-violating triplets in the pool (possibly empty).

    Raises if the pool admits no anchor-positive pair or no negative. With
    ``max_triplets`` set, a seeded subsample caps the batch (input order
    preserved).
    """
    labels = np.array([e.label for e in embeddings])
    counts = {int(l): int((labels == l).sum()) for l in set(labels.tolist())}
    if not any(c >= 2 for c in counts.values()):
        raise ValueError("pool has no class with two samples; no anchor-positive pair exists")
    if len(counts) < 2:
        raise ValueError("pool needs at least two classes to form negatives")
    vectors = np.stack([e.vector for e in embeddings])
    triplets = _violating_triplets(vectors, labels, alpha)
    if max_triplets is not None and len(triplets) > max_triplets:
        rng = as_rng(rng)
        keep = np.sort(rng.choice(len(triplets), size=max_triplets, replace=False))
        triplets = [triplets[i] for i in keep]
    return TripletBatch(vectors, labels, triplets, embeddings=list(embeddings))


# ------------------------------------------------------------ statistics

def decidability(pos_scores, neg_scores) -> float:
    """|mean gap| over the rms of the two spreads; scale-free separation.

    Accepts either distances or similarities; both lists need at least two
    values and at least one nonzero variance.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size < 2 or neg.size < 2:
        raise ValueError("decidability needs at least two scores per list")
    var_sum = pos.var() + neg.var()
    if var_sum == 0.0:
        raise ValueError("decidability undefined: both score distributions are constant")
    return float(abs(pos.mean() - neg.mean()) / np.sqrt(var_sum / 2.0))


# -------------------------------------------------------------- finetune

def _sample_pool(dataset: Dataset, schedule: FinetuneSchedule, rng) -> np.ndarray:
    """Indices of a candidate pool: up to pool_classes classes (each with at
    least two samples) and up to pool_per_class images per class."""
    labels = dataset.label_array()
    eligible = [c for c in range(dataset.class_count) if (labels == c).sum() >= 2]
    if len(eligible) < 2:
        raise StateError("fine-tuning needs at least two classes with two samples each")
    chosen = rng.choice(eligible, size=min(schedule.pool_classes, len(eligible)),
                        replace=False)
    picks = []
    for c in chosen:
        members = np.nonzero(labels == c)[0]
        take = min(schedule.pool_per_class, len(members))
        picks.append(rng.choice(members, size=take, replace=False))
    return np.concatenate(picks)


def finetune(model: Model, dataset: Dataset, config: LossConfig,
             schedule: FinetuneSchedule, rng) -> tuple[Model, list[dict]]:
    """Triplet fine-tuning of all layers below the classification layer.

    Per step: embed a fresh candidate pool, mine triplets (online filter per
    config), apply the configured loss, and update. Steps whose batch is too
    small for the loss are skipped (triplet_count still logged). Returns the
    updated model and one log row per step with the batch statistics.
    """
    model.bottleneck_dim()      # the classifier output is discarded; a bottleneck must exist
    rng = as_rng(rng)
    opt = Sgd(schedule.lr, schedule.momentum)
    rows: list[dict] = []
    nan = float("nan")

    for step in range(1, schedule.steps + 1):
        pool_idx = _sample_pool(dataset, schedule, rng)
        images = dataset.image_array()[pool_idx][:, :, :, np.newaxis]
        labels = dataset.label_array()[pool_idx]

        run = trace(model, images, through="features")
        z = l2_normalize(run.features)
        triplets = _violating_triplets(z.value, labels, config.alpha,
                                       online=config.online)
        if config.max_triplets is not None and len(triplets) > config.max_triplets:
            keep = np.sort(rng.choice(len(triplets), size=config.max_triplets, replace=False))
            triplets = [triplets[i] for i in keep]

        row = {"step": step, "loss": nan, "mu_ap": nan, "mu_an": nan,
               "var_ap": nan, "var_an": nan, "decidability": nan,
               "triplet_count": len(triplets)}
        needed = 1 if config.mode == "standard" else 2
        if len(triplets) >= needed:
            batch = TripletBatch(z.value, labels, triplets)
            if config.mode == "standard":
                loss_node = standard_loss_node(z, triplets, config.alpha)
            else:
                loss_node = batch_loss_node(z, triplets, config.alpha, config.beta)
            loss = float(loss_node.value)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite fine-tuning loss at step {step}")
            names = list(run.param_nodes)
            grads = gradients(loss_node, [run.param_nodes[n] for n in names])
            opt.step(model, dict(zip(names, grads)))

            row.update(loss=loss, mu_ap=batch.mu_ap, mu_an=batch.mu_an,
                       var_ap=batch.var_ap, var_an=batch.var_an)
            if len(batch) >= 2 and batch.var_ap + batch.var_an > 0:
                row["decidability"] = decidability(batch.d_ap, batch.d_an)
        rows.append(row)
    return model, rows


FINETUNE_LOG_COLUMNS = ["step", "loss", "mu_ap", "mu_an", "var_ap", "var_an",
                        "decidability", "triplet_count"]
