"""Federated distillation rounds with optional poisoned uploads.

One round: every client computes softmax outputs on its local training set,
malicious clients transform them, the server aggregates, and every client
takes SGD steps on cross-entropy plus distillation towards the teachers the
server hands back.  Two server modes exist:

``fd_avg``  per-class averaging of the clients' per-class mean outputs;
``cache``   per-sample knowledge cache; each sample's teacher is the mean of
            the R most cosine-similar cached entries from other clients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attacks, datasets, nn
from .attacks import AttackAssignment, AttackKind
from .config import ExperimentConfig
from .datasets import Dataset, Partition
from .errors import ConfigError, FDError, InputError, NumericError
from .metrics import evaluate

log = logging.getLogger(__name__)


def _child_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _child_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass
class ClientState:
    id: int
    net: nn.DenseNet
    data: Dataset
    sample_ids: np.ndarray
    malicious: bool = False
    attack: AttackKind = AttackKind.NONE
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    attack_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    hashes: np.ndarray | None = None

    def __post_init__(self):
        if len(self.data) == 0:
            raise ConfigError(f"client {self.id} has no local data")

    def label_distribution(self) -> np.ndarray:
        counts = self.data.class_counts().astype(np.float64)
        return counts / counts.sum()


@dataclass
class Knowledge:
    """One client's upload: per-sample vectors plus their per-class means."""

    client_id: int
    sample_ids: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray
    class_means: np.ndarray
    class_counts: np.ndarray
    hashes: np.ndarray | None = None

    @classmethod
    def build(cls, client_id, sample_ids, labels, vectors, n_classes, hashes=None) -> "Knowledge":
        vectors = np.asarray(vectors, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=n_classes)
        sums = np.zeros((n_classes, vectors.shape[1]))
        np.add.at(sums, labels, vectors)
        means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
        return cls(client_id, np.asarray(sample_ids), labels, vectors, means, counts, hashes)

    def replace_vectors(self, vectors) -> "Knowledge":
        return Knowledge.build(self.client_id, self.sample_ids, self.labels, vectors,
                               self.class_counts.shape[0], self.hashes)


@dataclass
class GlobalKnowledge:
    mode: str
    class_vectors: np.ndarray | None = None
    present: np.ndarray | None = None
    per_recipient: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
    cache: "KnowledgeCache | None" = None

    def class_teachers(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        if self.per_recipient is not None:
            return self.per_recipient[client_id]
        return self.class_vectors, self.present


@dataclass
class RoundReport:
    round: int
    per_client_accuracy: np.ndarray
    mean_accuracy: float
    losses: list[nn.LossBreakdown]
    diverged: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------

def extract_knowledge(client: ClientState) -> Knowledge:
    """Softmax outputs of the client's model on all of its training samples."""
    if len(client.data) == 0:
        raise ConfigError(f"client {client.id} has no local data")
    probs = nn.softmax(nn.forward(client.net, client.data.features))
    return Knowledge.build(client.id, client.sample_ids, client.data.labels, probs,
                           client.data.n_classes, client.hashes)


def upload(client: ClientState, knowledge: Knowledge) -> Knowledge:
    """What actually leaves the client: honest knowledge or its poisoned version."""
    if not client.malicious or client.attack is AttackKind.NONE:
        return knowledge
    poisoned = attacks.apply_attack(knowledge.vectors, client.attack, client.attack_rng)
    return knowledge.replace_vectors(poisoned)


def local_update(client: ClientState, teachers, teacher_mask, beta: float = 1.0,
                 temperature: float = 1.0, lr: float = 0.01, local_epochs: int = 1,
                 batch_size: int = 32, round_idx: int | None = None):
    """Minibatch SGD on the distillation objective.

    ``teachers`` is ``(N_local, n)`` aligned with ``client.data``.  Returns
    ``(client, mean_loss, diverged)``; on a non-finite step the client keeps
    its last finite parameters and skips the rest of the round.  ``lr=0``
    only evaluates the loss.
    """
    n = len(client.data)
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}", field="lr")
    if teachers is not None and np.shape(teachers)[0] != n:
        raise InputError(f"client {client.id}: {np.shape(teachers)[0]} teachers for {n} samples")
    net = client.net
    losses: list[nn.LossBreakdown] = []
    diverged = False
    x, y = client.data.features, client.data.labels
    for _ in range(local_epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            t = None if teachers is None else teachers[idx]
            m = None if teacher_mask is None else teacher_mask[idx]
            try:
                if lr == 0:
                    loss = nn.local_objective(net, x[idx], y[idx], t, beta, temperature, m)
                else:
                    net, loss = nn.backward_and_step(net, x[idx], y[idx], t, beta, temperature, lr,
                                                     m, round_idx=round_idx, client_id=client.id)
            except NumericError as exc:
                log.warning("%s; skipping remaining local epochs", exc)
                diverged = True
                break
            losses.append(loss)
        if diverged:
            break
    client.net = net
    if losses:
        mean = nn.LossBreakdown(
            float(np.mean([l.ce for l in losses])),
            float(np.mean([l.kd for l in losses])),
            float(np.mean([l.total for l in losses])),
        )
    else:
        mean = nn.LossBreakdown(float("nan"), float("nan"), float("nan"))
    return client, mean, diverged


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------

def _class_average(uploads: list[Knowledge]) -> tuple[np.ndarray, np.ndarray]:
    n = uploads[0].class_means.shape[0]
    width = uploads[0].class_means.shape[1]
    sums = np.zeros((n, width))
    contributors = np.zeros(n, dtype=np.int64)
    for up in uploads:
        has = up.class_counts > 0
        sums[has] += up.class_means[has]
        contributors += has
    present = contributors > 0
    zs = np.divide(sums, contributors[:, None], out=np.zeros_like(sums), where=present[:, None])
    return zs, present


def aggregate_fd(uploads: list[Knowledge], exclude_self: bool = False) -> GlobalKnowledge:
    """Per-class knowledge averaging.

    Each class vector is the unweighted mean of the per-class means of the
    clients holding that class; classes nobody holds are marked absent.  With
    ``exclude_self`` every recipient gets an average over the other clients.
    """
    if not uploads:
        raise InputError("no client uploads to aggregate")
    zs, present = _class_average(uploads)
    per_recipient = None
    if exclude_self:
        per_recipient = {}
        for up in uploads:
            others = [u for u in uploads if u.client_id != up.client_id]
            if others:
                per_recipient[up.client_id] = _class_average(others)
            else:
                per_recipient[up.client_id] = (np.zeros_like(zs), np.zeros_like(present))
    return GlobalKnowledge("fd_avg", zs, present, per_recipient)


class KnowledgeCache:
    """Server-side store of per-sample knowledge keyed by sample hash.

    Entries are keyed by ``(client_id, sample_id)``; a new upload replaces the
    previous entry for the same sample.  Lookups are brute-force cosine kNN.
    """

    def __init__(self):
        self._store: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._arrays = None

    def __len__(self) -> int:
        return len(self._store)

    def update(self, knowledge: Knowledge) -> "KnowledgeCache":
        if knowledge.hashes is None:
            raise InputError(f"client {knowledge.client_id} uploaded knowledge without hashes")
        for sid, h, v in zip(knowledge.sample_ids, knowledge.hashes, knowledge.vectors):
            self._store[(knowledge.client_id, int(sid))] = (h, v)
        self._arrays = None
        return self

    def entries(self) -> dict[bytes, list[tuple[int, np.ndarray]]]:
        """Hash bytes -> list of ``(client_id, vector)``."""
        out: dict[bytes, list[tuple[int, np.ndarray]]] = {}
        for (cid, _), (h, v) in self._store.items():
            out.setdefault(h.tobytes(), []).append((cid, v))
        return out

    def _matrices(self):
        if self._arrays is None:
            keys = list(self._store)
            if keys:
                self._arrays = (
                    np.array([k[0] for k in keys]),
                    np.stack([self._store[k][0] for k in keys]),
                    np.stack([self._store[k][1] for k in keys]),
                )
            else:
                self._arrays = (np.zeros(0, dtype=np.int64), None, None)
        return self._arrays

    def neighbors(self, sample_hash, owner: int, R: int) -> np.ndarray:
        """Entry positions of the ``R`` most similar foreign entries (ties: lower position)."""
        if R < 1:
            raise ConfigError("R must be >= 1", field="R")
        owners, hashes, _ = self._matrices()
        foreign = np.flatnonzero(owners != owner)
        if foreign.size == 0:
            return foreign
        sims = hashes[foreign] @ np.asarray(sample_hash, dtype=np.float64)
        return foreign[np.argsort(-sims, kind="stable")[:R]]

    def fetch(self, sample_hash, owner: int, R: int) -> np.ndarray | None:
        idx = self.neighbors(sample_hash, owner, R)
        if idx.size == 0:
            return None
        return self._matrices()[2][idx].mean(axis=0)

    def fetch_many(self, sample_hashes, owner: int, R: int) -> tuple[np.ndarray, np.ndarray]:
        """Teachers for a batch of hashes; the mask is False where none exist."""
        if R < 1:
            raise ConfigError("R must be >= 1", field="R")
        owners, hashes, vectors = self._matrices()
        q = np.atleast_2d(np.asarray(sample_hashes, dtype=np.float64))
        foreign = np.flatnonzero(owners != owner)
        if foreign.size == 0:
            width = 0 if vectors is None else vectors.shape[1]
            return np.zeros((q.shape[0], width)), np.zeros(q.shape[0], dtype=bool)
        sims = q @ hashes[foreign].T
        top = np.argsort(-sims, axis=1, kind="stable")[:, :R]
        teachers = vectors[foreign][top].mean(axis=1)
        return teachers, np.ones(q.shape[0], dtype=bool)


def cache_update(cache: KnowledgeCache, knowledge: Knowledge) -> KnowledgeCache:
    return cache.update(knowledge)


def cache_fetch(cache: KnowledgeCache, sample_hash, owner: int, R: int) -> np.ndarray | None:
    return cache.fetch(sample_hash, owner, R)


def teachers_for(client: ClientState, global_knowledge: GlobalKnowledge, R: int = 16):
    """Align server knowledge with the client's samples: ``(teachers, mask)``."""
    if global_knowledge.mode == "fd_avg":
        zs, present = global_knowledge.class_teachers(client.id)
        y = client.data.labels
        return zs[y], present[y]
    return global_knowledge.cache.fetch_many(client.hashes, client.id, R)


# ---------------------------------------------------------------------------
# world and rounds
# ---------------------------------------------------------------------------

@dataclass
class World:
    clients: list[ClientState]
    test: Dataset
    protocol: str = "fd_avg"
    beta: float = 1.0
    temperature: float = 1.0
    lr: float = 0.01
    local_epochs: int = 1
    batch_size: int = 32
    R: int = 16
    exclude_self: bool = False
    eval_weighting: str = "local"
    cache: KnowledgeCache = field(default_factory=KnowledgeCache)
    round_idx: int = 0
    last_global: GlobalKnowledge | None = None
    train: Dataset | None = None
    partition: Partition | None = None
    assignment: AttackAssignment | None = None

    @property
    def n_classes(self) -> int:
        return self.test.n_classes

    def client_accuracy(self, client: ClientState) -> float:
        weights = client.label_distribution() if self.eval_weighting == "local" else None
        return evaluate(client.net, self.test, weights)


def run_round(world: World) -> RoundReport:
    """Extract -> poison -> aggregate -> broadcast -> local update -> evaluate."""
    r = world.round_idx + 1
    try:
        uploads = [upload(c, extract_knowledge(c)) for c in world.clients]
        if world.protocol == "fd_avg":
            gk = aggregate_fd(uploads, world.exclude_self)
        elif world.protocol == "cache":
            for up in uploads:
                world.cache.update(up)
            gk = GlobalKnowledge("cache", cache=world.cache)
        else:
            raise ConfigError(f"unknown protocol {world.protocol!r}", field="protocol")
        world.last_global = gk
        losses, diverged = [], []
        for c in world.clients:
            t, m = teachers_for(c, gk, world.R)
            _, loss, bad = local_update(c, t, m, world.beta, world.temperature, world.lr,
                                        world.local_epochs, world.batch_size, round_idx=r)
            losses.append(loss)
            if bad:
                diverged.append(c.id)
        acc = np.array([world.client_accuracy(c) for c in world.clients])
    except NumericError:
        raise
    except FDError as exc:
        raise type(exc)(f"round {r}: {exc}") from exc
    world.round_idx = r
    return RoundReport(r, acc, float(acc.mean()), losses, diverged)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return datasets.generate_synthetic(ds.n_classes, ds.per_class, ds.dim, ds.separation,
                                           seed=cfg.seeds.data)
    if ds.kind == "idx":
        train = datasets.load_idx(ds.train_images, ds.train_labels, split="train")
        test = datasets.load_idx(ds.test_images, ds.test_labels, split="test")
    else:
        train = datasets.load_csv(ds.train_csv, split="train")
        test = datasets.load_csv(ds.test_csv, split="test")
    k = max(train.n_classes, test.n_classes)
    return (datasets.Dataset(train.features, train.labels, k, "train"),
            datasets.Dataset(test.features, test.labels, k, "test"))


def build_world(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None) -> World:
    """Partition data, build client models and pick the malicious set.

    Four seed streams keep ablations independent: ``data`` (dataset,
    partition, hash projection), ``model`` (initial weights), ``attack``
    (malicious set, random-poison draws) and ``training`` (minibatch order).
    """
    cfg.validate()
    train, test = data if data is not None else load_datasets(cfg)
    if train.dim != test.dim:
        raise ConfigError("train and test feature widths differ", field="dataset")
    seeds = cfg.seeds
    part = datasets.dirichlet_partition(train, cfg.K, cfg.alpha, seeds.data)
    assignment = attacks.select_malicious(cfg.K, cfg.poison_ratio, seeds.attack)
    hashes = None
    if cfg.protocol == "cache":
        hashes = datasets.compute_hashes(train.features, _child_seed(seeds.data, 1), cfg.hash_dim)
    clients = []
    for k, idx in enumerate(part.assignments):
        arch = nn.arch_for_client(k, cfg.heterogeneous_models)
        clients.append(ClientState(
            id=k,
            net=nn.make_model(arch, train.dim, train.n_classes, _child_seed(seeds.model, k)),
            data=train.subset(idx),
            sample_ids=idx,
            malicious=assignment.is_malicious(k),
            attack=cfg.attack_kind if assignment.is_malicious(k) else AttackKind.NONE,
            rng=_child_rng(seeds.training, k),
            attack_rng=_child_rng(seeds.attack, k, 1),
            hashes=None if hashes is None else hashes[idx],
        ))
    return World(
        clients=clients, test=test, protocol=cfg.protocol, beta=cfg.beta,
        temperature=cfg.temperature, lr=cfg.lr, local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size, R=cfg.R, exclude_self=cfg.exclude_self,
        eval_weighting=cfg.eval_weighting, train=train, partition=part, assignment=assignment,
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    world: World

    @property
    def final_mean_accuracy(self) -> float:
        return self.reports[-1].mean_accuracy

    def summary(self) -> dict:
        finals = self.reports[-1].per_client_accuracy
        return {
            "rounds": len(self.reports),
            "final_mean_acc": float(finals.mean()),
            "final_min_acc": float(finals.min()),
            "final_max_acc": float(finals.max()),
            "best_mean_acc": float(max(r.mean_accuracy for r in self.reports)),
            "malicious_clients": sorted(self.world.assignment.malicious_ids),
            "diverged_events": sum(len(r.diverged) for r in self.reports),
        }


def run_experiment(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None,
                   progress=None) -> ExperimentResult:
    world = build_world(cfg, data)
    reports = []
    for _ in range(cfg.rounds):
        rep = run_round(world)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    return ExperimentResult(cfg, reports, world)
