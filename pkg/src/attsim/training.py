"""SGD training with a step schedule, validation-based selection and episodic evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .episodic import ClassSplit, FeatureStore, FewShotModel, episode_loss, sample_episode
from .tensor import NumericError


class TrainingDiverged(NumericError):
    """A non-finite value appeared during training."""

    def __init__(self, msg: str, epoch: int, episode_seed: tuple):
        super().__init__(f"{msg} (epoch {epoch}, episode seed {list(episode_seed)})")
        self.epoch = epoch
        self.episode_seed = episode_seed


@dataclass
class TrainSchedule:
    lr0: float = 0.01
    decay_every: int = 20
    decay_factor: float = 10.0
    max_epochs: int = 60
    weight_decay: float = 1e-4
    momentum: float = 0.9
    episodes_per_epoch: int = 400
    batch_episodes: int = 16
    way: int = 5
    shot: int = 1
    n_query: int = 1
    val_episodes: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.episodes_per_epoch % self.batch_episodes:
            raise ValueError("episodes_per_epoch must be a multiple of batch_episodes")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr0 and weight_decay must be >= 0 and momentum in [0, 1)")

    def lr(self, epoch: int) -> float:
        return self.lr0 / self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val: Optional[float] = None


class SGD:
    """Plain SGD with L2 weight decay folded into the gradient and optional momentum."""

    def __init__(self, params: list, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in params] if momentum else None

    def step(self, lr: float) -> None:
        dt = self.params[0].dtype.type if self.params else np.float32
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + dt(self.weight_decay) * p.data
            if self._velocity is not None:
                self._velocity[i] = dt(self.momentum) * self._velocity[i] + g
                g = self._velocity[i]
            p.data = p.data - dt(lr) * g


def _episode_seed(seed: int, epoch: int, index: int) -> tuple:
    return (int(seed), int(epoch), int(index))


def _labels(episodes: list) -> np.ndarray:
    return np.array([ep.query_classes for ep in episodes])


def train(
    model: FewShotModel,
    schedule: TrainSchedule,
    split: ClassSplit,
    store: FeatureStore,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Episodic training; keeps the parameters with the best validation accuracy."""
    pool = store.pool(split.train_classes)
    val_pool = store.pool(split.val_classes) if split.val_classes else None
    opt = SGD(model.parameters(), schedule.weight_decay, schedule.momentum)
    s = schedule
    result = TrainResult()
    best_state = None
    if s.max_epochs == 0:
        # an untrained model still needs batchnorm statistics to run in eval mode
        model.calibrate(store.batch([c for ids in pool.values() for c in ids]))
    for epoch in range(s.max_epochs):
        lr = s.lr(epoch)
        model.train()
        losses = []
        for start in range(0, s.episodes_per_epoch, s.batch_episodes):
            seeds = [_episode_seed(s.seed, epoch, start + j) for j in range(s.batch_episodes)]
            try:
                eps = [sample_episode(pool, s.way, s.shot, np.random.default_rng(sd), s.n_query) for sd in seeds]
                specs = store.batch([c for ep in eps for c in ep.clip_order()])
                model.zero_grad()
                feat, att = model.encode(specs)
                scores = model.batch_scores(feat, att, len(eps), s.way, s.shot, s.n_query)
                loss = episode_loss(scores, _labels(eps))
                loss.backward()
                opt.step(lr)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), epoch, seeds[0]) from exc
            losses.append(loss.item())
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_acc": None}
        if val_pool is not None:
            acc, ci = evaluate(model, val_pool, s.way, s.shot, s.val_episodes, seed=s.seed)
            record["val_acc"], record["val_ci"] = acc, ci
            if result.best_val is None or acc > result.best_val:
                result.best_val, result.best_epoch = acc, epoch
                best_state = {k: v.copy() for k, v in model.backbone.state_arrays().items()}
        else:
            result.best_epoch = epoch
        result.history.append(record)
        if log is not None:
            log(record)
    if best_state is not None:
        model.backbone.load_state_arrays(best_state)
    model.eval()
    return result


def confidence_interval(correct: np.ndarray) -> float:
    """Half-width of the 95% normal interval, 1.96 times the standard error."""
    n = len(correct)
    return float(1.96 * np.std(correct, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def sample_episodes(pool: dict, c: int, k: int, n: int, seed: int) -> list:
    """``n`` single-query episodes; episode ``i`` uses its own derived generator."""
    return [sample_episode(pool, c, k, np.random.default_rng([int(seed), i])) for i in range(n)]


def evaluate(
    model: FewShotModel,
    pool: dict,
    c: int,
    k: int,
    n_episodes: int = 600,
    seed: int = 0,
    store: Optional[FeatureStore] = None,
    batch: int = 64,
) -> tuple:
    """Accuracy and 95% CI over ``n_episodes`` episodes drawn from ``pool``.

    ``pool`` maps class -> clip ids. Features come from ``store``, or from the
    store a :class:`ClassPool` was built from.
    """
    store = store or getattr(pool, "store", None)
    if store is None:
        raise ValueError("evaluate needs the feature store the pool refers to")
    episodes = sample_episodes(pool, c, k, n_episodes, seed)
    was_training = model.training
    model.eval()
    ids = sorted({cid for ep in episodes for cid in ep.clip_order()})
    enc = {}
    with T.no_grad():
        for i in range(0, len(ids), batch):
            chunk = ids[i : i + batch]
            feat, att = model.encode(store.batch(chunk))
            for j, cid in enumerate(chunk):
                enc[cid] = (feat.data[j], None if att is None else att.data[j])
        correct = []
        for i in range(0, len(episodes), batch):
            eps = episodes[i : i + batch]
            order = [cid for ep in eps for cid in ep.clip_order()]
            feat = T.Tensor(np.stack([enc[cid][0] for cid in order]))
            att = None if not model.head.attentional else T.Tensor(np.stack([enc[cid][1] for cid in order]))
            scores = model.batch_scores(feat, att, len(eps), c, k, 1).data[:, 0]
            correct.extend(np.argmax(scores, axis=-1) == _labels(eps)[:, 0])
    if was_training:
        model.train()
    correct = np.asarray(correct, dtype=np.float64)
    return float(correct.mean()), confidence_interval(correct)

