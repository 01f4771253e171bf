"""Episodes, class splits, few-shot heads and the episodic loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import similarity as S
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .tensor import Tensor

HEAD_KINDS = ("siamese", "matching", "prototypical")
DEFAULT_DISTANCE = {"prototypical": "neg_euclidean", "matching": "cosine", "siamese": "neg_euclidean"}


class DataError(ValueError):
    """The data cannot support the requested split or episode."""


# -- splits ----------------------------------------------------------------------
@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple
    val_classes: tuple
    test_classes: tuple
    seed: int = 0

    def __post_init__(self):
        tr, va, te = map(set, (self.train_classes, self.val_classes, self.test_classes))
        if tr & va or tr & te or va & te:
            raise DataError("class split sections overlap")

    def section(self, name: str) -> tuple:
        try:
            return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}[name]
        except KeyError:
            raise ValueError(f"unknown split section {name!r}") from None

    def section_of(self, label: str) -> str:
        for name in ("train", "val", "test"):
            if label in self.section(name):
                return name
        raise KeyError(label)

    @property
    def all_classes(self) -> tuple:
        return self.train_classes + self.val_classes + self.test_classes


def make_split(labels: Iterable[str], n_train: int = 35, n_val: int = 5, n_test: int = 10, seed: int = 0) -> ClassSplit:
    """Seeded partition of class labels into train / val / test sections."""
    labels = sorted(set(labels))
    if len(labels) != n_train + n_val + n_test:
        raise DataError(f"split needs {n_train + n_val + n_test} classes, found {len(labels)}")
    order = np.random.default_rng(seed).permutation(len(labels))
    shuffled = [labels[i] for i in order]
    return ClassSplit(
        tuple(sorted(shuffled[:n_train])),
        tuple(sorted(shuffled[n_train : n_train + n_val])),
        tuple(sorted(shuffled[n_train + n_val :])),
        seed,
    )


# -- feature access ------------------------------------------------------------------
class ClassPool(dict):
    """class -> clip ids, remembering the store the ids refer to."""

    def __init__(self, items, store: "FeatureStore"):
        super().__init__(items)
        self.store = store


class FeatureStore:
    """Clip features keyed by clip id, with the class of each clip and an access log."""

    def __init__(self, features: Mapping[str, np.ndarray], labels: Mapping[str, str]):
        self._features = features
        self.labels = dict(labels)
        self.accessed: set = set()

    def __getitem__(self, clip_id: str) -> np.ndarray:
        self.accessed.add(clip_id)
        return self._features[clip_id]

    def __contains__(self, clip_id) -> bool:
        return clip_id in self._features

    def __len__(self) -> int:
        return len(self.labels)

    def pool(self, classes: Sequence[str]) -> ClassPool:
        """class -> sorted clip ids, restricted to ``classes``."""
        wanted = set(classes)
        out: dict = {c: [] for c in sorted(wanted)}
        for cid, lab in self.labels.items():
            if lab in wanted:
                out[lab].append(cid)
        for ids in out.values():
            ids.sort()
        return ClassPool(out, self)

    def batch(self, clip_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self[c] for c in clip_ids])


# -- episodes --------------------------------------------------------------------
@dataclass
class Episode:
    classes: list  # class label of each support group
    support: list  # c lists of k clip ids
    queries: list  # query clip ids
    query_classes: list  # index into ``classes`` per query

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return len(self.support[0])

    @property
    def query(self) -> str:
        return self.queries[0]

    @property
    def query_class(self) -> int:
        return self.query_classes[0]

    def clip_order(self) -> list:
        """Support clips class-major, then the queries."""
        return [c for group in self.support for c in group] + list(self.queries)


def sample_episode(pool: Mapping[str, Sequence[str]], c: int, k: int, rng: np.random.Generator, n_query: int = 1) -> Episode:
    """Draw a c-way k-shot episode; the queries come from clips left out of the support."""
    for label in sorted(pool):
        if len(pool[label]) < k + 1:
            raise DataError(f"class {label!r} has {len(pool[label])} clips; a {k}-shot episode needs at least {k + 1}")
    labels = sorted(pool)
    if len(labels) < c:
        raise DataError(f"{c}-way episodes need {c} classes, pool has {len(labels)}")
    picked = [labels[i] for i in rng.choice(len(labels), size=c, replace=False)]
    query_classes = [int(q) for q in rng.integers(0, c, size=n_query)]
    support, queries = [], []
    per_class_q = {i: query_classes.count(i) for i in range(c)}
    for i, label in enumerate(picked):
        clips = pool[label]
        need = k + per_class_q[i]
        if len(clips) < need:
            raise DataError(f"class {label!r} has {len(clips)} clips; need {need} for this episode")
        chosen = [clips[j] for j in rng.choice(len(clips), size=need, replace=False)]
        support.append(chosen[:k])
        queries.append(chosen[k:])
    ordered_queries = [queries[qc].pop() for qc in query_classes]
    return Episode(picked, support, ordered_queries, query_classes)


# -- heads -----------------------------------------------------------------------
@dataclass
class HeadConfig:
    kind: str = "prototypical"
    attentional: bool = False
    distance: Optional[str] = None
    pooling: str = "avg"
    # SEN-surrogate: score pairs with the mean (or sum) of the second-order matrix
    second_order: bool = False
    reduction: str = "mean"
    aggregate: str = "sum"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        self.distance = S.distance_kind(self.distance or DEFAULT_DISTANCE[self.kind])
        if self.aggregate not in ("sum", "mean"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")
        if self.attentional and self.second_order:
            raise ValueError("attentional and second_order similarity are mutually exclusive")

    @property
    def similarity(self) -> S.SimilarityHead:
        kind = "attentional" if self.attentional else "second_order" if self.second_order else "pooled"
        return S.SimilarityHead(kind, self.pooling, self.distance, self.reduction)

    def to_dict(self) -> dict:
        return asdict(self)


def _expand(x: Tensor, axes: Sequence[int]) -> Tensor:
    shape = list(x.shape)
    for ax in sorted(axes):
        shape.insert(ax, 1)
    return x.reshape(tuple(shape))


def class_scores(head: HeadConfig, support: Tensor, query: Tensor, support_att=None, query_att=None) -> Tensor:
    """Per-class scores for batched episodes.

    support: ``B×c×k×M×T``, query: ``B×Q×M×T``; attentions ``B×c×k×T`` and ``B×Q×T``.
    Returns ``B×Q×c``.
    """
    sim = head.similarity
    if sim.kind == "second_order":
        if head.kind == "prototypical":
            proto = support.mean(axis=2)  # B,c,M,T
            mat = T.matmul(_expand(query, [2]).transpose(), _expand(proto, [1]))  # B,Q,c,T,T
            return S.reduce_second_order(mat, sim.reduction)
        mat = T.matmul(_expand(query, [2, 3]).transpose(), _expand(support, [1]))  # B,Q,c,k,T,T
        pair = S.reduce_second_order(mat, sim.reduction)
    else:
        if sim.kind == "attentional":
            if support_att is None or query_att is None:
                raise ValueError("attentional head needs attention vectors")
            sv, qv = S.attended(support, support_att), S.attended(query, query_att)
        else:
            sv, qv = S.pool(support, sim.pooling), S.pool(query, sim.pooling)
        if head.kind == "prototypical":
            proto = sv.mean(axis=2)  # B,c,M
            return S.distance(_expand(qv, [2]), _expand(proto, [1]), sim.distance)
        pair = S.distance(_expand(qv, [2, 3]), _expand(sv, [1]), sim.distance)  # B,Q,c,k
    if head.kind == "siamese":
        pair = T.sigmoid(pair)
    return pair.sum(axis=-1) if head.aggregate == "sum" else pair.mean(axis=-1)


def episode_loss(scores, true_class) -> Tensor:
    """Mean cross-entropy ``-log softmax(scores)[y]`` over all leading axes."""
    scores = T.as_tensor(scores)
    y = np.asarray(true_class)
    onehot = np.zeros(scores.shape, dtype=scores.dtype)
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    nll = -(T.log_softmax(scores, axis=-1) * Tensor(onehot, dtype=scores.dtype)).sum(axis=-1)
    return nll.mean()


# -- model -----------------------------------------------------------------------
class FewShotModel:
    """Backbone plus a few-shot head."""

    def __init__(self, backbone_cfg: Optional[BackboneConfig] = None, head: Optional[HeadConfig] = None, seed: int = 0):
        self.head = head or HeadConfig()
        cfg = backbone_cfg or BackboneConfig()
        if cfg.attention != self.head.attentional:
            cfg = BackboneConfig(**{**cfg.to_dict(), "attention": self.head.attentional})
        self.backbone = Backbone(cfg, seed=seed)

    @property
    def cfg(self) -> BackboneConfig:
        return self.backbone.cfg

    def train(self):
        self.backbone.train()
        return self

    def eval(self):
        self.backbone.eval()
        return self

    @property
    def training(self) -> bool:
        return self.backbone.training

    def parameters(self) -> list:
        return self.backbone.parameters()

    def zero_grad(self) -> None:
        self.backbone.zero_grad()

    def encode(self, specs) -> tuple:
        """Feature maps (``N×M×T``) and, for attentional heads, attention (``N×T``)."""
        feat = self.backbone.embed(specs)
        att = self.backbone.attend(feat) if self.head.attentional else None
        return feat, att

    def batch_scores(self, feat: Tensor, att: Optional[Tensor], b: int, c: int, k: int, q: int) -> Tensor:
        """Scores ``B×Q×c`` from encodings laid out episode-major (supports then queries)."""
        n = c * k + q
        m, t = feat.shape[-2:]
        f = feat.reshape(b, n, m, t)
        sup = f[:, : c * k].reshape(b, c, k, m, t)
        qry = f[:, c * k :]
        sa = qa = None
        if att is not None:
            a = att.reshape(b, n, t)
            sa, qa = a[:, : c * k].reshape(b, c, k, t), a[:, c * k :]
        return class_scores(self.head, sup, qry, sa, qa)

    def calibrate(self, specs: np.ndarray, batch: int = 64) -> None:
        """Fill batchnorm running statistics from ``specs`` without touching the weights."""
        was = self.training
        self.train()
        with T.no_grad():
            for i in range(0, len(specs), batch):
                self.encode(specs[i : i + batch])
        if not was:
            self.eval()


def episode_scores(ep: Episode, model: FewShotModel, store: FeatureStore) -> Tensor:
    """Class scores (``Q×c``, or ``c`` for a single query) for one episode."""
    specs = store.batch(ep.clip_order())
    feat, att = model.encode(specs)
    scores = model.batch_scores(feat, att, 1, ep.way, ep.shot, len(ep.queries))
    scores = scores.reshape(scores.shape[1:])
    return scores.reshape((ep.way,)) if len(ep.queries) == 1 else scores
