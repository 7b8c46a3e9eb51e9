"""Desk-scale end-to-end training: Adam, a toy classifier head, a synthetic
three-class dataset, the joint training loop, and classification metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import casnet
from .autodiff import Tensor
from .core import CasNetConfig, EmptySplitError, PointCloud, ShapeMismatchError
from .losses import cosine_loss, subset_loss, total_loss

CLASS_NAMES = ("sphere", "cube", "plane")


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Standard Adam update with bias correction; updates params in place."""
    b1, b2 = betas
    state.t += 1
    correct1 = 1.0 - b1**state.t
    correct2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + eps)


@dataclass
class ToyTaskHead:
    """Per-point MLP, global max pool, linear classifier. Permutation-invariant."""

    mlp: list[tuple[Tensor, Tensor]]
    classifier: tuple[Tensor, Tensor]

    @property
    def n_classes(self) -> int:
        return self.classifier[0].data.shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.mlp:
            out += [w, b]
        out += list(self.classifier)
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def forward(self, points: Tensor) -> Tensor:
        h = points
        for w, b in self.mlp:
            h = ad.relu(ad.add_rowvec(ad.matmul(h, w), b))
        pooled = ad.reshape(ad.max_over_axis(h, axis=0), (1, -1))
        wc, bc = self.classifier
        return ad.add_rowvec(ad.matmul(pooled, wc), bc)

    def predict(self, points: np.ndarray) -> int:
        logits = self.forward(Tensor(points.astype(self.classifier[0].data.dtype, copy=False)))
        return int(logits.data.argmax())

    def to_arrays(self, prefix: str = "head.") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.mlp):
            out[f"{prefix}mlp.{i}.w"] = w.data
            out[f"{prefix}mlp.{i}.b"] = b.data
        out[f"{prefix}cls.w"] = self.classifier[0].data
        out[f"{prefix}cls.b"] = self.classifier[1].data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "head.", requires_grad: bool = False) -> "ToyTaskHead":
        mlp = []
        i = 0
        while f"{prefix}mlp.{i}.w" in arrays:
            mlp.append((Tensor(arrays[f"{prefix}mlp.{i}.w"], requires_grad), Tensor(arrays[f"{prefix}mlp.{i}.b"], requires_grad)))
            i += 1
        return cls(mlp=mlp, classifier=(Tensor(arrays[f"{prefix}cls.w"], requires_grad), Tensor(arrays[f"{prefix}cls.b"], requires_grad)))


def init_head(n_classes: int, hidden: int = 32, dtype=np.float64, seed: int = 0) -> ToyTaskHead:
    rng = np.random.default_rng(seed)

    def affine(fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
        return Tensor(w, True), Tensor(np.zeros(fan_out, dtype=dtype), True)

    return ToyTaskHead(mlp=[affine(3, hidden), affine(hidden, hidden)], classifier=affine(hidden, n_classes))


@dataclass(frozen=True)
class LabeledCloud:
    cloud: PointCloud
    label: int


@dataclass
class DatasetSpec:
    """Synthetic set parameters; 100/30 per class mirrors a 7:3-style split."""

    train_per_class: int = 100
    test_per_class: int = 30
    points_per_cloud: int = 256
    seed: int = 0
    jitter: float = 0.02


@dataclass
class SyntheticDataset:
    train: list[LabeledCloud]
    test: list[LabeledCloud]
    class_names: tuple[str, ...]
    spec: DatasetSpec

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _make_shape(name: str, n: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    if name == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * (1.0 + rng.normal(scale=jitter, size=(n, 1)))
    if name == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1, 1, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for i in range(n):
            a = axis[i]
            others = [j for j in range(3) if j != a]
            pts[i, a] = sign[i]
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts + rng.normal(scale=jitter, size=(n, 3))
    if name == "plane":
        pts = np.zeros((n, 3))
        pts[:, :2] = rng.uniform(-1, 1, size=(n, 2))
        pts[:, 2] = rng.normal(scale=3 * jitter, size=n)
        return pts
    raise ValueError(f"unknown shape {name!r}")


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Seeded unit-scale shapes; same seed reproduces the same dataset."""
    rng = np.random.default_rng(spec.seed)
    train: list[LabeledCloud] = []
    test: list[LabeledCloud] = []
    for label, name in enumerate(CLASS_NAMES):
        for bucket, count in ((train, spec.train_per_class), (test, spec.test_per_class)):
            for _ in range(count):
                pts = _make_shape(name, spec.points_per_cloud, rng, spec.jitter)
                bucket.append(LabeledCloud(PointCloud(pts), label))
    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    return SyntheticDataset(train=train, test=test, class_names=CLASS_NAMES, spec=spec)


@dataclass
class EpochStats:
    epoch: int
    total: float
    task: float
    subset: float
    cosine: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,total,task,subset,cosine,train_acc,test_acc,seconds"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.total:.6f},{e.task:.6f},{e.subset:.6f},{e.cosine:.6f},"
                f"{e.train_acc:.4f},{e.test_acc:.4f},{e.seconds:.3f}"
            )
        return "\n".join(lines) + "\n"


def _predict_with_sampler(item: LabeledCloud, config: CasNetConfig, weights: casnet.CasNetWeights, head: ToyTaskHead) -> int:
    sampled, _ = casnet.sample(item.cloud, config, weights)
    return head.predict(sampled.points)


def _split_accuracy(split: list[LabeledCloud], config, weights, head) -> float:
    correct = sum(1 for it in split if _predict_with_sampler(it, config, weights, head) == it.label)
    return correct / len(split)


def _assert_subset(split: list[LabeledCloud], config, weights, sample_count: int = 4) -> None:
    for it in split[:sample_count]:
        sampled, idx = casnet.sample(it.cloud, config, weights)
        assert idx is not None
        if not np.array_equal(sampled.points, it.cloud.points[idx]):
            raise AssertionError("hard-sampled output is not an exact row subset")


def train(
    config: CasNetConfig,
    dataset: SyntheticDataset,
    epochs: int = 100,
    lr: float = 5e-4,
    batch_size: int = 12,
    early_stop_acc: float | None = None,
    subset_check_every: int = 10,
) -> tuple[casnet.CasNetWeights, ToyTaskHead, TrainHistory]:
    """Jointly optimize sampler and head against the composite loss.

    ASSN uses the soft forward; AHSN uses the hard forward whose backward is
    the straight-through rule. The batch loss is the mean of per-cloud losses,
    each cloud building its own graph. History records every epoch; with
    early_stop_acc set, training stops once test accuracy reaches it.
    """
    config.validate(dataset.spec.points_per_cloud)
    m = config.output_count(dataset.spec.points_per_cloud)
    weights = casnet.init_weights(config, m, dtype=np.float64)
    head = init_head(dataset.n_classes, dtype=np.float64, seed=config.seed + 1)
    params = weights.parameters() + head.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(config.seed + 2)
    history = TrainHistory()

    for epoch in range(epochs):
        started = time.perf_counter()
        order = rng.permutation(len(dataset.train))
        sums = np.zeros(4)
        n_batches = 0
        train_hits = 0
        for lo in range(0, len(order), batch_size):
            batch = [dataset.train[i] for i in order[lo : lo + batch_size]]
            for p in params:
                p.zero_grad()
            batch_sums = np.zeros(4)
            for item in batch:
                _, cache = casnet.forward(item.cloud, config, weights)
                logits = head.forward(cache.p_sp)
                train_hits += int(logits.data.argmax()) == item.label
                task = ad.cross_entropy(logits, np.array([item.label]))
                breakdown = total_loss(
                    task,
                    subset_loss(item.cloud, cache.p_sp),
                    cosine_loss(cache.soft, config.cosine_axis),
                    config.alpha,
                    config.beta,
                )
                contribution = ad.scale(breakdown.total, 1.0 / len(batch))
                if config.mode == "ahsn":
                    casnet.backward_ste(contribution, cache)
                else:
                    ad.backward(contribution)
                batch_sums += breakdown.values()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(params, grads, state, lr)
            sums += batch_sums / len(batch)
            n_batches += 1

        # running train accuracy from the batch forwards; test via fresh inference
        train_acc = train_hits / len(dataset.train)
        test_acc = _split_accuracy(dataset.test, config, weights, head)
        if config.mode == "ahsn" and (epoch % subset_check_every == 0 or epoch == epochs - 1):
            _assert_subset(dataset.test, config, weights)
        avg = sums / n_batches
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                total=avg[0],
                task=avg[1],
                subset=avg[2],
                cosine=avg[3],
                train_acc=train_acc,
                test_acc=test_acc,
                seconds=time.perf_counter() - started,
            )
        )
        if early_stop_acc is not None and test_acc >= early_stop_acc:
            break
    return weights, head, history


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> tuple[float, float, float, float]:
    """Accuracy plus macro-averaged precision/recall/F1.

    Classes that never occur in y_true are excluded from the macro means.
    A class predicted zero times gets precision 0 (and F1 0 when recall is
    also 0).
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise EmptySplitError("cannot evaluate an empty split")
    acc = float((y_true == y_pred).mean())
    precisions, recalls, f1s = [], [], []
    for c in range(n_classes):
        support = (y_true == c).sum()
        if support == 0:
            continue
        tp = ((y_true == c) & (y_pred == c)).sum()
        fp = ((y_true != c) & (y_pred == c)).sum()
        fn = ((y_true == c) & (y_pred != c)).sum()
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return acc, float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s))


def evaluate(
    weights: casnet.CasNetWeights,
    head: ToyTaskHead,
    split: list[LabeledCloud],
    config: CasNetConfig,
) -> tuple[float, float, float, float]:
    """Run the sampler + head over a split and report Acc/Prec/Rec/F1."""
    if not split:
        raise EmptySplitError("cannot evaluate an empty split")
    y_true = np.array([it.label for it in split])
    y_pred = np.array([_predict_with_sampler(it, config, weights, head) for it in split])
    return classification_metrics(y_true, y_pred, head.n_classes)
