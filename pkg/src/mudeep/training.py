"""Pair sampling, translation augmentation and the three-stage SGD schedule.

Stage 1 trains the verification path alone. Stage 2 freezes everything but
the identity classifier and fits it on frozen embeddings. Stage 3 trains
all parameters on the weighted joint loss.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .data import ImageSet
from .errors import ConfigError, DataFormatError, NumericError
from .model import SAME, MuDeep
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "stage", "lr", "loss_ver", "loss_cls", "acc_ver")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.001
    momentum: float = 0.0
    decay_every: int = 50_000
    decay_factor: float = 0.1
    neg_pos_ratio: float = 2.0
    aug_copies: int = 5
    aug_shift: float = 0.05
    total_iters: int = 1000
    stage_iters: tuple[int, ...] = ()
    cls_loss_weight: float = 1.0
    ver_loss_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.stage_iters = tuple(int(v) for v in self.stage_iters)
        for name in ("batch_size", "decay_every", "aug_copies", "total_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("lr0", "decay_factor", "neg_pos_ratio", "cls_loss_weight", "ver_loss_weight"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.momentum < 0 or self.momentum >= 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.aug_shift < 0.5:
            raise ConfigError(f"train.aug_shift must lie in [0, 0.5), got {self.aug_shift}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.stage_iters and (len(self.stage_iters) != 3 or min(self.stage_iters) < 0):
            raise ConfigError(f"train.stage_iters must be three non-negative counts, got {self.stage_iters}")
        if self.cls_loss_weight <= self.ver_loss_weight:
            raise ConfigError("stage 3 requires cls_loss_weight > ver_loss_weight")

    @property
    def stages(self) -> tuple[int, int, int]:
        """Iterations per stage; defaults to a 60/10/30 split of total_iters."""
        if self.stage_iters:
            return tuple(self.stage_iters)  # type: ignore[return-value]
        s1 = round(0.6 * self.total_iters)
        s2 = round(0.1 * self.total_iters)
        return s1, s2, self.total_iters - s1 - s2

    def lr_at(self, iteration: int) -> float:
        return self.lr0 * self.decay_factor ** (iteration // self.decay_every)


# --------------------------------------------------------------------------- augmentation


def translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift [..., H, W] by (dy, dx) with edge replication:
    out[r, c] = img[clamp(r - dy), clamp(c - dx)]."""
    H, W = img.shape[-2:]
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return img[..., rows[:, None], cols[None, :]]


def sample_shift(shape: Sequence[int], rng: np.random.Generator, frac: float = 0.05) -> tuple[int, int]:
    H, W = shape[-2:]
    my, mx = int(round(frac * H)), int(round(frac * W))
    return int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1))


def augment_translate(img: np.ndarray, rng: np.random.Generator, frac: float = 0.05) -> np.ndarray:
    """Random 2-D translation, uniform over +-frac of each spatial dimension."""
    dy, dx = sample_shift(img.shape, rng, frac)
    return translate(img, dy, dx)


def augmentation_shifts(num_images: int, copies: int, shape, rng: np.random.Generator,
                        frac: float = 0.05) -> np.ndarray:
    """Per-image shift table [num_images, copies, 2]; copy 0 is the original."""
    shifts = np.zeros((num_images, copies, 2), dtype=np.int64)
    for i in range(num_images):
        for c in range(1, copies):
            shifts[i, c] = sample_shift(shape, rng, frac)
    return shifts


# --------------------------------------------------------------------------- pairs


@dataclass
class PairBatch:
    idx_a: np.ndarray
    idx_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    same: np.ndarray
    label_a: np.ndarray
    label_b: np.ndarray

    def __len__(self) -> int:
        return len(self.idx_a)

    def __getitem__(self, sl) -> "PairBatch":
        return PairBatch(*(getattr(self, f)[sl] for f in
                           ("idx_a", "idx_b", "var_a", "var_b", "same", "label_a", "label_b")))

    @property
    def num_positive(self) -> int:
        return int((self.same == SAME).sum())


def positive_pairs(dataset: ImageSet) -> list[tuple[int, int]]:
    """All same-identity pairs whose images come from different cameras
    (image from the lower camera index first)."""
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(dataset.records):
        by_id.setdefault(r.identity, []).append(i)
    pairs = []
    for pid in sorted(by_id):
        idx = by_id[pid]
        for a in idx:
            for b in idx:
                if dataset.cameras[a] < dataset.cameras[b]:
                    pairs.append((a, b))
    return pairs


def _check_pairable(dataset: ImageSet) -> None:
    if dataset.num_identities < 2:
        raise DataFormatError(f"pair sampling needs at least 2 identities, got {dataset.num_identities}")
    cams: dict[int, set[int]] = {}
    for r in dataset.records:
        cams.setdefault(r.identity, set()).add(r.camera)
    if not any(len(c) >= 2 for c in cams.values()):
        raise DataFormatError("no identity has images from two cameras; cannot form positive pairs")


def sample_pairs(dataset: ImageSet, cfg: TrainConfig, rng: np.random.Generator) -> PairBatch:
    """One shuffled epoch: every cross-camera positive pair plus
    round(neg_pos_ratio * positives) random different-identity pairs.
    Each side draws one of ``aug_copies`` translation variants."""
    _check_pairable(dataset)
    pos = positive_pairs(dataset)
    n_pos = len(pos)
    n_neg = int(round(cfg.neg_pos_ratio * n_pos))
    labels, cams = dataset.labels, dataset.cameras
    M = len(dataset)
    neg = []
    while len(neg) < n_neg:
        a, b = rng.integers(M, size=2)
        if labels[a] == labels[b]:
            continue
        # prefer cross-camera negatives, like the positives
        if cams[a] == cams[b] and len(set(cams.tolist())) > 1:
            continue
        if cams[a] > cams[b]:
            a, b = b, a
        neg.append((int(a), int(b)))
    pairs = np.array(pos + neg, dtype=np.int64).reshape(-1, 2)
    same = np.array([SAME] * n_pos + [1 - SAME] * n_neg, dtype=np.int64)
    order = rng.permutation(len(pairs))
    pairs, same = pairs[order], same[order]
    var = rng.integers(cfg.aug_copies, size=(len(pairs), 2))
    return PairBatch(pairs[:, 0], pairs[:, 1], var[:, 0], var[:, 1], same,
                     labels[pairs[:, 0]], labels[pairs[:, 1]])


class PairStream:
    """Endless sequence of fixed-size batches drawn epoch by epoch."""

    def __init__(self, dataset: ImageSet, cfg: TrainConfig, rng: np.random.Generator):
        self.dataset, self.cfg, self.rng = dataset, cfg, rng
        self._epoch: PairBatch | None = None
        self._pos = 0
        self.epochs = 0

    def next(self) -> PairBatch:
        B = self.cfg.batch_size
        parts = []
        need = B
        while need:
            if self._epoch is None or self._pos >= len(self._epoch):
                self._epoch = sample_pairs(self.dataset, self.cfg, self.rng)
                self._pos = 0
                self.epochs += 1
            take = min(need, len(self._epoch) - self._pos)
            parts.append(self._epoch[self._pos : self._pos + take])
            self._pos += take
            need -= take
        if len(parts) == 1:
            return parts[0]
        return PairBatch(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                           ("idx_a", "idx_b", "var_a", "var_b", "same", "label_a", "label_b")))


# --------------------------------------------------------------------------- training loop


@dataclass
class MetricsRow:
    iteration: int
    stage: int
    lr: float
    loss_ver: float | None
    loss_cls: float | None
    acc_ver: float | None

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.iteration), str(self.stage), repr(float(self.lr)),
                fmt(self.loss_ver), fmt(self.loss_cls), fmt(self.acc_ver)]


def write_metrics_csv(path: str | os.PathLike, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def _check_finite(value: float, term: str, iteration: int, lr: float) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {term} loss ({value}) at iteration {iteration}, lr {lr:g}")


class Trainer:
    """Owns the optimizer state and the global iteration counter."""

    def __init__(self, model: MuDeep, dataset: ImageSet, cfg: TrainConfig, start_iteration: int = 0):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 0x5EED])
        model.reseed_dropout(cfg.seed)
        self.X = dataset.normalized()
        self.shifts = augmentation_shifts(len(dataset), cfg.aug_copies, self.X.shape, self.rng, cfg.aug_shift)
        self.pairs = PairStream(dataset, cfg, self.rng)
        self.iteration = start_iteration
        self.velocity: dict[str, np.ndarray] = {}
        self.metrics: list[MetricsRow] = []

    # data ------------------------------------------------------------------

    def images(self, idx: np.ndarray, var: np.ndarray) -> np.ndarray:
        out = np.empty((len(idx), *self.X.shape[1:]), dtype=self.X.dtype)
        for k, (i, v) in enumerate(zip(idx, var)):
            dy, dx = self.shifts[i, v]
            out[k] = self.X[i] if dy == 0 and dx == 0 else translate(self.X[i], dy, dx)
        return out

    # optimization ----------------------------------------------------------

    def _set_trainable(self, stage: int) -> None:
        cls = {id(p) for p in self.model.classifier_parameters()}
        for p in self.model.parameters():
            if stage == 1:
                p.frozen = id(p) in cls
            elif stage == 2:
                p.frozen = id(p) not in cls
            else:
                p.frozen = False

    def sgd_step(self, lr: float) -> None:
        mom = self.cfg.momentum
        for p in self.model.parameters():
            if p.frozen or p.grad is None:
                continue
            if mom:
                v = self.velocity.get(p.name)
                if v is None:
                    v = self.velocity[p.name] = np.zeros_like(p.data)
                v *= mom
                v -= lr * p.grad
                p.data += v
            else:
                p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)

    def step(self, stage: int) -> MetricsRow:
        cfg, model = self.cfg, self.model
        use_cls = model.classifier is not None
        if stage == 2 and not use_cls:
            raise ConfigError("stage 2 needs the classification subnet")
        self._set_trainable(stage)
        batch = self.pairs.next()
        xa = self.images(batch.idx_a, batch.var_a)
        xb = self.images(batch.idx_b, batch.var_b)
        lr = cfg.lr_at(self.iteration)
        model.zero_grad()
        loss_ver = loss_cls = None
        if stage == 2:
            emb_a = model.embed(xa, training=False, branch=0).embedding
            emb_b = model.embed(xb, training=False, branch=1).embedding
            ver_logits = model.verification_logits(emb_a, emb_b, training=False).data
            with Tape() as tape:
                l_cls = ops.add(
                    ops.softmax_cross_entropy(model.classification_logits(emb_a, True), batch.label_a),
                    ops.softmax_cross_entropy(model.classification_logits(emb_b, True), batch.label_b))
            loss_cls = float(l_cls.data)
            _check_finite(loss_cls, "classification", self.iteration, lr)
            tape.backward(l_cls)
        else:
            with_cls = stage == 3 and use_cls
            with Tape() as tape:
                out = model.forward_pair(xa, xb, training=True, with_cls=with_cls)
                l_ver = ops.softmax_cross_entropy(out.ver_logits, batch.same)
                total = l_ver
                if with_cls:
                    l_cls = ops.add(ops.softmax_cross_entropy(out.cls_a, batch.label_a),
                                    ops.softmax_cross_entropy(out.cls_b, batch.label_b))
                    total = ops.add(ops.mul(l_cls, cfg.cls_loss_weight), ops.mul(l_ver, cfg.ver_loss_weight))
            loss_ver = float(l_ver.data)
            _check_finite(loss_ver, "verification", self.iteration, lr)
            if with_cls:
                loss_cls = float(l_cls.data)
                _check_finite(loss_cls, "classification", self.iteration, lr)
            tape.backward(total)
            ver_logits = out.ver_logits.data
        self.sgd_step(lr)
        acc = float((ver_logits.argmax(axis=1) == batch.same).mean())
        row = MetricsRow(self.iteration, stage, lr, loss_ver, loss_cls, acc)
        self.metrics.append(row)
        self.iteration += 1
        return row

    def run_stage(self, stage: int, iters: int,
                  callback: Callable[[MetricsRow], bool | None] | None = None) -> list[MetricsRow]:
        """Run ``iters`` steps; stop early if ``callback`` returns True."""
        rows = []
        for _ in range(iters):
            row = self.step(stage)
            rows.append(row)
            if callback is not None and callback(row):
                break
        self._set_trainable(3)
        return rows

    def run(self, callback=None) -> list[MetricsRow]:
        """Run the remaining schedule from ``self.iteration`` (0 for a fresh run)."""
        s1, s2, s3 = self.cfg.stages
        if self.model.classifier is None:
            s2 = 0
        log.info("training stages %s from iteration %d", (s1, s2, s3), self.iteration)
        start = 0
        for stage, n in ((1, s1), (2, s2), (3, s3)):
            end = start + n
            todo = end - max(self.iteration, start)
            if todo > 0:
                rows = self.run_stage(stage, todo, callback)
                if len(rows) < todo:
                    break
            start = end
        return self.metrics


def train(model: MuDeep, dataset: ImageSet, cfg: TrainConfig, callback=None) -> Trainer:
    trainer = Trainer(model, dataset, cfg)
    trainer.run(callback)
    return trainer


def verification_accuracy(model: MuDeep, X: np.ndarray, pairs: PairBatch, batch: int = 64) -> float:
    """Eval-mode accuracy of the same/different decision on ``pairs``
    (un-augmented images)."""
    from .evaluation import embed_images

    emb = embed_images(model, X, batch)
    correct = 0
    for s in range(0, len(pairs), batch):
        sl = slice(s, s + batch)
        logits = model.verification_logits(Tensor._wrap(emb[pairs.idx_a[sl]]),
                                           Tensor._wrap(emb[pairs.idx_b[sl]])).data
        correct += int((logits.argmax(axis=1) == pairs.same[sl]).sum())
    return correct / max(len(pairs), 1)
