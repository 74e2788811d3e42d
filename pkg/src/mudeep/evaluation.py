"""Single-shot CMC evaluation, pair scoring and saliency export."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import ImageSet, write_pgm
from .errors import ConfigError, ProtocolError
from .model import SAME, MuDeep
from .tensor import Tensor

BACKENDS = ("verification", "euclidean")


@dataclass
class CmcResult:
    """``curve[k-1]`` is the fraction of probes whose match ranks within the top k."""

    curve: np.ndarray
    trials: int
    num_probes: int
    gallery_size: int
    protocol: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        if k < 1:
            raise ValueError("rank must be >= 1")
        return float(self.curve[min(k, len(self.curve)) - 1])

    def summary(self) -> str:
        return "  ".join(f"Rank-{k}: {100 * self.rank(k):.2f}%" for k in (1, 5, 10))

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("rank", "accuracy"))
            for k, v in enumerate(self.curve, start=1):
                w.writerow((k, repr(float(v))))


def match_ranks(scores: np.ndarray, probe_ids: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """1-based rank of the true match for each probe row.

    Higher score is better. Equal scores are ordered by gallery index, so a
    tie with an earlier gallery entry pushes the true match down.
    """
    scores = np.asarray(scores, dtype=np.float64)
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    P, G = scores.shape
    ranks = np.empty(P, dtype=np.int64)
    cols = np.arange(G)
    for p in range(P):
        hits = np.flatnonzero(gallery_ids == probe_ids[p])
        if hits.size == 0:
            raise ProtocolError(f"probe identity {probe_ids[p]} has no gallery entry")
        t = hits[0]
        s = scores[p]
        ranks[p] = 1 + int((s > s[t]).sum()) + int(((s == s[t]) & (cols < t)).sum())
    return ranks


def cmc_from_scores(scores: np.ndarray, probe_ids, gallery_ids, max_rank: int | None = None) -> np.ndarray:
    G = np.asarray(scores).shape[1]
    K = G if max_rank is None else max_rank
    ranks = match_ranks(scores, probe_ids, gallery_ids)
    return np.array([(ranks <= k).mean() for k in range(1, K + 1)])


def cmc_trials(scores: np.ndarray, probe_ids, gallery_ids, trials: int,
               rng: np.random.Generator) -> CmcResult:
    """Average CMC over ``trials`` random single-shot galleries.

    ``scores`` covers every probe against every gallery candidate. Each trial
    keeps one candidate per identity, chosen uniformly.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    ids = np.unique(gallery_ids)
    missing = sorted(set(probe_ids.tolist()) - set(ids.tolist()))
    if missing:
        raise ProtocolError(f"probe identities missing from the gallery: {missing[:10]}")
    members = [np.flatnonzero(gallery_ids == i) for i in ids]
    total = np.zeros(len(ids))
    for _ in range(trials):
        pick = np.array([m[rng.integers(len(m))] for m in members])
        total += cmc_from_scores(scores[:, pick], probe_ids, gallery_ids[pick])
    return CmcResult(total / trials, trials, len(probe_ids), len(ids))


# --------------------------------------------------------------------------- model scoring


def embed_images(model: MuDeep, X: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode embeddings (one branch; both are identical when tied)."""
    out = [model.embed(X[s : s + batch], training=False).embedding.data for s in range(0, len(X), batch)]
    if not out:
        return np.zeros((0, model.cfg.embedding_dim), dtype=X.dtype)
    return np.concatenate(out)


def score_embeddings(model: MuDeep, emb_p: np.ndarray, emb_g: np.ndarray,
                     backend: str = "verification") -> np.ndarray:
    """[P, G] similarity matrix: P(same) from the verification head, or
    negative Euclidean distance between embeddings."""
    if backend == "euclidean":
        # direct differences: the expanded |a|^2 + |b|^2 - 2ab form cancels badly
        g = np.asarray(emb_g, dtype=np.float64)
        return np.stack([-np.linalg.norm(g - np.asarray(e, dtype=np.float64), axis=1) for e in emb_p]
                        ) if len(emb_p) else np.zeros((0, len(g)))
    if backend != "verification":
        raise ConfigError(f"unknown scoring backend {backend!r}; expected one of {BACKENDS}")
    P, G = len(emb_p), len(emb_g)
    scores = np.empty((P, G))
    for p in range(P):
        a = Tensor._wrap(np.repeat(emb_p[p : p + 1], G, axis=0))
        logits = model.verification_logits(a, Tensor._wrap(emb_g), training=False).data
        scores[p] = ops.softmax(logits)[:, SAME]
    return scores


def score_pair(model: MuDeep, img_a: np.ndarray, img_b: np.ndarray, backend: str = "verification") -> float:
    ea = embed_images(model, img_a[None])
    eb = embed_images(model, img_b[None])
    return float(score_embeddings(model, ea, eb, backend)[0, 0])


def cmc_single_shot(model: MuDeep, probe_set: ImageSet, gallery_set: ImageSet, trials: int,
                    rng: np.random.Generator, backend: str = "verification",
                    mean: np.ndarray | None = None) -> CmcResult:
    """Single-shot CMC; ``mean`` should be the training mean."""
    m = probe_set.mean if mean is None else mean
    emb_p = embed_images(model, probe_set.normalized(m))
    emb_g = embed_images(model, gallery_set.normalized(m))
    res = cmc_trials(score_embeddings(model, emb_p, emb_g, backend),
                     probe_set.identities, gallery_set.identities, trials, rng)
    res.protocol = {"backend": backend, "trials": trials}
    return res


def split_by_camera(dataset: ImageSet, probe_camera: int = 0, gallery_camera: int = 1
                    ) -> tuple[ImageSet, ImageSet]:
    def subset(cam):
        idx = np.flatnonzero(dataset.cameras == cam)
        if idx.size == 0:
            raise ProtocolError(f"no images from camera {cam}")
        return ImageSet([dataset.records[i] for i in idx], dataset.images[idx], dataset.mean)

    return subset(probe_camera), subset(gallery_camera)


# --------------------------------------------------------------------------- saliency


def heatmap(x: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map becomes zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(x * 255).astype(np.uint8)


def top_channels(alpha: np.ndarray, m: int = 3) -> np.ndarray:
    """[streams, m] channel indices with the largest |alpha| per stream
    (stable: ties keep the lower channel)."""
    order = np.argsort(-np.abs(alpha), axis=1, kind="stable")
    return order[:, :m]


def export_saliency(model: MuDeep, img_a: np.ndarray, img_b: np.ndarray, out_dir: str | os.PathLike,
                    top_m: int = 3) -> list[Path]:
    """Write per-stream, per-contribution and fused heatmaps (PGM) for the
    strongest channels of each stream, plus alpha.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = model.forward_pair(img_a[None], img_b[None], training=False, with_cls=False)
    n_streams = len(res.streams_a)
    C = res.fused_a.data.shape[1]
    alpha = res.alpha if res.alpha is not None else np.ones((n_streams, C))
    written = []
    top = top_channels(alpha, top_m)
    for tag, streams, fused in (("a", res.streams_a, res.fused_a), ("b", res.streams_b, res.fused_b)):
        for i in range(n_streams):
            for c in top[i]:
                F = streams[i].data[0, c]
                for kind, img in (("stream", F), ("contrib", alpha[i, c] * F)):
                    p = out / f"{tag}_{kind}{i + 1}_ch{c}.pgm"
                    write_pgm(p, _to_u8(heatmap(img)))
                    written.append(p)
        for c in np.unique(top):
            p = out / f"{tag}_fused_ch{c}.pgm"
            write_pgm(p, _to_u8(heatmap(fused.data[0, c])))
            written.append(p)
    p = out / "alpha.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in alpha:
            w.writerow([repr(float(v)) for v in row])
    written.append(p)
    return written
