"""Manifest ingestion, PPM/PGM codecs, resizing, the synthetic pedestrian
corpus and video-sequence pooling."""
from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, ShapeError

IMAGE_H, IMAGE_W = 160, 60
NORM_BOUND = 10.0


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: int
    camera: int
    frame: int | None = None


# --------------------------------------------------------------------------- manifest

_FIELDS = ("path", "identity", "camera", "frame")


def load_manifest(csv_path: str | os.PathLike) -> list[SampleRecord]:
    """Parse ``path,identity,camera[,frame]`` lines; ``#`` starts a comment.

    Relative image paths are resolved against the manifest's directory.
    Image files are not opened here; a missing file surfaces in load_image.
    """
    csv_path = Path(csv_path)
    base = csv_path.parent
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            row = next(csv.reader([text]))
            row = [c.strip() for c in row]
            if len(row) not in (3, 4):
                raise DataFormatError(f"{csv_path}:{lineno}: expected 3 or 4 fields, got {len(row)}")
            values = []
            for pos, (name, raw) in enumerate(zip(_FIELDS[1:], row[1:]), start=2):
                try:
                    v = int(raw)
                except ValueError:
                    raise DataFormatError(
                        f"{csv_path}:{lineno}: field {pos} ({name}) must be an integer, got {raw!r}") from None
                if v < 0:
                    raise DataFormatError(f"{csv_path}:{lineno}: field {pos} ({name}) must be >= 0, got {v}")
                values.append(v)
            if not row[0]:
                raise DataFormatError(f"{csv_path}:{lineno}: field 1 (path) is empty")
            path = row[0] if os.path.isabs(row[0]) else str(base / row[0])
            if path in seen:
                raise DataFormatError(f"{csv_path}:{lineno}: duplicate path {row[0]!r} (first seen on line {seen[path]})")
            seen[path] = lineno
            records.append(SampleRecord(path, values[0], values[1], values[2] if len(values) > 2 else None))
    return records


def write_manifest(path: str | os.PathLike, records: Iterable[SampleRecord], relative_to=None) -> None:
    base = Path(relative_to) if relative_to is not None else Path(path).parent
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# path,identity,camera[,frame]\n")
        for r in records:
            p = os.path.relpath(r.path, base) if os.path.isabs(r.path) else r.path
            tail = f",{r.frame}" if r.frame is not None else ""
            fh.write(f"{p},{r.identity},{r.camera}{tail}\n")


# --------------------------------------------------------------------------- codecs


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataFormatError("truncated header")
    return buf[start:pos], pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Decode a binary P6 PPM (maxval 255) into uint8 [H, W, 3]."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    try:
        magic, pos = _read_token(buf, 0)
        if magic != b"P6":
            raise DataFormatError(f"unsupported image type {magic[:8]!r}; only binary PPM (P6) is accepted")
        w, pos = _read_token(buf, pos)
        h, pos = _read_token(buf, pos)
        mx, pos = _read_token(buf, pos)
        W, H, maxval = int(w), int(h), int(mx)
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}") from None
    except ValueError:
        raise DataFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    need = W * H * 3
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise DataFormatError(f"{path}: truncated pixel data ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(H, W, 3).copy()


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"write_ppm expects uint8 [H, W, 3], got {img.dtype} {img.shape}")
    H, W, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError(f"write_pgm expects uint8 [H, W], got {img.dtype} {img.shape}")
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    _, pos = _read_token(buf, pos)
    W, H = int(w), int(h)
    return np.frombuffer(buf[pos + 1 : pos + 1 + W * H], dtype=np.uint8).reshape(H, W).copy()


# --------------------------------------------------------------------------- resize / normalize


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of [H, W, C] with half-pixel centers and edge clamping."""
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.astype(np.float64)

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(H, out_h)
    x0, x1, fx = axis(W, out_w)
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def decode_image(path: str | os.PathLike, size: tuple[int, int] = (IMAGE_H, IMAGE_W)) -> np.ndarray:
    """PPM -> resized float [3, H, W] in [0, 1] (not mean-subtracted)."""
    raw = read_ppm(path)
    resized = resize_bilinear(raw, *size) / 255.0
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def load_image(path: str | os.PathLike, mean: np.ndarray | None = None,
               size: tuple[int, int] = (IMAGE_H, IMAGE_W), dtype=np.float32) -> np.ndarray:
    """Decode, resize to 60x160, scale to [0, 1] and subtract the per-channel mean."""
    img = decode_image(path, size)
    if mean is not None:
        img = img - np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    if np.abs(img).max(initial=0.0) > NORM_BOUND:
        raise DataFormatError(f"{path}: normalized values exceed +-{NORM_BOUND}")
    return img.astype(dtype)


def channel_mean(images: np.ndarray) -> np.ndarray:
    """Per-channel mean of [N, 3, H, W] images (in [0, 1] units)."""
    return images.astype(np.float64).mean(axis=(0, 2, 3))


@dataclass
class ImageSet:
    """Decoded images in manifest order plus their labels.

    ``images`` holds raw [0, 1] values; :meth:`normalized` subtracts a mean,
    by default the mean of this set (use the training mean for eval sets).
    """

    records: list[SampleRecord]
    images: np.ndarray
    mean: np.ndarray | None = None
    labels: np.ndarray = field(init=False)
    cameras: np.ndarray = field(init=False)
    label_of: dict[int, int] = field(init=False)

    def __post_init__(self):
        ids = sorted({r.identity for r in self.records})
        self.label_of = {pid: i for i, pid in enumerate(ids)}
        self.labels = np.array([self.label_of[r.identity] for r in self.records], dtype=np.int64)
        self.cameras = np.array([r.camera for r in self.records], dtype=np.int64)
        if self.mean is None:
            self.mean = channel_mean(self.images) if len(self.images) else np.zeros(3)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    @property
    def num_identities(self) -> int:
        return len(self.label_of)

    def normalized(self, mean: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
        m = self.mean if mean is None else np.asarray(mean)
        return (self.images - m.reshape(1, 3, 1, 1)).astype(dtype)

    @classmethod
    def from_manifest(cls, manifest: str | os.PathLike, mean: np.ndarray | None = None,
                      size: tuple[int, int] = (IMAGE_H, IMAGE_W)) -> "ImageSet":
        records = load_manifest(manifest)
        return cls.from_records(records, mean, size)

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], mean: np.ndarray | None = None,
                     size: tuple[int, int] = (IMAGE_H, IMAGE_W)) -> "ImageSet":
        imgs = np.stack([decode_image(r.path, size) for r in records]) if records else \
            np.zeros((0, 3, *size))
        return cls(list(records), imgs, mean)


# --------------------------------------------------------------------------- synthetic corpus

_SKIN = np.array([[0.87, 0.72, 0.60], [0.67, 0.49, 0.36], [0.45, 0.31, 0.22], [0.95, 0.82, 0.70]])


def _identity_template(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Layered pedestrian: background, head, torso block, legs, plus a small
    glyph at an identity-specific spot on the torso."""
    img = np.empty((H, W, 3))
    img[:] = 0.45 + 0.1 * rng.random(3)
    cx = W // 2
    # head
    yy, xx = np.mgrid[0:H, 0:W]
    head = ((yy - 0.12 * H) / (0.08 * H)) ** 2 + ((xx - cx) / (0.15 * W)) ** 2 <= 1.0
    img[head] = _SKIN[rng.integers(len(_SKIN))]
    # torso and legs
    torso = rng.random(3)
    legs = rng.random(3)
    t0, t1 = int(0.20 * H), int(0.55 * H)
    img[t0:t1, int(0.2 * W) : int(0.8 * W)] = torso
    l0, l1 = t1, int(0.95 * H)
    img[l0:l1, int(0.25 * W) : cx - 1] = legs
    img[l0:l1, cx + 1 : int(0.75 * W)] = legs
    # glyph: 8x8 binary pattern in a contrasting color
    gy = rng.integers(t0 + 2, t1 - 10)
    gx = rng.integers(int(0.2 * W) + 1, int(0.8 * W) - 9)
    pattern = rng.random((8, 8)) < 0.5
    color = 1.0 - torso
    patch = img[gy : gy + 8, gx : gx + 8]
    patch[pattern] = color
    return img


def _shift_edge(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    H, W = img.shape[:2]
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return img[rows][:, cols]


def synth_generate(num_ids: int, imgs_per_id_per_cam: int, seed: int, out_dir: str | os.PathLike,
                   num_cameras: int = 2, noise_sigma: float = 0.02) -> list[SampleRecord]:
    """Write a deterministic two-camera pedestrian corpus plus ``manifest.csv``.

    Camera 0 shows the identity template; camera 1 applies a global
    brightness change and a small translation. Every image adds Gaussian
    pixel noise, so images of one identity differ only by camera effects
    and noise.
    """
    if num_ids < 2:
        raise DataFormatError(f"synthetic corpus needs at least 2 identities, got {num_ids}")
    if imgs_per_id_per_cam < 1:
        raise DataFormatError("imgs_per_id_per_cam must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    records: list[SampleRecord] = []
    for k in range(num_ids):
        template = _identity_template(np.random.default_rng([seed, k]), IMAGE_H, IMAGE_W)
        for cam in range(num_cameras):
            view = template
            if cam > 0:
                crng = np.random.default_rng([seed, k, cam])
                gain = 0.8 + 0.1 * cam * crng.random()
                dy, dx = int(crng.integers(2, 5)), int(crng.integers(-2, 3))
                view = np.clip(_shift_edge(template, dy, dx) * gain + 0.03, 0, 1)
            for j in range(imgs_per_id_per_cam):
                nrng = np.random.default_rng([seed, k, cam, j, 7])
                img = np.clip(view + nrng.normal(0, noise_sigma, view.shape), 0, 1)
                name = f"id_{k}_cam{cam}_{j}.ppm"
                write_ppm(out / name, np.round(img * 255).astype(np.uint8))
                records.append(SampleRecord(str(out / name), k, cam))
    write_manifest(out / "manifest.csv", records)
    return records


# --------------------------------------------------------------------------- video


def aggregate_sequence(frame_features: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise max over per-frame feature vectors."""
    frames = [np.asarray(f) for f in frame_features]
    if not frames:
        raise ValueError("aggregate_sequence: empty frame list")
    ref = frames[0].shape
    for f in frames[1:]:
        if f.shape != ref:
            raise ShapeError(f"aggregate_sequence: frame shapes differ ({ref} vs {f.shape})")
    return np.maximum.reduce(frames)


def group_sequences(records: Sequence[SampleRecord]) -> dict[tuple[int, int], list[SampleRecord]]:
    """Group records by (identity, camera), ordered by frame index."""
    groups: dict[tuple[int, int], list[SampleRecord]] = defaultdict(list)
    for r in records:
        groups[(r.identity, r.camera)].append(r)
    return {k: sorted(v, key=lambda r: (r.frame is None, r.frame or 0)) for k, v in groups.items()}
