"""Datasets, synthetic data, and non-IID client partitioning."""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError
from .numerics import RandomSource

TRAIN_RATIO = 0.8


@dataclass
class LabeledDataset:
    """Images ``(n, C, H, W)`` in [0, 1] with integer labels below ``num_classes``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ParameterError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientShard:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    train_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    meta: dict = field(default_factory=dict)

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.train_idx, self.test_idx])


# --- loading -------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Decode one IDX file (big-endian magic, dims, then data)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise ParseError(f"{path}: file too short for IDX magic", field="magic", offset=0)
    zero, dtype_code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise ParseError(f"{path}: bad IDX magic", field="magic", offset=0)
    if len(buf) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated IDX dimensions", field="dims", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    need = dtype.itemsize * int(np.prod(dims))
    if len(buf) - start != need:
        raise ParseError(f"{path}: expected {need} data bytes, found {len(buf) - start}",
                         field="data", offset=start)
    return np.frombuffer(buf, dtype=dtype, offset=start).reshape(dims)


def _to_images(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float64)
    if raw.dtype.kind in "ui":
        x = x / 255.0
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4 and x.shape[-1] == 3:
        return x.transpose(0, 3, 1, 2)
    if x.ndim == 4 and x.shape[1] in (1, 3):
        return x
    raise ParseError(f"unsupported IDX image shape {raw.shape}", field="dims")


def _labels_path_for(path: Path) -> Path:
    name = re.sub("images", "labels", path.name)
    name = re.sub(r"idx3", "idx1", name)
    return path.with_name(name)


def _read_csv(path: Path):
    raw = path.read_bytes()
    if not raw.strip():
        raise ParseError(f"{path}: empty file", field="header", offset=0)
    lines = raw.split(b"\n")
    header = lines[0].decode("ascii", errors="replace").strip().split(",")
    if not header or header[0].strip() != "label" or len(header) < 2:
        raise ParseError(f"{path}: header must start with 'label'", field="header", offset=0)
    width = len(header)
    labels, rows = [], []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        text = line.decode("ascii", errors="replace").strip()
        if text:
            cells = text.split(",")
            if len(cells) != width:
                raise ParseError(f"{path}: expected {width} columns, got {len(cells)}",
                                 field="row", offset=offset)
            try:
                labels.append(int(cells[0]))
                rows.append([float(c) for c in cells[1:]])
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell", field="row", offset=offset) from None
        offset += len(line) + 1
    if not rows:
        raise ParseError(f"{path}: no data rows", field="row", offset=offset)
    pixels = np.asarray(rows) / 255.0
    npix = pixels.shape[1]
    side = math.isqrt(npix)
    if side * side == npix:
        images = pixels.reshape(-1, 1, side, side)
    elif npix % 3 == 0 and math.isqrt(npix // 3) ** 2 == npix // 3:
        side = math.isqrt(npix // 3)
        images = pixels.reshape(-1, 3, side, side)
    else:
        raise ParseError(f"{path}: {npix} pixel columns do not form a square image", field="header", offset=0)
    return images, np.asarray(labels, dtype=np.int64)


def load_dataset(path, fmt: str = "idx", labels_path=None, num_classes: int | None = None) -> LabeledDataset:
    """Load images and labels from IDX or CSV, scaling pixels to [0, 1].

    Args:
        path: image IDX file, or a CSV with header ``label,p0,p1,...``.
        fmt: ``"idx"`` or ``"csv"``.
        labels_path: IDX labels file; defaults to the ``images`` -> ``labels``
            sibling of ``path`` (MNIST naming).
        num_classes: defaults to ``max(label) + 1``.
    """
    path = Path(path)
    if fmt == "csv":
        images, labels = _read_csv(path)
    elif fmt == "idx":
        images = _to_images(read_idx(path))
        lpath = Path(labels_path) if labels_path else _labels_path_for(path)
        labels = read_idx(lpath).astype(np.int64).ravel()
        if len(labels) != len(images):
            raise ParseError(f"{lpath}: {len(labels)} labels for {len(images)} images", field="dims", offset=4)
    else:
        raise ParameterError(f"unknown dataset format {fmt!r}")
    if len(labels) == 0:
        raise ParseError(f"{path}: dataset is empty", field="dims")
    if images.min() < 0 or images.max() > 1:
        raise ParseError(f"{path}: pixel values outside [0, 255]", field="data")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(images, labels, k)


# --- synthetic data ------------------------------------------------------

TEXTURE_FREQS = (3.0 * math.pi / 4.0, 3.0 * math.pi / 8.0)
TEXTURE_ANGLES = 8
TEXTURE_BASE = 3.0
TEXTURE_GAIN = 0.02
PIXEL_NOISE = 0.02


def class_means(num_classes: int, latent_dim: int, separation: float, seed: int) -> np.ndarray:
    """Class centres on random orthonormal directions, pairwise ``separation`` apart."""
    if num_classes > latent_dim:
        raise ParameterError(f"{num_classes} classes need a latent space of at least {num_classes} dims")
    gen = RandomSource(seed, 0).generator
    q, _ = np.linalg.qr(gen.normal(size=(latent_dim, num_classes)))
    return (separation / math.sqrt(2.0)) * q.T


def _gratings(dim: int) -> np.ndarray:
    """Spatial phase maps ``(components, dim, dim)`` of the oriented plane waves."""
    yy, xx = np.meshgrid(np.arange(dim, dtype=np.float64), np.arange(dim, dtype=np.float64), indexing="ij")
    waves = []
    for freq in TEXTURE_FREQS:
        for k in range(TEXTURE_ANGLES):
            t = math.pi * k / TEXTURE_ANGLES
            waves.append(freq * (xx * math.cos(t) + yy * math.sin(t)))
    return np.stack(waves)


def generate_synthetic(num_classes: int, per_class: int, dim: int, separation: float, seed: int) -> LabeledDataset:
    """Gaussian class blobs in a texture space, rendered as ``dim x dim`` grayscale images.

    Each sample draws a latent amplitude vector ``base + mean_c + N(0, I)``
    over 16 oriented plane waves (8 angles, 2 frequencies) and renders
    ``0.5 + gain * sum_k a_k cos(phase_k(x) + phi_k)`` with a uniformly random
    phase ``phi_k`` per wave, plus a little pixel noise. Because the phases
    are random, class identity lives in orientation energy rather than in
    any fixed pixel pattern.
    """
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    phase_maps = _gratings(dim)
    n_comp = len(phase_maps)
    means = class_means(num_classes, n_comp, separation, seed)
    gen = RandomSource(seed, 1).generator
    labels = np.repeat(np.arange(num_classes), per_class)
    n = len(labels)
    amp = TEXTURE_BASE + means[labels] + gen.normal(size=(n, n_comp))
    phi = gen.uniform(0.0, 2.0 * math.pi, size=(n, n_comp))
    waves = np.cos(phase_maps[None] + phi[:, :, None, None])
    img = 0.5 + TEXTURE_GAIN * np.einsum("nk,nkhw->nhw", amp, waves)
    img = img + PIXEL_NOISE * gen.normal(size=img.shape)
    images = np.clip(img, 0.0, 1.0)[:, None]
    order = gen.permutation(n)
    return LabeledDataset(images[order], labels[order], num_classes)


def permute_labels(ds: LabeledDataset, perm) -> LabeledDataset:
    """Relabel every sample ``y -> perm[y]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(ds.num_classes)):
        raise ParameterError("perm must be a permutation of the classes")
    return LabeledDataset(ds.images, perm[ds.labels], ds.num_classes)


# --- partitioning --------------------------------------------------------

def split_train_test(indices, rng: RandomSource, ratio: float = TRAIN_RATIO):
    """Shuffle ``indices`` and cut them into disjoint train/test parts."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) < 5:
        raise ParameterError(f"need at least 5 samples to split, got {len(indices)}")
    shuffled = indices[rng.permutation(len(indices))]
    n_train = int(round(ratio * len(indices)))
    return shuffled[:n_train], shuffled[n_train:]


def _make_shard(ds: LabeledDataset, client: int, idx, seed: int, meta=None) -> ClientShard:
    tr, te = split_train_test(idx, RandomSource.for_client(seed, client, "split"))
    return ClientShard(client, ds.subset(tr), ds.subset(te), tr, te, dict(meta or {}))


def partition_shard_based(ds: LabeledDataset, shards_per_class: int, classes_per_client: int,
                          seed: int) -> list[ClientShard]:
    """Give each of ``M = L P / N`` clients one shard from each of ``N`` classes.

    Each class is shuffled and cut into ``P`` equal shards (the remainder is
    dropped). Classes are visited in a random order and shard slots are dealt
    round-robin, so every client receives ``N`` distinct classes and every
    shard is used exactly once.
    """
    L, P, N = ds.num_classes, shards_per_class, classes_per_client
    if P < 1 or N < 1 or N > L:
        raise ParameterError(f"need P >= 1 and 1 <= N <= L, got P={P}, N={N}, L={L}")
    if (L * P) % N:
        raise ParameterError(f"L*P = {L * P} is not divisible by N = {N}")
    m = L * P // N
    gen = RandomSource(seed, 2).generator
    shards = []
    for c in gen.permutation(L):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[gen.permutation(len(idx))]
        size = len(idx) // P
        if size == 0:
            raise ParameterError(f"class {c} has fewer than {P} samples")
        for k in gen.permutation(P):
            shards.append((int(c), idx[k * size:(k + 1) * size]))
    owned = [[] for _ in range(m)]
    classes = [[] for _ in range(m)]
    for slot, (c, idx) in enumerate(shards):
        owned[slot % m].append(idx)
        classes[slot % m].append(c)
    return [_make_shard(ds, i, np.concatenate(owned[i]), seed, {"classes": sorted(classes[i])})
            for i in range(m)]


def partition_alpha_based(ds: LabeledDataset, iid_fraction: float, num_clients: int,
                          samples_per_client: int, seed: int) -> list[ClientShard]:
    """Mix ``floor(gamma R)`` IID samples with samples from one dedicated class.

    Client ``i`` is dedicated to class ``i mod L``. Dedicated samples are drawn
    first for all clients; the IID part is then drawn uniformly from what is
    left, so no sample is handed out twice.
    """
    if not 0.0 <= iid_fraction <= 1.0:
        raise ParameterError(f"iid fraction must be in [0, 1], got {iid_fraction}")
    R, L = samples_per_client, ds.num_classes
    n_iid = int(math.floor(iid_fraction * R + 1e-9))
    n_ded = R - n_iid
    gen = RandomSource(seed, 3).generator
    pools = {c: list(np.flatnonzero(ds.labels == c)[gen.permutation(int((ds.labels == c).sum()))])
             for c in range(L)}
    dedicated = []
    for i in range(num_clients):
        c = i % L
        if len(pools[c]) < n_ded:
            raise ParameterError(f"class {c} has too few samples for client {i}")
        dedicated.append(np.asarray(pools[c][:n_ded], dtype=np.int64))
        pools[c] = pools[c][n_ded:]
    rest = np.sort(np.concatenate([np.asarray(p, dtype=np.int64) for p in pools.values()]))
    if len(rest) < n_iid * num_clients:
        raise ParameterError("not enough samples left for the IID portions")
    rest = rest[gen.permutation(len(rest))]
    out = []
    for i in range(num_clients):
        iid = rest[i * n_iid:(i + 1) * n_iid]
        meta = {"dedicated_class": i % L, "iid_count": n_iid, "dedicated_count": n_ded}
        out.append(_make_shard(ds, i, np.concatenate([dedicated[i], iid]), seed, meta))
    return out
