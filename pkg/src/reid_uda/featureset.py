"""Feature records, dataset partitions, the FEATSET file format and synthetic data.

FEATSET layout (all integers little-endian)::

    b"FSET1\\n"
    u32 record_count
    u32 shape_rank            # 1 or 3
    u32 dims[shape_rank]
    record_count x {
        u32 id
        i32 identity          # -1 = absent
        i32 camera            # -1 = absent
        u8  domain            # 0 source, 1 target
        f32 values[prod(dims)]  # row-major, channel-major for rank 3
    }
    [optional partition trailer]
    b"PART" + u8 partition[record_count]   # 0 train, 1 gallery, 2 query

The trailer is only written when a split has gallery or query records; a file
without it loads as an all-train split. Readers that stop after the records
see a plain record list.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .rng import Rng

MAGIC = b"FSET1\n"
TRAILER = b"PART"
_HEAD = struct.Struct("<II")
_REC = struct.Struct("<Iiib")


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1


class Partition(enum.IntEnum):
    TRAIN = 0
    GALLERY = 1
    QUERY = 2


def check_feature(values, rank: int | None = None) -> np.ndarray:
    """Validate a FeatureVector (rank 1) or FeatureMap (rank 3) payload."""
    arr = np.asarray(values, dtype=np.float64)
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got shape {arr.shape}")
    if arr.ndim == 1:
        if arr.shape[0] < 1:
            raise ShapeError("feature vector must have dimension >= 1")
    elif arr.ndim == 3:
        if arr.shape[0] < 2 or arr.shape[1] < 2 or arr.shape[2] < 1:
            raise ShapeError(f"feature map needs C >= 2, H >= 2, W >= 1, got {arr.shape}")
    else:
        raise ShapeError(f"features are rank 1 or 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature contains non-finite values")
    return arr


@dataclass(frozen=True)
class SampleRecord:
    id: int
    feature: np.ndarray
    identity: int | None = None
    camera: int | None = None
    domain: Domain = Domain.SOURCE

    def __post_init__(self):
        arr = np.asarray(self.feature)
        if arr.ndim not in (1, 3):
            raise ShapeError(f"features are rank 1 or 3, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "feature", arr)
        object.__setattr__(self, "domain", Domain(self.domain))

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.identity == other.identity
            and self.camera == other.camera
            and self.domain == other.domain
            and self.feature.shape == other.feature.shape
            and np.array_equal(self.feature, other.feature)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[SampleRecord, ...] = ()
    gallery: tuple[SampleRecord, ...] = ()
    query: tuple[SampleRecord, ...] = ()

    def __post_init__(self):
        for name in ("train", "gallery", "query"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def identity_count(self) -> int:
        return len({r.identity for r in self.train if r.identity is not None})

    def records(self) -> list[tuple[Partition, SampleRecord]]:
        out = [(Partition.TRAIN, r) for r in self.train]
        out += [(Partition.GALLERY, r) for r in self.gallery]
        out += [(Partition.QUERY, r) for r in self.query]
        return out

    def feature_shape(self) -> tuple[int, ...] | None:
        shapes = {r.feature.shape for _, r in self.records()}
        if len(shapes) > 1:
            raise ShapeError(f"records have mixed feature shapes {sorted(shapes)}")
        return shapes.pop() if shapes else None

    def validate(self) -> None:
        """Check the evaluability invariant and source labelling."""
        for _, r in self.records():
            if r.domain == Domain.SOURCE and r.identity is None:
                raise DataError(f"source record {r.id} has no identity")
        gallery_ids = {r.identity for r in self.gallery}
        for r in self.query:
            if r.identity not in gallery_ids:
                raise DataError(f"query identity {r.identity} missing from gallery")


def stack_features(records: Sequence[SampleRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    return np.stack([r.feature for r in records]).astype(np.float64)


def identities(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([-1 if r.identity is None else r.identity for r in records], dtype=np.int64)


def cameras(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([-1 if r.camera is None else r.camera for r in records], dtype=np.int64)


# -- persistence -------------------------------------------------------------


def save_featset(split: DatasetSplit | Iterable[SampleRecord], path, meta: dict | None = None) -> None:
    if not isinstance(split, DatasetSplit):
        split = DatasetSplit(train=tuple(split))
    shape = split.feature_shape() or (1,)
    if len(shape) not in (1, 3):
        raise ShapeError(f"unsupported feature rank {len(shape)}")
    items = split.records()
    buf = bytearray(MAGIC)
    buf += _HEAD.pack(len(items), len(shape))
    buf += struct.pack(f"<{len(shape)}I", *shape)
    for _, r in items:
        buf += _REC.pack(
            r.id,
            -1 if r.identity is None else r.identity,
            -1 if r.camera is None else r.camera,
            int(r.domain),
        )
        buf += np.ascontiguousarray(r.feature, dtype="<f4").tobytes()
    if split.gallery or split.query:
        buf += TRAILER + bytes(int(p) for p, _ in items)
    path = Path(path)
    path.write_bytes(bytes(buf))
    if meta is not None:
        meta_path = path.with_name(path.stem + ".meta.json")
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_featset(path) -> DatasetSplit:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    try:
        count, rank = _HEAD.unpack_from(data, pos)
        pos += _HEAD.size
        if rank not in (1, 3):
            raise FormatError(f"{path}: shape rank {rank} not in (1, 3)")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if any(d == 0 for d in shape):
        raise FormatError(f"{path}: zero dimension in shape {shape}")
    n_values = int(np.prod(shape))
    rec_size = _REC.size + 4 * n_values
    end = pos + count * rec_size
    if len(data) < end:
        raise FormatError(f"{path}: expected {count} records, file truncated")

    parts = [Partition.TRAIN] * count
    tail = data[end:]
    if tail:
        if tail[:4] != TRAILER or len(tail) != 4 + count:
            raise FormatError(f"{path}: unrecognised trailing bytes")
        try:
            parts = [Partition(b) for b in tail[4:]]
        except ValueError as exc:
            raise FormatError(f"{path}: bad partition code") from exc

    buckets: dict[Partition, list[SampleRecord]] = {p: [] for p in Partition}
    for i in range(count):
        rid, ident, cam, dom = _REC.unpack_from(data, pos)
        pos += _REC.size
        if dom not in (0, 1):
            raise FormatError(f"{path}: record {i} has domain byte {dom}")
        values = np.frombuffer(data, dtype="<f4", count=n_values, offset=pos).reshape(shape)
        pos += 4 * n_values
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}: record {i} has non-finite values")
        rec = SampleRecord(
            id=rid,
            feature=values.astype(np.float32),
            identity=None if ident == -1 else ident,
            camera=None if cam == -1 else cam,
            domain=Domain(dom),
        )
        buckets[parts[i]].append(rec)
    return DatasetSplit(
        train=buckets[Partition.TRAIN],
        gallery=buckets[Partition.GALLERY],
        query=buckets[Partition.QUERY],
    )


def merged_identity_count(train_ids: int, test_ids: int) -> int:
    """Identity count when a source dataset's train and test identities are pooled."""
    if train_ids < 0 or test_ids < 0:
        raise ValueError("identity counts must be non-negative")
    return train_ids + test_ids


# -- synthetic two-domain data ----------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale two-domain generator.

    Every identity is a latent centre. A sample's latent appearance is its
    centre plus a nuisance offset ``S z`` confined to ``nuisance_dims`` fixed
    directions shared by both domains (pose/viewpoint-like variation,
    ``z ~ N(0, nuisance_scale^2)``). Source samples are the latent appearance
    plus isotropic noise. The target domain pushes the latent appearance of
    fresh identities through ``x -> A x + b`` with
    ``A = I + shift * G / sqrt(dim)`` and ``b = shift * u`` before the noise is
    added, so ``domain_shift_scale = 0`` makes both domains identically
    distributed. A source-trained model learns to suppress the source
    nuisance directions; under the shift the nuisance moves to ``A S``. ``test_identities`` further identities per domain (disjoint
    from the training ones) populate query and gallery.
    """

    identities: int = 64
    samples_per_id: int = 20
    dim: int = 32
    domain_shift_scale: float = 2.0
    noise_scale: float = 0.3
    nuisance_dims: int = 4
    nuisance_scale: float = 1.0
    seed: int = 0
    test_identities: int | None = None
    query_per_id: int = 2
    cameras: int = 4

    def __post_init__(self):
        if self.identities < 2 or self.samples_per_id < 2:
            raise ValueError("need identities >= 2 and samples_per_id >= 2")
        if self.nuisance_dims < 0 or self.nuisance_scale < 0 or self.noise_scale < 0:
            raise ValueError("noise and nuisance settings must be >= 0")
        if self.query_per_id >= self.samples_per_id:
            raise ValueError("query_per_id must leave gallery samples")


def _domain_transform(cfg: SynthConfig, rng: Rng):
    g = rng.normal((cfg.dim, cfg.dim))
    u = rng.normal(cfg.dim)
    a = np.eye(cfg.dim) + cfg.domain_shift_scale * g / np.sqrt(cfg.dim)
    return a, cfg.domain_shift_scale * u


def _matvec_rows(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rows of ``v @ a.T``, accumulated column by column.

    Explicit accumulation instead of BLAS keeps the result platform-exact.
    """
    out = np.zeros((v.shape[0], a.shape[0]))
    for j in range(a.shape[1]):
        out += v[:, j, None] * a[:, j]
    return out


def _nuisance_basis(cfg: SynthConfig, rng: Rng) -> np.ndarray:
    if cfg.nuisance_dims == 0:
        return np.zeros((cfg.dim, 0))
    return rng.normal((cfg.dim, cfg.nuisance_dims)) / np.sqrt(cfg.nuisance_dims)


def _make_domain(cfg: SynthConfig, domain: Domain, rng: Rng, basis: np.ndarray) -> DatasetSplit:
    n_train = cfg.identities
    n_test = cfg.identities if cfg.test_identities is None else cfg.test_identities
    n_ids = n_train + n_test
    centres = rng.derive("centres").normal((n_ids, cfg.dim))
    latent = np.repeat(centres, cfg.samples_per_id, axis=0)
    if cfg.nuisance_dims:
        z = rng.derive("nuisance").normal((n_ids * cfg.samples_per_id, cfg.nuisance_dims)) * cfg.nuisance_scale
        latent = latent + _matvec_rows(basis, z)
    if domain == Domain.TARGET:
        a, b = _domain_transform(cfg, rng.derive("transform"))
        latent = _matvec_rows(a, latent) + b
    latent = latent.reshape(n_ids, cfg.samples_per_id, cfg.dim)
    noise = rng.derive("noise").normal((n_ids, cfg.samples_per_id, cfg.dim)) * cfg.noise_scale
    base_identity = 0 if domain == Domain.SOURCE else n_ids

    train, gallery, query = [], [], []
    rid = 0
    for i in range(n_ids):
        for s in range(cfg.samples_per_id):
            rec = SampleRecord(
                id=rid,
                feature=(latent[i, s] + noise[i, s]).astype(np.float32),
                identity=base_identity + i if (domain == Domain.SOURCE or i >= n_train) else None,
                camera=s % cfg.cameras,
                domain=domain,
            )
            rid += 1
            if i < n_train:
                train.append(rec)
            elif s < cfg.query_per_id:
                query.append(rec)
            else:
                gallery.append(rec)
    return DatasetSplit(train=train, gallery=gallery, query=query)


def synth_generate(cfg: SynthConfig) -> tuple[DatasetSplit, DatasetSplit]:
    """Source and target splits; target training records carry no identity."""
    root = Rng(cfg.seed).derive("synth")
    basis = _nuisance_basis(cfg, root.derive("nuisance_basis"))
    source = _make_domain(cfg, Domain.SOURCE, root.derive("source"), basis)
    target = _make_domain(cfg, Domain.TARGET, root.derive("target"), basis)
    return source, target
