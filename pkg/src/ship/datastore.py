"""Dataset manifests, few-shot sampling, base/new splits and the binary feature store."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"SHIPFS1\0"
ORIGINS = ("real", "synthetic")
SPLITS = ("train", "val", "test")
NORM_TOL = 1e-5


class DataError(ValueError):
    """Raised for malformed manifests, feature stores or sampling requests."""


class ClassVocabulary(tuple):
    """Ordered, duplicate-free tuple of class names in canonical (sorted) order."""

    def __new__(cls, names: Iterable[str] = ()):
        names = list(names)
        seen = set()
        for name in names:
            if not isinstance(name, str) or not name:
                raise DataError(f"invalid class name: {name!r}")
            if name in seen:
                raise DataError(f"duplicate class: {name!r}")
            seen.add(name)
        # byte-wise ordering of UTF-8, not locale collation
        return super().__new__(cls, sorted(names, key=lambda s: s.encode("utf-8")))

    def index(self, name):  # type: ignore[override]
        try:
            return super().index(name)
        except ValueError:
            raise DataError(f"unknown class: {name!r}") from None

    def __repr__(self):
        return f"ClassVocabulary({list(self)!r})"


def _check_norms(features: np.ndarray) -> None:
    if len(features) == 0:
        return
    norms = np.linalg.norm(features.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise DataError(f"row {bad[0]} has norm {norms[bad[0]]:.8f}, expected unit norm")


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    """Unit-norm feature rows with class-name labels and a real/synthetic origin tag."""

    features: np.ndarray
    labels: tuple
    origin: tuple

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        feats = np.ascontiguousarray(feats)
        feats.setflags(write=False)
        labels = tuple(str(l) for l in self.labels)
        if isinstance(self.origin, str):
            origin = (self.origin,) * len(labels)
        else:
            origin = tuple(self.origin)
        if len(labels) != len(feats) or len(origin) != len(feats):
            raise DataError(
                f"length mismatch: {len(feats)} rows, {len(labels)} labels, {len(origin)} origins"
            )
        for o in set(origin):
            if o not in ORIGINS:
                raise DataError(f"invalid origin tag: {o!r}")
        _check_norms(feats)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def empty(cls, d: int) -> "LabeledFeatureSet":
        return cls(np.zeros((0, d), dtype=np.float32), (), ())

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> ClassVocabulary:
        return ClassVocabulary(set(self.labels))

    def subset(self, rows: Sequence[int]) -> "LabeledFeatureSet":
        rows = list(rows)
        return LabeledFeatureSet(
            self.features[rows] if rows else np.zeros((0, self.dim), np.float32),
            tuple(self.labels[i] for i in rows),
            tuple(self.origin[i] for i in rows),
        )

    def concat(self, other: "LabeledFeatureSet") -> "LabeledFeatureSet":
        if len(other) and len(self) and other.dim != self.dim:
            raise DataError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return LabeledFeatureSet(
            np.concatenate([self.features, other.features], axis=0),
            self.labels + other.labels,
            self.origin + other.origin,
        )

    def equals(self, other: "LabeledFeatureSet") -> bool:
        """Bitwise equality of features, labels and origins."""
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels == other.labels
            and self.origin == other.origin
        )


# --------------------------------------------------------------------------
# feature store


def write_feature_store(fs: LabeledFeatureSet, path) -> None:
    n, d = fs.features.shape
    meta = json.dumps(
        [{"label": l, "origin": o} for l, o in zip(fs.labels, fs.origin)],
        ensure_ascii=False,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(fs.features.astype("<f4", copy=False).tobytes(order="C"))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def read_feature_store(path) -> LabeledFeatureSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature store not found: {path}")
    buf = path.read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise DataError(f"bad magic in {path}: {buf[:len(MAGIC)]!r}")
    off = len(MAGIC)
    if len(buf) < off + 8:
        raise DataError(f"truncated payload in {path}: missing header")
    n, d = struct.unpack_from("<II", buf, off)
    off += 8
    nbytes = 4 * n * d
    if len(buf) < off + nbytes + 4:
        raise DataError(f"truncated payload in {path}: expected {n}x{d} float32 matrix")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += nbytes
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + mlen:
        raise DataError(f"truncated payload in {path}: label block")
    try:
        meta = json.loads(buf[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed label block in {path}: {exc}") from None
    if len(meta) != n:
        raise DataError(f"dimension mismatch in {path}: header says {n} rows, label block has {len(meta)}")
    return LabeledFeatureSet(
        feats.astype(np.float32),
        tuple(m["label"] for m in meta),
        tuple(m["origin"] for m in meta),
    )


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    name: str
    vocabulary: ClassVocabulary
    features_path: Path
    labels: tuple
    splits: tuple
    store: LabeledFeatureSet = field(repr=False)
    unseen_classes: ClassVocabulary = ClassVocabulary()

    def items(self, split: str | None = None, classes: Iterable[str] | None = None) -> list[int]:
        """Item indices (in file order) with the given split tag and class membership."""
        keep = None if classes is None else set(classes)
        return [
            i
            for i, (lab, sp) in enumerate(zip(self.labels, self.splits))
            if (split is None or sp == split) and (keep is None or lab in keep)
        ]

    def rows(self, indices: Sequence[int]) -> LabeledFeatureSet:
        return self.store.subset(indices)

    @property
    def seen_classes(self) -> ClassVocabulary:
        unseen = set(self.unseen_classes)
        return ClassVocabulary(c for c in self.vocabulary if c not in unseen)


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise DataError(f"malformed manifest {where}: missing field {key!r}")
    if not isinstance(obj[key], kind):
        raise DataError(f"malformed manifest {where}: field {key!r} has wrong type")
    return obj[key]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise DataError(f"malformed manifest {path}: top level must be an object")
    name = _require(raw, "name", str, str(path))
    classes = _require(raw, "classes", list, str(path))
    feats_rel = _require(raw, "features", str, str(path))
    items = _require(raw, "items", list, str(path))
    vocab = ClassVocabulary(classes)
    known = set(vocab)
    labels, splits = [], []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise DataError(f"malformed manifest {path}: items[{i}] is not an object")
        lab = _require(item, "label", str, f"{path} items[{i}]")
        sp = _require(item, "split", str, f"{path} items[{i}]")
        if lab not in known:
            raise DataError(f"label not in vocabulary: items[{i}].label = {lab!r}")
        if sp not in SPLITS:
            raise DataError(f"malformed manifest {path}: items[{i}].split = {sp!r}")
        labels.append(lab)
        splits.append(sp)
    unseen = raw.get("unseen_classes", [])
    if not isinstance(unseen, list):
        raise DataError(f"malformed manifest {path}: field 'unseen_classes' has wrong type")
    for u in unseen:
        if u not in known:
            raise DataError(f"label not in vocabulary: unseen_classes entry {u!r}")
    fpath = (path.parent / feats_rel).resolve()
    if not fpath.exists():
        raise DataError(f"feature store not found: {feats_rel}")
    store = read_feature_store(fpath)
    if len(store) != len(items):
        raise DataError(
            f"row-count mismatch for 'features': store has {len(store)} rows, manifest has {len(items)} items"
        )
    for i, (a, b) in enumerate(zip(store.labels, labels)):
        if a != b:
            raise DataError(f"label mismatch at items[{i}]: manifest {b!r}, store {a!r}")
    return DatasetManifest(name, vocab, fpath, tuple(labels), tuple(splits), store, ClassVocabulary(unseen))


def write_manifest(path, name: str, classes: Sequence[str], features: str,
                   labels: Sequence[str], splits: Sequence[str],
                   unseen_classes: Sequence[str] | None = None) -> None:
    doc = {
        "name": name,
        "classes": list(classes),
        "features": features,
        "items": [{"label": l, "split": s} for l, s in zip(labels, splits)],
    }
    if unseen_classes:
        doc["unseen_classes"] = list(unseen_classes)
    Path(path).write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# splits and sampling


@dataclass(frozen=True)
class ClassSplit:
    base: ClassVocabulary
    new: ClassVocabulary


def split_base_new(vocab: Sequence[str]) -> ClassSplit:
    """First ceil(C/2) classes in canonical order are base, the rest new."""
    vocab = ClassVocabulary(vocab)
    if len(vocab) < 2:
        raise DataError(f"need at least 2 classes to split, got {len(vocab)}")
    k = math.ceil(len(vocab) / 2)
    return ClassSplit(ClassVocabulary(vocab[:k]), ClassVocabulary(vocab[k:]))


def class_rng(*keys: int) -> np.random.Generator:
    """Independent PRNG stream keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def few_shot_indices(manifest: DatasetManifest, classes: Sequence[str], shots: int, seed: int) -> list[int]:
    if shots <= 0:
        raise DataError(f"shots must be positive, got {shots}")
    out = []
    for name in ClassVocabulary(classes):
        pool = manifest.items("train", [name])
        if len(pool) < shots:
            raise DataError(f"class {name!r} has {len(pool)} train items, fewer than shots={shots}")
        rng = class_rng(seed, manifest.vocabulary.index(name))
        pick = rng.choice(len(pool), size=shots, replace=False)
        out.extend(pool[j] for j in sorted(pick))
    return out


def sample_few_shot(manifest: DatasetManifest, classes: Sequence[str], shots: int, seed: int) -> LabeledFeatureSet:
    """Draw `shots` train items per class without replacement.

    Each class gets its own PRNG stream keyed by (seed, index in the manifest
    vocabulary), so the draw for one class does not depend on which other
    classes were requested.
    """
    return manifest.rows(few_shot_indices(manifest, classes, shots, seed))
