"""Embedding bundles, serialization, the category split protocol, and a
synthetic corpus generator.

A bundle holds precomputed per-sample token/patch embedding matrices (32-bit
storage, upcast to 64-bit at compute time), marker positions, labels, and one
prototype row per category. The binary format is little-endian with magic
"HMGB"; a JSON manifest variant carries the same logical schema for tiny
hand-written fixtures.

The generator stands in for upstream text/image encoders so the pipeline runs
at desk scale: categories get Gaussian prototype anchors, samples share a
per-sample base vector across modalities, and a coupling factor controls how
much of that base the patch rows see. Everything is a pure function of the
seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from .errors import FormatError, ValidationError
from .fusion import PrototypeSet, Task

MAGIC = b"HMGB"
FEATURE_MAGIC = b"HMGF"
FORMAT_VERSION = 1
_NO_MARKER = 0xFFFFFFFF


@dataclass
class EmbeddedSample:
    """One text/image pair as embedding matrices plus marker positions."""

    sample_id: str
    label: int
    token_matrix: np.ndarray = field(repr=False)
    patch_matrix: np.ndarray = field(repr=False)
    marker_cls: int = 0
    marker_e1: int = 1
    marker_e2: Optional[int] = None

    def __post_init__(self):
        self.token_matrix = np.asarray(self.token_matrix, dtype=np.float32)
        self.patch_matrix = np.asarray(self.patch_matrix, dtype=np.float32)

    def tokens64(self) -> np.ndarray:
        return np.asarray(self.token_matrix, dtype=np.float64)

    def patches64(self) -> np.ndarray:
        return np.asarray(self.patch_matrix, dtype=np.float64)


@dataclass
class Bundle:
    """A task's worth of embedded samples plus the category prototype set."""

    task: Task
    d: int
    samples: list
    prototypes: PrototypeSet

    def validate(self) -> "Bundle":
        if self.prototypes.width != self.d:
            raise ValidationError(
                f"prototype width {self.prototypes.width} != bundle width {self.d}"
            )
        seen_ids = set()
        for s in self.samples:
            if s.sample_id in seen_ids:
                raise ValidationError(f"duplicate sample id {s.sample_id!r}")
            seen_ids.add(s.sample_id)
            n_tok = s.token_matrix.shape[0]
            if s.token_matrix.ndim != 2 or n_tok < 3:
                raise ValidationError(
                    f"sample {s.sample_id!r} needs >= 3 token rows, got {s.token_matrix.shape}"
                )
            if s.patch_matrix.ndim != 2 or s.patch_matrix.shape[0] < 1:
                raise ValidationError(f"sample {s.sample_id!r} needs >= 1 patch row")
            if s.token_matrix.shape[1] != self.d or s.patch_matrix.shape[1] != self.d:
                raise ValidationError(f"sample {s.sample_id!r} width != bundle width {self.d}")
            if not 0 <= s.label < len(self.prototypes):
                raise ValidationError(f"sample {s.sample_id!r} label {s.label} has no prototype")
            markers = [s.marker_cls, s.marker_e1]
            if self.task.needs_second_entity:
                if s.marker_e2 is None:
                    raise ValidationError(f"sample {s.sample_id!r} lacks E2 marker for MRE")
                markers.append(s.marker_e2)
            elif s.marker_e2 is not None:
                raise ValidationError(f"sample {s.sample_id!r} carries an E2 marker under MET")
            for m in markers:
                if not 0 <= m < n_tok:
                    raise ValidationError(f"sample {s.sample_id!r} marker {m} out of range")
            if not (np.all(np.isfinite(s.token_matrix)) and np.all(np.isfinite(s.patch_matrix))):
                raise ValidationError(f"sample {s.sample_id!r} has non-finite embeddings")
        if not np.all(np.isfinite(self.prototypes.vectors)):
            raise ValidationError("prototype matrix has non-finite entries")
        return self

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def by_id(self) -> dict:
        return {s.sample_id: s for s in self.samples}

    def equals(self, other: "Bundle") -> bool:
        if (
            self.task is not other.task
            or self.d != other.d
            or self.prototypes.names != other.prototypes.names
            or not np.array_equal(self.prototypes.vectors, other.prototypes.vectors)
            or len(self.samples) != len(other.samples)
        ):
            return False
        for a, b in zip(self.samples, other.samples):
            if (
                a.sample_id != b.sample_id
                or a.label != b.label
                or a.marker_cls != b.marker_cls
                or a.marker_e1 != b.marker_e1
                or a.marker_e2 != b.marker_e2
                or not np.array_equal(a.token_matrix, b.token_matrix)
                or not np.array_equal(a.patch_matrix, b.patch_matrix)
            ):
                return False
        return True


# -- binary serialization -----------------------------------------------------


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated", f"expected {n} bytes, got {len(data)}")
    return data


def _write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_bundle(bundle: Bundle, path, fmt: str = "binary") -> None:
    """Serialize a validated bundle; `fmt` is "binary" (HMGB) or "json"."""
    bundle.validate()
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_bundle_to_jsonable(bundle), f)
        return
    if fmt != "binary":
        raise ValidationError(f"unknown bundle format {fmt!r}")
    if hasattr(path, "write"):
        _write_binary(bundle, path)
    else:
        with open(path, "wb") as f:
            _write_binary(bundle, f)


def _write_binary(bundle: Bundle, f: BinaryIO) -> None:
    f.write(MAGIC)
    _write_u32(f, FORMAT_VERSION)
    header = json.dumps(
        {
            "task": bundle.task.value,
            "d": bundle.d,
            "categories": bundle.prototypes.names,
            "sample_count": len(bundle.samples),
        }
    ).encode("utf-8")
    _write_u32(f, len(header))
    f.write(header)
    for s in bundle.samples:
        sid = s.sample_id.encode("utf-8")
        _write_u32(f, len(sid))
        f.write(sid)
        _write_u32(f, s.label)
        _write_u32(f, s.token_matrix.shape[0])
        _write_u32(f, s.patch_matrix.shape[0])
        _write_u32(f, s.marker_cls)
        _write_u32(f, s.marker_e1)
        _write_u32(f, _NO_MARKER if s.marker_e2 is None else s.marker_e2)
        f.write(np.ascontiguousarray(s.token_matrix, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(s.patch_matrix, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(bundle.prototypes.vectors, dtype="<f4").tobytes())


def read_bundle(path) -> Bundle:
    """Load a bundle from a binary HMGB file or a JSON manifest (auto-detected)."""
    if hasattr(path, "read"):
        return _read_any(path)
    with open(path, "rb") as f:
        return _read_any(f)


def _read_any(f: BinaryIO) -> Bundle:
    head = f.read(4)
    if head == MAGIC:
        return _read_binary(f)
    rest = head + f.read()
    try:
        payload = json.loads(rest.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("bad_magic", f"expected magic {MAGIC!r} or a JSON manifest")
    return _bundle_from_jsonable(payload)


def _read_binary(f: BinaryIO) -> Bundle:
    version = _read_u32(f)
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    header_len = _read_u32(f)
    try:
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        task = Task(header["task"])
        d = int(header["d"])
        names = list(header["categories"])
        count = int(header["sample_count"])
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError("bad_header", f"malformed bundle header: {exc}")
    if d < 1:
        raise FormatError("bad_header", f"invalid embedding width {d}")
    samples = []
    for _ in range(count):
        sid = _read_exact(f, _read_u32(f)).decode("utf-8")
        label = _read_u32(f)
        n_tok = _read_u32(f)
        n_patch = _read_u32(f)
        marker_cls = _read_u32(f)
        marker_e1 = _read_u32(f)
        raw_e2 = _read_u32(f)
        if n_tok < 3 or n_patch < 1:
            raise FormatError(
                "invalid_record", f"sample {sid!r} claims {n_tok} tokens / {n_patch} patches"
            )
        tokens = np.frombuffer(_read_exact(f, 4 * n_tok * d), dtype="<f4").reshape(n_tok, d)
        patches = np.frombuffer(_read_exact(f, 4 * n_patch * d), dtype="<f4").reshape(n_patch, d)
        samples.append(
            EmbeddedSample(
                sample_id=sid,
                label=label,
                token_matrix=tokens,
                patch_matrix=patches,
                marker_cls=marker_cls,
                marker_e1=marker_e1,
                marker_e2=None if raw_e2 == _NO_MARKER else raw_e2,
            )
        )
    protos = np.frombuffer(_read_exact(f, 4 * len(names) * d), dtype="<f4").reshape(
        len(names), d
    )
    bundle = Bundle(task=task, d=d, samples=samples, prototypes=PrototypeSet(names, protos))
    return _validate_read(bundle)


def _validate_read(bundle: Bundle) -> Bundle:
    try:
        return bundle.validate()
    except FormatError:
        raise
    except ValidationError as exc:
        if "width" in str(exc):
            raise FormatError("inconsistent_dim", str(exc))
        raise


# -- JSON manifest -------------------------------------------------------------


def _bundle_to_jsonable(bundle: Bundle) -> dict:
    return {
        "format": "embedding-bundle",
        "version": FORMAT_VERSION,
        "task": bundle.task.value,
        "d": bundle.d,
        "categories": bundle.prototypes.names,
        "prototypes": [[float(x) for x in row] for row in bundle.prototypes.vectors],
        "samples": [
            {
                "id": s.sample_id,
                "label": s.label,
                "marker_cls": s.marker_cls,
                "marker_e1": s.marker_e1,
                "marker_e2": s.marker_e2,
                "tokens": [[float(x) for x in row] for row in s.token_matrix],
                "patches": [[float(x) for x in row] for row in s.patch_matrix],
            }
            for s in bundle.samples
        ],
    }


def _bundle_from_jsonable(payload: dict) -> Bundle:
    try:
        if payload.get("format") != "embedding-bundle":
            raise FormatError("bad_magic", "not an embedding-bundle manifest")
        if payload.get("version") != FORMAT_VERSION:
            raise FormatError("bad_version", f"unsupported version {payload.get('version')}")
        task = Task(payload["task"])
        bundle = Bundle(
            task=task,
            d=int(payload["d"]),
            samples=[
                EmbeddedSample(
                    sample_id=s["id"],
                    label=int(s["label"]),
                    token_matrix=np.array(s["tokens"], dtype=np.float32),
                    patch_matrix=np.array(s["patches"], dtype=np.float32),
                    marker_cls=int(s["marker_cls"]),
                    marker_e1=int(s["marker_e1"]),
                    marker_e2=None if s.get("marker_e2") is None else int(s["marker_e2"]),
                )
                for s in payload["samples"]
            ],
            prototypes=PrototypeSet(
                list(payload["categories"]), np.array(payload["prototypes"], dtype=np.float32)
            ),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("bad_header", f"malformed bundle manifest: {exc}")
    return _validate_read(bundle)


# -- feature block export -------------------------------------------------------


def write_feature_block(path, matrix: np.ndarray, meta: dict | None = None) -> None:
    """Dump a float matrix (features per row) in the HMGB-style block layout."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValidationError("feature block requires a 2-D matrix")
    header = json.dumps(
        {"rows": matrix.shape[0], "cols": matrix.shape[1], **(meta or {})}
    ).encode("utf-8")
    opened = not hasattr(path, "write")
    f = open(path, "wb") if opened else path
    try:
        f.write(FEATURE_MAGIC)
        _write_u32(f, FORMAT_VERSION)
        _write_u32(f, len(header))
        f.write(header)
        f.write(np.ascontiguousarray(matrix).tobytes())
    finally:
        if opened:
            f.close()


def read_feature_block(path):
    opened = not hasattr(path, "read")
    f = open(path, "rb") if opened else path
    try:
        if _read_exact(f, 4) != FEATURE_MAGIC:
            raise FormatError("bad_magic", "not a feature block")
        if _read_u32(f) != FORMAT_VERSION:
            raise FormatError("bad_version", "unsupported feature block version")
        header = json.loads(_read_exact(f, _read_u32(f)).decode("utf-8"))
        rows, cols = int(header["rows"]), int(header["cols"])
        data = np.frombuffer(_read_exact(f, 4 * rows * cols), dtype="<f4").reshape(rows, cols)
        return data, header
    finally:
        if opened:
            f.close()


# -- category split protocol ----------------------------------------------------


@dataclass
class GzslSplit:
    """Disjoint category subsets plus the per-instance train/val/test assignment.

    Training uses seen-category instances only; validation holds the held-out
    seen instances plus every instance of the validation categories (its
    unseen portion, used for calibration selection); test holds the remaining
    seen instances plus all unseen-category instances.
    """

    seen_categories: list
    val_categories: list
    unseen_categories: list
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int

    def validate(self, bundle: Bundle) -> "GzslSplit":
        names = bundle.prototypes.names
        partition = self.seen_categories + self.val_categories + self.unseen_categories
        if sorted(partition) != sorted(names):
            raise ValidationError("category subsets do not partition the bundle categories")
        all_ids = [s.sample_id for s in bundle.samples]
        assigned = self.train_ids + self.val_ids + self.test_ids
        if sorted(assigned) != sorted(all_ids):
            raise ValidationError("instance assignment does not partition the bundle samples")
        by_id = bundle.by_id()
        seen = set(self.seen_categories)
        unseen = set(self.unseen_categories)
        for sid in self.train_ids:
            if names[by_id[sid].label] not in seen:
                raise ValidationError(f"non-seen-category instance {sid!r} in train")
        for sid in self.test_ids:
            cat = names[by_id[sid].label]
            if cat in set(self.val_categories):
                raise ValidationError(f"validation-category instance {sid!r} in test")
        for sid in self.val_ids:
            if names[by_id[sid].label] in unseen:
                raise ValidationError(f"unseen-category instance {sid!r} in validation")
        return self

    def to_jsonable(self) -> dict:
        return {
            "seen_categories": self.seen_categories,
            "val_categories": self.val_categories,
            "unseen_categories": self.unseen_categories,
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
            "test_ids": self.test_ids,
            "seed": self.seed,
        }

    @classmethod
    def from_jsonable(cls, payload: dict) -> "GzslSplit":
        try:
            return cls(**{k: payload[k] for k in cls.__dataclass_fields__})
        except (KeyError, TypeError) as exc:
            raise FormatError("bad_header", f"malformed split file: {exc}")


def gzsl_split(
    bundle: Bundle,
    category_counts: tuple,
    instance_ratio: float = 0.70,
    train_val_ratio: float = 0.90,
    seed: int = 0,
) -> GzslSplit:
    """Partition categories into seen/validation/unseen and assign instances.

    Categories are shuffled by seed and cut into the three subsets. For each
    seen category, `instance_ratio` of its instances are selected and split
    `train_val_ratio` into train vs validation (floor rounding, at least one
    instance per cell); the remainder goes to test. Validation-category
    instances all join the validation set, unseen-category instances all join
    test.
    """
    names = bundle.prototypes.names
    n_seen, n_val, n_unseen = (int(x) for x in category_counts)
    if n_seen + n_val + n_unseen != len(names):
        raise ValidationError(
            f"category counts {category_counts} do not sum to {len(names)} categories"
        )
    if n_seen < 1:
        raise ValidationError("at least one seen category is required")
    if not (0.0 < instance_ratio < 1.0 and 0.0 < train_val_ratio < 1.0):
        raise ValidationError("split ratios must lie strictly between 0 and 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(names))
    seen = [names[i] for i in order[:n_seen]]
    val_cats = [names[i] for i in order[n_seen : n_seen + n_val]]
    unseen = [names[i] for i in order[n_seen + n_val :]]

    by_label: dict[int, list] = {}
    for s in bundle.samples:
        by_label.setdefault(s.label, []).append(s.sample_id)

    seen_set, val_set = set(seen), set(val_cats)
    train_ids: list = []
    val_ids: list = []
    test_ids: list = []
    for label, name in enumerate(names):
        ids = by_label.get(label, [])
        if name in seen_set:
            if len(ids) < 4:
                raise ValidationError(
                    f"seen category {name!r} has {len(ids)} instances; need >= 4 to fill all cells"
                )
            perm = rng.permutation(len(ids))
            selected = int(np.floor(len(ids) * instance_ratio))
            n_train = max(1, int(np.floor(selected * train_val_ratio)))
            if n_train == selected:
                n_train -= 1  # keep at least one validation instance
            train_ids.extend(ids[i] for i in perm[:n_train])
            val_ids.extend(ids[i] for i in perm[n_train:selected])
            test_ids.extend(ids[i] for i in perm[selected:])
        elif name in val_set:
            val_ids.extend(ids)
        else:
            test_ids.extend(ids)
    return GzslSplit(
        seen_categories=seen,
        val_categories=val_cats,
        unseen_categories=unseen,
        train_ids=train_ids,
        val_ids=val_ids,
        test_ids=test_ids,
        seed=int(seed),
    ).validate(bundle)


# -- synthetic corpus generator ---------------------------------------------------


@dataclass
class GeneratorSpec:
    """Recipe for a synthetic embedding corpus; fully determined by `seed`."""

    task: Task = Task.MET
    categories: int = 8
    d: int = 32
    samples_per_category: int = 200
    token_range: tuple = (6, 12)
    patch_range: tuple = (4, 9)
    prototype_scale: float = 1.0
    within_spread: float = 0.125
    coupling: float = 0.8
    seed: int = 0
    category_names: Optional[list] = None

    def validate(self) -> "GeneratorSpec":
        if self.categories < 1 or self.samples_per_category < 1:
            raise ValidationError("categories and samples_per_category must be >= 1")
        if self.d < 1:
            raise ValidationError("embedding width d must be >= 1")
        if not (0.0 <= self.coupling <= 1.0):
            raise ValidationError(f"coupling must lie in [0, 1], got {self.coupling}")
        if self.prototype_scale <= 0 or self.within_spread <= 0:
            raise ValidationError("prototype_scale and within_spread must be positive")
        tmin, tmax = self.token_range
        pmin, pmax = self.patch_range
        if tmin < 3 or tmax < tmin:
            raise ValidationError("token_range must satisfy 3 <= min <= max")
        if pmin < 1 or pmax < pmin:
            raise ValidationError("patch_range must satisfy 1 <= min <= max")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.category_names is not None and len(self.category_names) != self.categories:
            raise ValidationError("category_names length must match categories")
        return self

    @classmethod
    def from_jsonable(cls, payload: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown generator spec fields: {sorted(unknown)}")
        kwargs = dict(payload)
        if "task" in kwargs:
            kwargs["task"] = Task(kwargs["task"])
        for key in ("token_range", "patch_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs).validate()


def generate_synthetic_corpus(spec: GeneratorSpec) -> Bundle:
    """Sample a bundle from the generator model.

    Category anchors p_y ~ scale * N(0, I); each sample draws a base vector
    b ~ N(p_y, spread^2 I) shared by both modalities. Token rows are b plus
    row noise; patch rows mix the base with an independent per-sample
    component via the coupling factor, plus row noise. Stored prototypes are
    the anchors perturbed at a quarter of the spread. Per-sample draws come
    from sample-indexed substreams so generation order never matters.
    """
    spec.validate()
    names = spec.category_names or [f"cat{idx:02d}" for idx in range(spec.categories)]
    master = np.random.Generator(np.random.PCG64(spec.seed))
    anchors = spec.prototype_scale * master.standard_normal((spec.categories, spec.d))
    proto_rows = anchors + (spec.within_spread / 4.0) * master.standard_normal(
        (spec.categories, spec.d)
    )
    tmin, tmax = spec.token_range
    pmin, pmax = spec.patch_range
    is_mre = spec.task.needs_second_entity
    samples = []
    index = 0
    for label in range(spec.categories):
        for _ in range(spec.samples_per_category):
            # substream key offset by 1 keeps sample streams clear of the master stream
            srng = np.random.Generator(np.random.PCG64(spec.seed ^ (index + 1)))
            n_tok = int(srng.integers(tmin, tmax + 1))
            n_patch = int(srng.integers(pmin, pmax + 1))
            base = anchors[label] + spec.within_spread * srng.standard_normal(spec.d)
            tokens = base + spec.within_spread * srng.standard_normal((n_tok, spec.d))
            independent = srng.standard_normal(spec.d)
            patch_base = spec.coupling * base + (1.0 - spec.coupling) * independent
            patches = patch_base + spec.within_spread * srng.standard_normal(
                (n_patch, spec.d)
            )
            samples.append(
                EmbeddedSample(
                    sample_id=f"sample-{index:06d}",
                    label=label,
                    token_matrix=tokens,
                    patch_matrix=patches,
                    marker_cls=0,
                    marker_e1=1,
                    marker_e2=2 if is_mre else None,
                )
            )
            index += 1
    bundle = Bundle(
        task=spec.task,
        d=spec.d,
        samples=samples,
        prototypes=PrototypeSet(names, proto_rows.astype(np.float32)),
    )
    return bundle.validate()
