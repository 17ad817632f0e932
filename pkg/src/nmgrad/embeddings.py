"""Per-tile embedding storage, scale fusion, and nested bag assembly.

Embeddings are ingested, never computed here: one matrix per slide and
magnification, stored in a little-endian binary container so round trips
are bit-exact. Instances are fused across magnifications by concatenation
in the fixed order 400x | 100x | 25x.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataFormatError,
    DimensionMismatchError,
    MissingScaleError,
    TruncatedPayloadError,
    ValidationError,
)
from .regions import RegionAssignment, TileRecord

MAGIC = b"NMGE"
FORMAT_VERSION = 1

MAGNIFICATIONS = ("400x", "100x", "25x")
_MAG_CODES = {"400x": 0, "100x": 1, "25x": 2}
_CODE_MAGS = {v: k for k, v in _MAG_CODES.items()}

SCALE_MODES = {
    "mono": ("400x",),
    "di": ("400x", "100x"),
    "tri": ("400x", "100x", "25x"),
}

MAX_INSTANCES_PER_SLIDE = 5000

LABEL_LG = 0
LABEL_HG = 1
GRADE_NAMES = {LABEL_LG: "LG", LABEL_HG: "HG"}
GRADE_VALUES = {"LG": LABEL_LG, "HG": LABEL_HG}


@dataclass
class EmbeddingMatrix:
    """All tile embeddings of one slide at one magnification.

    ``tile_ids`` is strictly ascending; ``values`` is float32 with one row
    per tile id.
    """

    slide_id: str
    magnification: str
    tile_ids: np.ndarray  # (n,) uint64, strictly ascending
    values: np.ndarray    # (n, dim) float32

    def __post_init__(self):
        if self.magnification not in _MAG_CODES:
            raise ValidationError(f"unknown magnification {self.magnification!r}")
        self.tile_ids = np.asarray(self.tile_ids, dtype=np.uint64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionMismatchError(
                f"values must be 2-D, got shape {self.values.shape}"
            )
        if self.tile_ids.shape[0] != self.values.shape[0]:
            raise DimensionMismatchError(
                f"{self.tile_ids.shape[0]} tile ids but {self.values.shape[0]} rows"
            )
        if self.tile_ids.size > 1 and not np.all(np.diff(self.tile_ids.astype(np.int64)) > 0):
            order = np.argsort(self.tile_ids, kind="stable")
            self.tile_ids = self.tile_ids[order]
            self.values = self.values[order]
            if np.any(np.diff(self.tile_ids.astype(np.int64)) == 0):
                raise ValidationError("duplicate tile_id in embedding matrix")

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def row(self, tile_id: int) -> np.ndarray:
        idx = np.searchsorted(self.tile_ids, np.uint64(tile_id))
        if idx >= self.tile_ids.size or self.tile_ids[idx] != np.uint64(tile_id):
            raise MissingScaleError(
                f"slide {self.slide_id}: tile {tile_id} has no "
                f"{self.magnification} embedding"
            )
        return self.values[idx]


_HEADER = struct.Struct("<4sHBIQ")  # magic, version, mag code, dim, row count


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write one embedding matrix to its binary container."""
    path = Path(path)
    n, dim = matrix.values.shape
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, _MAG_CODES[matrix.magnification],
                              dim, n))
        for i in range(n):
            fh.write(struct.pack("<Q", int(matrix.tile_ids[i])))
            fh.write(matrix.values[i].astype("<f4", copy=False).tobytes())


def read_embeddings(path, slide_id: str | None = None,
                    expected_dim: int | None = None) -> EmbeddingMatrix:
    """Read a container written by :func:`write_embeddings`.

    Raises BadMagicError / TruncatedPayloadError / DimensionMismatchError
    depending on what is wrong; nothing is returned on a partial read.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC:
            raise BadMagicError(f"{path}: not an embedding container")
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, version, mag_code, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DimensionMismatchError(f"{path}: unsupported version {version}")
    if mag_code not in _CODE_MAGS:
        raise DataFormatError(f"bad magnification code {mag_code}", str(path))
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(
            f"{path}: dimension {dim} != expected {expected_dim}"
        )
    row_bytes = 8 + 4 * dim
    expected_len = _HEADER.size + count * row_bytes
    if len(data) != expected_len:
        raise TruncatedPayloadError(
            f"{path}: expected {expected_len} bytes, found {len(data)}"
        )
    tile_ids = np.empty(count, dtype=np.uint64)
    values = np.empty((count, dim), dtype=np.float32)
    offset = _HEADER.size
    for i in range(count):
        (tile_ids[i],) = struct.unpack_from("<Q", data, offset)
        offset += 8
        values[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
    if count > 1 and not np.all(np.diff(tile_ids.astype(np.int64)) > 0):
        raise DataFormatError("tile ids not strictly ascending", str(path))
    return EmbeddingMatrix(
        slide_id=slide_id if slide_id is not None else path.stem.split(".")[0],
        magnification=_CODE_MAGS[mag_code],
        tile_ids=tile_ids,
        values=values,
    )


def embedding_filename(slide_id: str, magnification: str) -> str:
    return f"{slide_id}.{magnification}.nmge"


class EmbeddingStore:
    """Directory-backed (or in-memory) lookup of embedding matrices."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[tuple[str, str], EmbeddingMatrix] = {}

    @classmethod
    def from_matrices(cls, matrices) -> "EmbeddingStore":
        store = cls(root=None)
        for m in matrices:
            store._cache[(m.slide_id, m.magnification)] = m
        return store

    def add(self, matrix: EmbeddingMatrix) -> None:
        self._cache[(matrix.slide_id, matrix.magnification)] = matrix

    def load(self, slide_id: str, magnification: str) -> EmbeddingMatrix:
        key = (slide_id, magnification)
        if key not in self._cache:
            if self.root is None:
                raise MissingScaleError(
                    f"no {magnification} embeddings for slide {slide_id}"
                )
            path = self.root / embedding_filename(slide_id, magnification)
            if not path.exists():
                raise MissingScaleError(
                    f"no {magnification} embeddings for slide {slide_id} "
                    f"(missing {path.name})"
                )
            self._cache[key] = read_embeddings(path, slide_id=slide_id)
        return self._cache[key]

    def save_all(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for (slide_id, mag), matrix in sorted(self._cache.items()):
            write_embeddings(matrix, root / embedding_filename(slide_id, mag))


def fuse_scales(tile_id: int, matrices: dict[str, EmbeddingMatrix], mode: str) -> np.ndarray:
    """Concatenate one tile's rows across the mode's magnifications.

    Output is float64 of length ``len(scales) * dim`` in the fixed order
    400x | 100x | 25x restricted to the mode.
    """
    if mode not in SCALE_MODES:
        raise ValidationError(f"unknown scale mode {mode!r}")
    parts = []
    for mag in SCALE_MODES[mode]:
        if mag not in matrices:
            raise MissingScaleError(f"tile {tile_id}: no {mag} embedding matrix")
        parts.append(matrices[mag].row(tile_id).astype(np.float64))
    return np.concatenate(parts)


@dataclass(frozen=True)
class RegionInstances:
    """One region's fused instance matrix; rows follow ascending tile_id."""

    region_id: int
    tile_ids: tuple[int, ...]
    instances: np.ndarray  # (n, D) float64


@dataclass(frozen=True)
class NestedBag:
    """One slide: its weak grade label and its regions of instances."""

    slide_id: str
    label: int
    regions: tuple[RegionInstances, ...]

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    @property
    def num_instances(self) -> int:
        return sum(r.instances.shape[0] for r in self.regions)

    @property
    def instance_dim(self) -> int:
        return int(self.regions[0].instances.shape[1])

    def flat_instances(self) -> np.ndarray:
        """All instances stacked in region order (for flat aggregators)."""
        return np.concatenate([r.instances for r in self.regions], axis=0)


def slide_seed(slide_id: str) -> int:
    """Stable 64-bit seed derived from a slide id."""
    digest = hashlib.sha256(slide_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def assemble_bags(
    manifests: dict[str, list[TileRecord]],
    assignments: dict[str, RegionAssignment],
    store: EmbeddingStore,
    mode: str,
    labels: dict[str, int],
    max_instances: int = MAX_INSTANCES_PER_SLIDE,
) -> tuple[list[NestedBag], list[str]]:
    """Build one nested bag per slide from regions and stored embeddings.

    Slides holding more than ``max_instances`` tiles are uniformly
    subsampled (without replacement, seeded from the slide id) before
    region grouping. Slides left with no populated region are excluded and
    returned in the second element.
    """
    if mode not in SCALE_MODES:
        raise ValidationError(f"unknown scale mode {mode!r}")
    bags: list[NestedBag] = []
    excluded: list[str] = []
    for slide_id in sorted(manifests):
        if slide_id not in labels:
            raise ValidationError(f"no label for slide {slide_id}")
        assignment = assignments.get(slide_id)
        if assignment is None or not assignment.regions:
            excluded.append(slide_id)
            continue
        tile_ids = sorted(t.tile_id for t in manifests[slide_id])
        if len(tile_ids) > max_instances:
            rng = np.random.default_rng([slide_seed(slide_id), max_instances])
            chosen = rng.choice(len(tile_ids), size=max_instances, replace=False)
            retained = {tile_ids[i] for i in chosen}
        else:
            retained = set(tile_ids)

        matrices = {mag: store.load(slide_id, mag) for mag in SCALE_MODES[mode]}
        regions: list[RegionInstances] = []
        for region in assignment.regions:
            members = sorted(t for t in region.tile_ids if t in retained)
            if not members:
                continue
            rows = np.stack([fuse_scales(t, matrices, mode) for t in members])
            regions.append(
                RegionInstances(
                    region_id=region.region_id,
                    tile_ids=tuple(members),
                    instances=rows,
                )
            )
        if not regions:
            excluded.append(slide_id)
            continue
        bags.append(NestedBag(slide_id=slide_id, label=labels[slide_id],
                              regions=tuple(regions)))
    return bags, excluded


# ---------------------------------------------------------------------------
# Label and region-annotation files (JSON lines).
# ---------------------------------------------------------------------------

def read_labels(path) -> dict[str, int]:
    path = Path(path)
    labels: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                slide_id = str(obj["slide_id"])
                grade = str(obj["grade"])
                labels[slide_id] = GRADE_VALUES[grade]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"bad label line: {exc}", str(path), lineno) from exc
    return labels


def write_labels(labels: dict[str, int], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for slide_id in sorted(labels):
            fh.write(json.dumps(
                {"slide_id": slide_id, "grade": GRADE_NAMES[labels[slide_id]]},
                sort_keys=True) + "\n")


def read_region_annotations(path) -> list[tuple[str, int, int]]:
    """Read (slide_id, region_id, grade) annotation triples."""
    path = Path(path)
    out: list[tuple[str, int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["slide_id"]), int(obj["region_id"]),
                            GRADE_VALUES[str(obj["grade"])]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"bad annotation: {exc}", str(path), lineno) from exc
    return out


def write_region_annotations(annotations, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for slide_id, region_id, grade in annotations:
            fh.write(json.dumps(
                {"slide_id": slide_id, "region_id": int(region_id),
                 "grade": GRADE_NAMES[int(grade)]},
                sort_keys=True) + "\n")
