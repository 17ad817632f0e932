"""Region definition over a slide's tile grid.

Tiles live on an integer grid (one step = one tile). Tiles that touch,
including diagonally, form blobs; blobs below a lower size threshold are
discarded, and blobs at or above an upper threshold are split into
near-equal pieces by KMeans on the tile coordinates. The surviving groups
are the regions used as inner bags downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CoordinateCollisionError, DataFormatError, ValidationError

TISSUE_CLASSES = (
    "urothelium",
    "lamina propria",
    "muscle",
    "blood",
    "damage",
    "background",
)

# Offsets of the 8-neighbourhood on the tile grid.
_NEIGHBOURS = tuple(
    (dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)
)


@dataclass(frozen=True)
class TileRecord:
    """One tile's identity and grid position within a slide."""

    slide_id: str
    tile_id: int
    gx: int
    gy: int
    tissue_class: str | None = None

    def __post_init__(self):
        if self.tile_id < 0:
            raise ValidationError(f"tile_id must be non-negative, got {self.tile_id}")
        if self.tissue_class is not None and self.tissue_class not in TISSUE_CLASSES:
            raise ValidationError(
                f"unknown tissue_class {self.tissue_class!r} for tile {self.tile_id}"
            )


@dataclass(frozen=True)
class Blob:
    """A maximal 8-connected group of tiles. ``size`` is the member count."""

    tile_ids: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.tile_ids)


@dataclass(frozen=True)
class Region:
    region_id: int
    tile_ids: tuple[int, ...]
    centroid: tuple[float, float]
    parent_blob_id: int


@dataclass(frozen=True)
class RegionConfig:
    """Thresholds and KMeans settings for region definition."""

    t_lower: int = 8
    t_upper: int = 200
    kmeans_seed: int = 0
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if self.t_lower < 1:
            raise ValidationError("t_lower must be >= 1")
        if self.t_upper <= self.t_lower:
            raise ValidationError("t_upper must exceed t_lower")
        if self.kmeans_max_iters < 1:
            raise ValidationError("kmeans_max_iters must be positive")

    def to_dict(self) -> dict:
        return {
            "t_lower": self.t_lower,
            "t_upper": self.t_upper,
            "kmeans_seed": self.kmeans_seed,
            "kmeans_max_iters": self.kmeans_max_iters,
        }


@dataclass(frozen=True)
class RegionAssignment:
    """Result of region definition for one slide."""

    slide_id: str
    regions: tuple[Region, ...]
    discarded_tiles: int
    config: RegionConfig
    usable: bool = True


def extract_blobs(tiles: Iterable[TileRecord]) -> list[Blob]:
    """Group tiles into maximal 8-connected components.

    Blobs are ordered by their smallest member tile_id; members are sorted
    ascending. Raises on duplicate coordinates or mixed slide ids.
    """
    tiles = list(tiles)
    if not tiles:
        return []
    slide_ids = {t.slide_id for t in tiles}
    if len(slide_ids) > 1:
        raise ValidationError(f"tiles span multiple slides: {sorted(slide_ids)}")

    by_coord: dict[tuple[int, int], TileRecord] = {}
    for t in tiles:
        key = (t.gx, t.gy)
        if key in by_coord:
            raise CoordinateCollisionError(
                f"slide {t.slide_id}: tiles {by_coord[key].tile_id} and "
                f"{t.tile_id} both at grid {key}"
            )
        by_coord[key] = t

    seen: set[tuple[int, int]] = set()
    blobs: list[Blob] = []
    # Deterministic scan order: ascending tile_id.
    for start in sorted(tiles, key=lambda t: t.tile_id):
        key = (start.gx, start.gy)
        if key in seen:
            continue
        stack = [key]
        seen.add(key)
        members = []
        while stack:
            cx, cy = stack.pop()
            members.append(by_coord[(cx, cy)].tile_id)
            for dx, dy in _NEIGHBOURS:
                nkey = (cx + dx, cy + dy)
                if nkey in by_coord and nkey not in seen:
                    seen.add(nkey)
                    stack.append(nkey)
        blobs.append(Blob(tile_ids=tuple(sorted(members))))
    blobs.sort(key=lambda b: b.tile_ids[0])
    return blobs


def filter_blobs(blobs: Sequence[Blob], t_lower: int) -> tuple[list[Blob], int]:
    """Keep blobs of size >= t_lower; return (kept, discarded tile count)."""
    if t_lower < 1:
        raise ValidationError("t_lower must be >= 1")
    kept = [b for b in blobs if b.size >= t_lower]
    discarded = sum(b.size for b in blobs if b.size < t_lower)
    return kept, discarded


def _kmeans_lloyd(points: np.ndarray, k: int, seed, max_iters: int) -> np.ndarray:
    """Deterministic Lloyd's KMeans with k-means++ seeding.

    Returns an integer label per point; every label in 0..k-1 is non-empty
    (empty clusters are repaired by stealing the point farthest from its
    assigned centroid).
    """
    n = points.shape[0]
    if k <= 0 or k > n:
        raise ValidationError(f"cluster count {k} invalid for {n} points")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    rng = np.random.Generator(np.random.Philox(seed))

    # k-means++ initialisation.
    centers = np.empty((k, 2), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    dist_sq = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist_sq.sum()
        if total <= 0.0:
            # All remaining points coincide with a center; pick uniformly.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centers[j] = points[idx]
        dist_sq = np.minimum(dist_sq, np.sum((points - centers[j]) ** 2, axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)

        # Repair empty clusters before accepting the assignment.
        for j in range(k):
            if np.any(new_labels == j):
                continue
            own = d2[np.arange(n), new_labels]
            # Only points from clusters that can spare one (size >= 2).
            counts = np.bincount(new_labels, minlength=k)
            movable = counts[new_labels] >= 2
            own = np.where(movable, own, -np.inf)
            steal = int(np.argmax(own))
            new_labels[steal] = j
            d2[steal, :] = 0.0
            d2[steal, j] = -1.0  # pin the stolen point to cluster j this round

        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = points[labels == j].mean(axis=0)
    return labels


def split_blob(blob: Blob, tiles_by_id: dict[int, TileRecord], config: RegionConfig,
               parent_blob_id: int = 0, seed_salt: int = 0) -> list[Region]:
    """Split one kept blob into ceil(size / t_upper) regions.

    Blobs below ``t_upper`` become a single region. Larger blobs are split
    by KMeans on tile coordinates; sub-regions are ordered by their smallest
    member tile_id. Region ids are local (0-based) here; the caller renumbers.
    """
    if blob.size < config.t_lower:
        raise ValidationError(
            f"blob of size {blob.size} is below t_lower={config.t_lower}"
        )
    coords = np.array(
        [(tiles_by_id[t].gx, tiles_by_id[t].gy) for t in blob.tile_ids],
        dtype=np.float64,
    )
    if blob.size < config.t_upper:
        groups = [list(blob.tile_ids)]
    else:
        n_clusters = -(-blob.size // config.t_upper)  # ceil division
        labels = _kmeans_lloyd(
            coords,
            n_clusters,
            seed=[config.kmeans_seed, seed_salt],
            max_iters=config.kmeans_max_iters,
        )
        groups = [
            [blob.tile_ids[i] for i in np.flatnonzero(labels == j)]
            for j in range(n_clusters)
        ]
        groups.sort(key=lambda g: g[0])

    regions = []
    for local_id, members in enumerate(groups):
        pts = np.array(
            [(tiles_by_id[t].gx, tiles_by_id[t].gy) for t in members], dtype=np.float64
        )
        cx, cy = pts.mean(axis=0)
        regions.append(
            Region(
                region_id=local_id,
                tile_ids=tuple(members),
                centroid=(float(cx), float(cy)),
                parent_blob_id=parent_blob_id,
            )
        )
    return regions


def define_regions(tiles: Iterable[TileRecord], config: RegionConfig) -> RegionAssignment:
    """Full region definition for one slide.

    Non-urothelium tiles are excluded up front (they are neither regioned nor
    counted as discarded). The remaining tiles are blobbed, size-filtered and
    split; region ids run 0..K-1 in blob order then sub-region order.
    """
    tiles = list(tiles)
    if not tiles:
        raise ValidationError("no tiles given")
    slide_id = tiles[0].slide_id
    eligible = [t for t in tiles if t.tissue_class in (None, "urothelium")]
    if not eligible:
        return RegionAssignment(slide_id, (), 0, config, usable=False)

    tiles_by_id = {t.tile_id: t for t in eligible}
    blobs = extract_blobs(eligible)
    kept, discarded = filter_blobs(blobs, config.t_lower)
    if not kept:
        return RegionAssignment(slide_id, (), discarded, config, usable=False)

    regions: list[Region] = []
    next_id = 0
    for blob_idx, blob in enumerate(kept):
        for region in split_blob(blob, tiles_by_id, config,
                                 parent_blob_id=blob_idx, seed_salt=blob_idx):
            regions.append(
                Region(
                    region_id=next_id,
                    tile_ids=region.tile_ids,
                    centroid=region.centroid,
                    parent_blob_id=blob_idx,
                )
            )
            next_id += 1
    return RegionAssignment(slide_id, tuple(regions), discarded, config, usable=True)


# ---------------------------------------------------------------------------
# File interfaces: tile manifest (JSON lines) and region assignments.
# ---------------------------------------------------------------------------

def read_manifest(path) -> dict[str, list[TileRecord]]:
    """Read a tile manifest (one JSON object per line) grouped by slide."""
    slides: dict[str, list[TileRecord]] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"bad JSON: {exc.msg}", str(path), lineno) from exc
            try:
                record = TileRecord(
                    slide_id=str(obj["slide_id"]),
                    tile_id=int(obj["tile_id"]),
                    gx=int(obj["gx"]),
                    gy=int(obj["gy"]),
                    tissue_class=obj.get("tissue_class"),
                )
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise DataFormatError(f"bad tile record: {exc}", str(path), lineno) from exc
            slides.setdefault(record.slide_id, []).append(record)
    for records in slides.values():
        ids = [r.tile_id for r in records]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataFormatError(
                f"duplicate tile_id(s) {dup} in slide {records[0].slide_id}", str(path)
            )
    return slides


def write_manifest(slides: dict[str, list[TileRecord]], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for slide_id in sorted(slides):
            for t in sorted(slides[slide_id], key=lambda r: r.tile_id):
                obj = {"slide_id": t.slide_id, "tile_id": t.tile_id,
                       "gx": t.gx, "gy": t.gy}
                if t.tissue_class is not None:
                    obj["tissue_class"] = t.tissue_class
                fh.write(json.dumps(obj, sort_keys=True) + "\n")


def assignment_to_dict(assignment: RegionAssignment) -> dict:
    doc = {
        "slide_id": assignment.slide_id,
        "regions": [
            {
                "region_id": r.region_id,
                "tile_ids": list(r.tile_ids),
                "centroid": [r.centroid[0], r.centroid[1]],
            }
            for r in assignment.regions
        ],
        "discarded_tiles": assignment.discarded_tiles,
        "config": assignment.config.to_dict(),
    }
    if not assignment.usable:
        doc["warning"] = "no usable regions"
    return doc


def assignment_from_dict(doc: dict) -> RegionAssignment:
    config = RegionConfig(**doc["config"])
    regions = tuple(
        Region(
            region_id=int(r["region_id"]),
            tile_ids=tuple(int(t) for t in r["tile_ids"]),
            centroid=(float(r["centroid"][0]), float(r["centroid"][1])),
            parent_blob_id=0,
        )
        for r in doc["regions"]
    )
    return RegionAssignment(
        slide_id=str(doc["slide_id"]),
        regions=regions,
        discarded_tiles=int(doc["discarded_tiles"]),
        config=config,
        usable="warning" not in doc,
    )


def write_assignments(assignments: Sequence[RegionAssignment], path) -> None:
    """Write one region-assignment JSON document per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for a in assignments:
            fh.write(json.dumps(assignment_to_dict(a), sort_keys=True) + "\n")


def read_assignments(path) -> dict[str, RegionAssignment]:
    path = Path(path)
    out: dict[str, RegionAssignment] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                assignment = assignment_from_dict(doc)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"bad assignment: {exc}", str(path), lineno) from exc
            out[assignment.slide_id] = assignment
    return out
