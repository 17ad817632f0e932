"""Synthetic slide generator with planted positive regions.

Each slide lays its regions out as well-separated compact tile clusters on
the grid, so the region-definition step recovers exactly the planted
structure. Low-grade slides draw every tile embedding from a standard
normal; high-grade slides additionally shift a fraction of the tiles in
one designated region along a fixed unit direction. The planted per-tile
positivity is returned as ground truth for localization checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import (
    MAGNIFICATIONS,
    SCALE_MODES,
    EmbeddingMatrix,
    EmbeddingStore,
    NestedBag,
    RegionInstances,
    write_labels,
)
from .errors import DataFormatError, ValidationError
from .regions import TileRecord, write_manifest

SPLITS = ("train", "val", "test")

# Table-style default split: 220/30/50 slides with LG counts 124/17/28.
_DEFAULT_N = (220, 30, 50)
_DEFAULT_LG = (124 / 220, 17 / 30, 28 / 50)


@dataclass(frozen=True)
class SynthConfig:
    n_slides: tuple[int, int, int] = _DEFAULT_N
    lg_fractions: tuple[float, float, float] = _DEFAULT_LG
    regions_per_slide: tuple[int, int] = (2, 6)
    tiles_per_region: tuple[int, int] = (8, 30)
    dim: int = 32
    mu_pos: float = 1.5
    p_pos: float = 0.6
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.n_slides) != 3 or any(n < 2 for n in self.n_slides):
            raise ValidationError("each split needs at least 2 slides")
        for frac in self.lg_fractions:
            if not 0.0 <= frac <= 1.0:
                raise ValidationError("lg fraction must lie in [0, 1]")
        for lo, hi in (self.regions_per_slide, self.tiles_per_region):
            if lo < 1 or hi < lo:
                raise ValidationError("ranges must be non-empty with lo >= 1")
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if not 0.0 < self.p_pos <= 1.0:
            raise ValidationError("p_pos must lie in (0, 1]")

    def split_counts(self) -> list[tuple[int, int]]:
        """Exact (LG, HG) counts per split; both must be non-zero."""
        counts = []
        for n, frac in zip(self.n_slides, self.lg_fractions):
            n_lg = int(round(n * frac))
            n_hg = n - n_lg
            if n_lg == 0 or n_hg == 0:
                raise ValidationError(
                    f"split of {n} slides with lg fraction {frac} leaves one "
                    "class empty; training and AUC need both classes"
                )
            counts.append((n_lg, n_hg))
        return counts


@dataclass
class SyntheticDataset:
    config: SynthConfig
    mode: str
    train: list[NestedBag]
    val: list[NestedBag]
    test: list[NestedBag]
    manifests: dict[str, list[TileRecord]]
    labels: dict[str, int]
    matrices: list[EmbeddingMatrix]
    positive_tiles: dict[str, frozenset[int]]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def bags(self, split: str) -> list[NestedBag]:
        return {"train": self.train, "val": self.val, "test": self.test}[split]

    def store(self) -> EmbeddingStore:
        return EmbeddingStore.from_matrices(self.matrices)


def _place_region(region_index: int, n_tiles: int, max_side: int) -> list[tuple[int, int]]:
    """Compact row-major tile cluster; clusters are >=2 columns apart."""
    side = max(1, math.ceil(math.sqrt(n_tiles)))
    anchor_x = region_index * (max_side + 2)
    return [(anchor_x + i % side, i // side) for i in range(n_tiles)]


def synth_generate(config: SynthConfig, mode: str = "mono") -> SyntheticDataset:
    """Generate train/val/test nested bags plus per-tile ground truth.

    Deterministic under ``config.rng_seed``; the bags' instances equal what
    assembling the written dataset files would produce bit-for-bit.
    """
    if mode not in SCALE_MODES:
        raise ValidationError(f"unknown scale mode {mode!r}")
    counts = config.split_counts()
    max_side = max(1, math.ceil(math.sqrt(config.tiles_per_region[1])))
    direction = np.ones(config.dim, dtype=np.float64) / math.sqrt(config.dim)

    dataset = SyntheticDataset(
        config=config, mode=mode, train=[], val=[], test=[],
        manifests={}, labels={}, matrices=[], positive_tiles={}, splits={},
    )
    for split_index, split in enumerate(SPLITS):
        n_lg, n_hg = counts[split_index]
        labels = [0] * n_lg + [1] * n_hg
        slide_ids = []
        for index, label in enumerate(labels):
            slide_id = f"{split}_{index:04d}"
            slide_ids.append(slide_id)
            rng = np.random.default_rng(
                [config.rng_seed, split_index, index]
            )
            k = int(rng.integers(config.regions_per_slide[0],
                                 config.regions_per_slide[1] + 1))
            sizes = [
                int(rng.integers(config.tiles_per_region[0],
                                 config.tiles_per_region[1] + 1))
                for _ in range(k)
            ]
            total = sum(sizes)

            tiles: list[TileRecord] = []
            region_tiles: list[list[int]] = []
            next_tile = 0
            for region_index, size in enumerate(sizes):
                members = []
                for gx, gy in _place_region(region_index, size, max_side):
                    tiles.append(TileRecord(
                        slide_id=slide_id, tile_id=next_tile, gx=gx, gy=gy,
                        tissue_class="urothelium",
                    ))
                    members.append(next_tile)
                    next_tile += 1
                region_tiles.append(members)

            positive: frozenset[int] = frozenset()
            if label == 1:
                pos_region = int(rng.integers(k))
                members = region_tiles[pos_region]
                n_pos = max(1, int(round(config.p_pos * len(members))))
                chosen = rng.choice(len(members), size=n_pos, replace=False)
                positive = frozenset(members[i] for i in chosen)

            shift = np.zeros((total, config.dim), dtype=np.float64)
            if positive:
                rows = sorted(positive)
                shift[rows] = config.mu_pos * direction

            per_mag: dict[str, EmbeddingMatrix] = {}
            for mag in MAGNIFICATIONS:
                values = rng.standard_normal((total, config.dim)) + shift
                per_mag[mag] = EmbeddingMatrix(
                    slide_id=slide_id, magnification=mag,
                    tile_ids=np.arange(total, dtype=np.uint64),
                    values=values.astype(np.float32),
                )
                dataset.matrices.append(per_mag[mag])

            regions = []
            for region_index, members in enumerate(region_tiles):
                fused = np.concatenate(
                    [per_mag[mag].values[members].astype(np.float64)
                     for mag in SCALE_MODES[mode]],
                    axis=1,
                )
                regions.append(RegionInstances(
                    region_id=region_index,
                    tile_ids=tuple(members),
                    instances=fused,
                ))
            bag = NestedBag(slide_id=slide_id, label=label, regions=tuple(regions))
            dataset.bags(split).append(bag)
            dataset.manifests[slide_id] = tiles
            dataset.labels[slide_id] = label
            dataset.positive_tiles[slide_id] = positive
        dataset.splits[split] = slide_ids
    return dataset


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """Write manifest, labels, splits, per-tile truth and embedding files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(dataset.manifests, out / "manifest.jsonl")
    write_labels(dataset.labels, out / "labels.jsonl")
    (out / "splits.json").write_text(
        json.dumps(dataset.splits, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    with (out / "truth.jsonl").open("w", encoding="utf-8") as fh:
        for slide_id in sorted(dataset.manifests):
            positive = dataset.positive_tiles.get(slide_id, frozenset())
            for tile in sorted(dataset.manifests[slide_id], key=lambda t: t.tile_id):
                fh.write(json.dumps(
                    {"slide_id": slide_id, "tile_id": tile.tile_id,
                     "positive": tile.tile_id in positive},
                    sort_keys=True) + "\n")
    store = EmbeddingStore.from_matrices(dataset.matrices)
    store.save_all(out / "embeddings")


def read_truth(path) -> dict[str, frozenset[int]]:
    """Read per-tile positivity; returns the positive tile ids per slide."""
    path = Path(path)
    positives: dict[str, set[int]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                slide_id = str(obj["slide_id"])
                positives.setdefault(slide_id, set())
                if bool(obj["positive"]):
                    positives[slide_id].add(int(obj["tile_id"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"bad truth line: {exc}", str(path), lineno) from exc
    return {k: frozenset(v) for k, v in positives.items()}


def region_truth_from_bags(bags, positive_tiles) -> list[tuple[str, int, int]]:
    """Grade every bag region by planted truth: HG iff it holds a positive tile."""
    annotations = []
    for bag in bags:
        positive = positive_tiles.get(bag.slide_id, frozenset())
        for region in bag.regions:
            grade = 1 if any(t in positive for t in region.tile_ids) else 0
            annotations.append((bag.slide_id, region.region_id, grade))
    return annotations


def region_truth_from_assignments(assignments, positive_tiles) -> list[tuple[str, int, int]]:
    """Same grading, from region-assignment documents."""
    annotations = []
    for slide_id in sorted(assignments):
        positive = positive_tiles.get(slide_id, frozenset())
        for region in assignments[slide_id].regions:
            grade = 1 if any(t in positive for t in region.tile_ids) else 0
            annotations.append((slide_id, region.region_id, grade))
    return annotations
