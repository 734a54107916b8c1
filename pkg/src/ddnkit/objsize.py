"""Dataset-characteristic object size from labelled masks.

Every foreground connected component counts as one object whose size is the
square root of its pixel area. Each image contributes the mean size of its
objects and the dataset size is the mean over images that have any.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyDatasetError(ValueError):
    pass


@dataclass
class MaskImage:
    labels: np.ndarray          # (height, width) integer class ids, 0 = background
    num_classes: int = 0        # 0 -> infer from the data

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("mask labels must be non-negative")
        if self.num_classes and self.labels.size and self.labels.max() >= self.num_classes:
            raise ValueError(f"label {self.labels.max()} outside 0..{self.num_classes - 1}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class Component:
    area: int
    bbox: tuple                 # (row0, col0, row1, col1), inclusive
    first_pixel: tuple          # (row, col) of the first pixel in raster order


@dataclass
class ObjEstimate:
    obj: float
    per_image_means: list
    num_images: int
    num_objects: int
    connectivity: int
    min_area: int
    skipped_images: int = 0
    notes: list = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"Obj={self.obj:.2f} over {self.num_images} images, {self.num_objects} objects "
            f"({self.connectivity}-connectivity, min_area={self.min_area}, "
            f"{self.skipped_images} images without objects)"
        )


def binarize(mask) -> np.ndarray:
    """1 wherever the label is not background, regardless of class."""
    labels = mask.labels if isinstance(mask, MaskImage) else np.asarray(mask)
    return (labels != 0).astype(np.uint8)


class _UnionFind:
    def __init__(self):
        self.parent = [0]

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the older label as root so roots follow raster order
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def label_components(binary: np.ndarray, connectivity: int = 8) -> tuple:
    """Two-pass union-find labelling; returns ``(label_image, count)``.

    Labels are 1..count, numbered by the raster position of each component's
    first pixel.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    fg = np.asarray(binary) != 0
    H, W = fg.shape
    labels = np.zeros((H, W), dtype=np.int64)
    uf = _UnionFind()
    if connectivity == 8:
        offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    else:
        offsets = ((-1, 0), (0, -1))
    rows = fg.tolist()
    lab = [[0] * W for _ in range(H)]
    for i in range(H):
        row = rows[i]
        cur = lab[i]
        for j in range(W):
            if not row[j]:
                continue
            neighbours = []
            for di, dj in offsets:
                ni, nj = i + di, j + dj
                if 0 <= ni and 0 <= nj < W and lab[ni][nj]:
                    neighbours.append(lab[ni][nj])
            if not neighbours:
                cur[j] = uf.make()
            else:
                first = min(neighbours)
                cur[j] = first
                for other in neighbours:
                    if other != first:
                        uf.union(first, other)
    roots = {}
    for i in range(H):
        for j in range(W):
            if lab[i][j]:
                r = uf.find(lab[i][j])
                if r not in roots:
                    roots[r] = len(roots) + 1
                labels[i, j] = roots[r]
    return labels, len(roots)


def connected_components(binary: np.ndarray, connectivity: int = 8) -> list:
    """Components sorted by the raster position of their first pixel."""
    labels, count = label_components(binary, connectivity)
    if count == 0:
        return []
    flat = labels.reshape(-1)
    idx = np.flatnonzero(flat)
    ids = flat[idx]
    W = labels.shape[1]
    comps = []
    areas = np.bincount(ids, minlength=count + 1)
    for lab in range(1, count + 1):
        pos = idx[ids == lab]
        r, c = pos // W, pos % W
        comps.append(
            Component(
                area=int(areas[lab]),
                bbox=(int(r.min()), int(c.min()), int(r.max()), int(c.max())),
                first_pixel=(int(r[0]), int(c[0])),
            )
        )
    return comps


def object_sizes(mask, connectivity: int = 8, min_area: int = 4) -> list:
    return [float(np.sqrt(c.area)) for c in connected_components(binarize(mask), connectivity) if c.area >= min_area]


def estimate_obj(masks, connectivity: int = 8, min_area: int = 4) -> ObjEstimate:
    """Mean over images of the mean sqrt-area of each image's components."""
    per_image, n_objects, skipped = [], 0, 0
    for mask in masks:
        sizes = object_sizes(mask, connectivity, min_area)
        if not sizes:
            skipped += 1
            continue
        per_image.append(float(np.mean(sizes)))
        n_objects += len(sizes)
    if not per_image:
        raise EmptyDatasetError(f"empty dataset: no component of area >= {min_area} in any mask")
    notes = [f"components smaller than {min_area} px ignored"]
    if skipped:
        notes.append(f"{skipped} images without objects excluded from the mean")
    return ObjEstimate(
        obj=float(np.mean(per_image)),
        per_image_means=per_image,
        num_images=len(per_image),
        num_objects=n_objects,
        connectivity=connectivity,
        min_area=min_area,
        skipped_images=skipped,
        notes=notes,
    )
