"""Region pipeline: selective-search proposals, IoU filtering, RoI pooling and region classification."""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from tumorscope import kernels, models

HIST_BINS = 16


class RegionError(ValueError):
    pass


class BoxFileError(RegionError):
    """Malformed boxes CSV; ``line`` counts the header as line 1."""

    def __init__(self, message: str, path=None, line: int | None = None):
        super().__init__(f"{path}:{line}: {message}" if line is not None else f"{path}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True, order=True)
class Box:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not isinstance(v, (int, np.integer)):
                raise TypeError(f"box coordinates must be integers, got {v!r}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise RegionError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (int(self.x0), int(self.y0), int(self.x1), int(self.y1))

    def within(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float


@dataclass(frozen=True)
class SegmentationParams:
    tau: float = 8.0
    min_size: int = 20
    max_proposals: int = 200
    sigma: float = 0.8

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


def iou(a: Box, b: Box) -> float:
    """Intersection over union, computed from integer areas."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_array(boxes) -> np.ndarray:
    """[N,4] int64 array of (x0, y0, x1, y1)."""
    return np.array([b.as_tuple() for b in boxes], dtype=np.int64).reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of two box sets ([N,4] arrays or Box lists) as an [N,M] float64 array.

    Same integer arithmetic and single division as ``iou``, so entries agree bit for bit.
    """
    a = a if isinstance(a, np.ndarray) else boxes_array(a)
    b = b if isinstance(b, np.ndarray) else boxes_array(b)
    a = a.astype(np.int64)[:, None, :]
    b = b.astype(np.int64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------- selective search

def oversegment(image: np.ndarray, params: SegmentationParams) -> np.ndarray:
    """Graph-based over-segmentation; returns [H,W] region labels numbered in raster order."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = img.shape
    g = img * 255.0
    if params.sigma > 0:
        g = gaussian_filter(g, params.sigma, mode="nearest")
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    wt = np.concatenate([np.abs(g[:, 1:] - g[:, :-1]).ravel(), np.abs(g[1:, :] - g[:-1, :]).ravel()])
    order = np.argsort(wt, kind="stable")
    roots = kernels.segment_graph(h * w, a[order].astype(np.int64), b[order].astype(np.int64),
                                  wt[order], float(params.tau), int(params.min_size))
    _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
    # renumber so labels follow the first raster position of each region
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inv].reshape(h, w)


@dataclass
class _Region:
    size: int
    box: tuple[int, int, int, int]
    hist: np.ndarray


def _similarity(r: _Region, s: _Region, image_area: int) -> float:
    x0, y0 = min(r.box[0], s.box[0]), min(r.box[1], s.box[1])
    x1, y1 = max(r.box[2], s.box[2]), max(r.box[3], s.box[3])
    hist = float(np.minimum(r.hist, s.hist).sum())
    size = 1.0 - (r.size + s.size) / image_area
    fill = 1.0 - ((x1 - x0) * (y1 - y0) - r.size - s.size) / image_area
    return hist + size + fill


def _initial_regions(image2d: np.ndarray, labels: np.ndarray) -> list[_Region]:
    n = int(labels.max()) + 1
    h, w = labels.shape
    bins = np.minimum((np.clip(image2d, 0, 1) * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    flat = labels.ravel()
    hist = np.zeros((n, HIST_BINS))
    np.add.at(hist, (flat, bins.ravel()), 1.0)
    sizes = np.bincount(flat, minlength=n)
    ys, xs = np.divmod(np.arange(h * w), w)
    big = np.iinfo(np.int64).max
    x0 = np.full(n, big)
    y0 = np.full(n, big)
    x1 = np.zeros(n, np.int64)
    y1 = np.zeros(n, np.int64)
    np.minimum.at(x0, flat, xs)
    np.minimum.at(y0, flat, ys)
    np.maximum.at(x1, flat, xs + 1)
    np.maximum.at(y1, flat, ys + 1)
    return [_Region(int(sizes[i]), (int(x0[i]), int(y0[i]), int(x1[i]), int(y1[i])), hist[i] / sizes[i])
            for i in range(n)]


def _adjacent_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for u, v in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = u != v
        lo = np.minimum(u[diff], v[diff])
        hi = np.maximum(u[diff], v[diff])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def selective_search(image: np.ndarray, params: SegmentationParams | None = None) -> list[Proposal]:
    """Bottom-up region proposals for a single-channel image in [0,1].

    Over-segments the image, then greedily merges the most similar adjacent
    pair (histogram intersection + size + box fill) until one region is left.
    Every region's box is a candidate; a region created later scores higher.
    Duplicates keep their best score, and at most ``max_proposals`` survive,
    highest score first.
    """
    params = params or SegmentationParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise RegionError(f"expected a single-channel image, got {img.shape}")
        img = img[..., 0]
    h, w = img.shape
    if h < 4 or w < 4:
        raise RegionError(f"image must be at least 4x4, got {h}x{w}")
    labels = oversegment(img, params)
    regions = _initial_regions(img, labels)
    area = h * w
    neighbours: dict[int, set[int]] = {i: set() for i in range(len(regions))}
    heap = []
    for i, j in sorted(_adjacent_pairs(labels)):
        neighbours[i].add(j)
        neighbours[j].add(i)
        heap.append((-_similarity(regions[i], regions[j], area), i, j))
    heapq.heapify(heap)
    alive = set(range(len(regions)))
    while heap:
        _, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive:
            continue
        r, s = regions[i], regions[j]
        size = r.size + s.size
        merged = _Region(size,
                         (min(r.box[0], s.box[0]), min(r.box[1], s.box[1]),
                          max(r.box[2], s.box[2]), max(r.box[3], s.box[3])),
                         (r.hist * r.size + s.hist * s.size) / size)
        t = len(regions)
        regions.append(merged)
        alive -= {i, j}
        nb = (neighbours.pop(i) | neighbours.pop(j)) - {i, j}
        neighbours[t] = nb
        for k in sorted(nb):
            neighbours[k] -= {i, j}
            neighbours[k].add(t)
            heapq.heappush(heap, (-_similarity(regions[k], merged, area), k, t))
        alive.add(t)
    total = len(regions)
    best: dict[tuple[int, int, int, int], float] = {}
    for t, reg in enumerate(regions):
        best[reg.box] = (t + 1) / total
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:params.max_proposals]
    return [Proposal(Box(*bx), sc) for bx, sc in ranked]


# ---------------------------------------------------------------- filtering and pooling

class Match(NamedTuple):
    proposal: Proposal
    gt_index: int
    iou: float


def filter_proposals(proposals, ground_truth, threshold: float = 0.7) -> list[Match]:
    """Keep proposals whose best IoU over ``ground_truth`` is strictly above ``threshold``.

    Ties on IoU resolve to the lower ground-truth index. An empty ground
    truth keeps nothing.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    gts = list(ground_truth)
    proposals = list(proposals)
    if not gts or not proposals:
        return []
    scores = iou_matrix([p.box for p in proposals], gts)
    best = scores.argmax(axis=1)
    return [Match(p, int(k), float(scores[i, k])) for i, (p, k) in enumerate(zip(proposals, best))
            if scores[i, k] > threshold]


def best_iou_per_gt(proposals, ground_truth) -> list[float]:
    gts = list(ground_truth)
    proposals = list(proposals)
    if not proposals:
        return [0.0] * len(gts)
    return iou_matrix([p.box for p in proposals], gts).max(axis=0).tolist() if gts else []


def roi_pool(feature_map: np.ndarray, box: Box, out: tuple[int, int] = (7, 7)) -> np.ndarray:
    """Max-pool ``box`` of an [H,W,C] map onto an ``out`` grid.

    Cell i spans rows floor(i*eh/oh) to floor((i+1)*eh/oh) of the box; when
    the box is shorter than the grid, a cell reuses its nearest row.
    """
    fmap = np.asarray(feature_map)
    if fmap.ndim != 3:
        raise RegionError(f"expected [H,W,C] feature map, got shape {fmap.shape}")
    if fmap.dtype not in (np.float32, np.float64):
        fmap = fmap.astype(np.float64)
    oh, ow = int(out[0]), int(out[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output grid must be positive, got {out}")
    if not box.within(fmap.shape[0], fmap.shape[1]):
        raise RegionError(f"box {box.as_tuple()} lies outside the {fmap.shape[0]}x{fmap.shape[1]} map")
    return kernels.roi_max_pool(np.ascontiguousarray(fmap), int(box.y0), int(box.x0), int(box.y1),
                                int(box.x1), oh, ow)


class RegionPrediction(NamedTuple):
    box: Box
    label: int
    prob: float
    score: float


def classify_boxes(image: np.ndarray, model, proposals, batch_size: int = 64) -> list[RegionPrediction]:
    """RoI-pool each proposal from the image raster to the model input size and classify it."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if len(model.input_shape) != 3 or model.input_shape[2] != img.shape[2]:
        raise RegionError(f"model input {model.input_shape} cannot take pooled {img.shape[2]}-channel patches")
    proposals = list(proposals)
    if not proposals:
        return []
    size = model.input_shape[:2]
    patches = np.stack([roi_pool(img, p.box, size) for p in proposals])
    probs = models.predict_proba(model, patches, batch_size)
    labels = probs.argmax(axis=1)
    return [RegionPrediction(p.box, int(c), float(pr[c]), p.score)
            for p, c, pr in zip(proposals, labels, probs)]


def classify_regions(image: np.ndarray, model, params: SegmentationParams | None = None,
                     ground_truth=None, threshold: float = 0.7, batch_size: int = 64) -> list[RegionPrediction]:
    """Propose, optionally IoU-filter against ``ground_truth``, then classify every surviving region."""
    proposals = selective_search(image, params)
    if ground_truth is not None:
        proposals = [m.proposal for m in filter_proposals(proposals, ground_truth, threshold)]
    return classify_boxes(image, model, proposals, batch_size)


# ---------------------------------------------------------------- CSV I/O

def read_boxes(path) -> dict[str, list[tuple[Box, int]]]:
    """Parse ``image_path,x0,y0,x1,y1,label`` into boxes grouped by image path (file order kept)."""
    path = Path(path)
    try:
        rows = list(csv.reader(path.read_text().splitlines()))
    except OSError as e:
        raise BoxFileError(f"cannot read boxes file ({e.strerror})", path) from e
    header = ["image_path", "x0", "y0", "x1", "y1", "label"]
    if not rows or [c.strip() for c in rows[0]] != header:
        raise BoxFileError("expected header " + ",".join(header), path, 1)
    out: dict[str, list[tuple[Box, int]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 6:
            raise BoxFileError(f"expected 6 fields, got {len(row)}", path, lineno)
        try:
            x0, y0, x1, y1, label = (int(v) for v in row[1:])
            box = Box(x0, y0, x1, y1)
        except (ValueError, TypeError) as e:
            raise BoxFileError(str(e), path, lineno) from None
        out.setdefault(row[0].strip(), []).append((box, label))
    return out


def write_proposals(path, proposals, predictions=None) -> None:
    """Write ``x0,y0,x1,y1,score``; with ``predictions`` (aligned), add ``class,prob``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if predictions is None:
            w.writerow(["x0", "y0", "x1", "y1", "score"])
            for p in proposals:
                w.writerow([*p.box.as_tuple(), repr(float(p.score))])
        else:
            w.writerow(["x0", "y0", "x1", "y1", "score", "class", "prob"])
            for p in predictions:
                w.writerow([*p.box.as_tuple(), repr(float(p.score)), p.label, repr(float(p.prob))])
