import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import iou_cells
from tumorscope import data, models as m
from tumorscope import regions as R
from tumorscope.optim import TrainConfig, train
from tumorscope.tensorcore import RngState


def all_boxes(limit):
    iv = [(a, b) for a in range(limit + 1) for b in range(a + 1, limit + 1)]
    return np.array([(x0, y0, x1, y1) for (x0, x1) in iv for (y0, y1) in iv], dtype=np.int64)


def cell_masks(boxes, side):
    """Each box as a bitset over the side x side cell grid, packed into uint64 words."""
    grid = np.zeros((len(boxes), side, side), dtype=bool)
    for k, (x0, y0, x1, y1) in enumerate(boxes):
        grid[k, y0:y1, x0:x1] = True
    return np.packbits(grid.reshape(len(boxes), -1), axis=1).view(np.uint64)


# ---------------------------------------------------------------- iou

def test_iou_examples():
    a, b = R.Box(0, 0, 10, 10), R.Box(5, 5, 15, 15)
    assert R.iou(a, a) == 1.0
    assert R.iou(a, R.Box(10, 0, 20, 10)) == 0.0
    assert R.iou(a, b) == 25 / 175 == float(iou_cells(a.as_tuple(), b.as_tuple()))


def test_iou_scalar_exhaustive_small_grid():
    boxes = [R.Box(*map(int, b)) for b in all_boxes(8)]
    tuples = [b.as_tuple() for b in boxes]
    mat = R.iou_matrix(boxes, boxes)
    for i, a in enumerate(boxes):
        row = [R.iou(a, b) for b in boxes]
        assert row == mat[i].tolist()
    for i, j in itertools.islice(itertools.product(range(len(boxes)), repeat=2), 0, None, 97):
        assert R.iou(boxes[i], boxes[j]) == float(iou_cells(tuples[i], tuples[j]))


@pytest.mark.slow
def test_iou_matrix_exhaustive_against_cell_counts():
    """All box pairs with coordinates in [0, 16] (upper triangle; symmetry is tested separately)."""
    boxes = all_boxes(16)
    masks = cell_masks(boxes, 16)
    cells = np.bitwise_count(masks).sum(-1, dtype=np.int64)
    for lo in range(0, len(boxes), 512):
        hi = lo + 512
        inter = np.bitwise_count(masks[lo:hi, None, :] & masks[None, lo:]).sum(-1, dtype=np.int64)
        union = cells[lo:hi, None] + cells[None, lo:] - inter
        assert np.array_equal(R.iou_matrix(boxes[lo:hi], boxes[lo:]), inter / union)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 32), min_size=8, max_size=8))
def test_iou_properties(c):
    a = R.Box(min(c[0], c[1]), min(c[2], c[3]), max(c[0], c[1]) + 1, max(c[2], c[3]) + 1)
    b = R.Box(min(c[4], c[5]), min(c[6], c[7]), max(c[4], c[5]) + 1, max(c[6], c[7]) + 1)
    v = R.iou(a, b)
    assert v == R.iou(b, a) and 0 <= v <= 1
    assert (v == 1.0) == (a == b)
    assert v == float(iou_cells(a.as_tuple(), b.as_tuple()))
    assert v == R.iou_matrix([a], [b])[0, 0]


def test_box_validation():
    with pytest.raises(R.RegionError):
        R.Box(3, 0, 3, 5)
    with pytest.raises(TypeError):
        R.Box(0.5, 0, 3, 5)


# ---------------------------------------------------------------- filter

def prop(*c, score=1.0):
    return R.Proposal(R.Box(*c), score)


def test_filter_examples():
    gt = [R.Box(0, 0, 10, 10)]
    kept = R.filter_proposals([prop(0, 0, 10, 10), prop(5, 5, 15, 15)], gt)
    assert len(kept) == 1 and kept[0].iou == 1.0 and kept[0].gt_index == 0
    assert R.filter_proposals([prop(0, 0, 10, 10)], []) == []


def test_filter_strict_at_threshold():
    # 7x10 inside 10x10 gives IoU exactly 0.7
    gt = [R.Box(0, 0, 10, 10)]
    p = prop(0, 0, 7, 10)
    assert R.iou(p.box, gt[0]) == 0.7
    assert R.filter_proposals([p], gt, 0.7) == []
    assert len(R.filter_proposals([p], gt, 0.69)) == 1
    with pytest.raises(ValueError):
        R.filter_proposals([p], gt, 1.01)


def test_filter_tie_goes_to_lower_gt():
    gt = [R.Box(0, 0, 10, 10), R.Box(0, 0, 10, 10)]
    assert R.filter_proposals([prop(0, 0, 10, 10)], gt)[0].gt_index == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_filter_subset_and_recheck(seed, thr):
    g = np.random.default_rng(seed)

    def rand_box():
        x0, y0 = g.integers(0, 20, 2)
        return R.Box(int(x0), int(y0), int(x0 + g.integers(1, 12)), int(y0 + g.integers(1, 12)))

    props = [R.Proposal(rand_box(), float(i)) for i in range(30)]
    gts = [rand_box() for _ in range(3)]
    kept = R.filter_proposals(props, gts, thr)
    assert all(k.proposal in props for k in kept)
    for k in kept:
        assert R.iou(k.proposal.box, gts[k.gt_index]) == k.iou > thr
        assert k.iou == max(R.iou(k.proposal.box, gb) for gb in gts)


# ---------------------------------------------------------------- roi pool

def test_roi_pool_quadrants_and_global():
    g = np.random.default_rng(0)
    fmap = g.normal(size=(6, 6, 2))
    box = R.Box(1, 2, 5, 6)
    out = R.roi_pool(fmap, box, (2, 2))
    for i in range(2):
        for j in range(2):
            ref = fmap[2 + 2 * i:4 + 2 * i, 1 + 2 * j:3 + 2 * j].max(axis=(0, 1))
            assert np.array_equal(out[i, j], ref)
    glob = R.roi_pool(fmap, R.Box(0, 0, 6, 6), (1, 1))
    assert np.array_equal(glob[0, 0], fmap.max(axis=(0, 1)))
    const = R.roi_pool(np.full((5, 5, 1), 2.5), R.Box(0, 0, 5, 5), (7, 7))
    assert np.all(const == 2.5)


def test_roi_pool_small_box_replicates_rows():
    fmap = np.arange(9.0).reshape(3, 3, 1)
    out = R.roi_pool(fmap, R.Box(0, 0, 2, 2), (4, 4))
    assert out[..., 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_roi_pool_outside_map():
    with pytest.raises(R.RegionError):
        R.roi_pool(np.zeros((4, 4, 1)), R.Box(2, 2, 5, 4))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_roi_pool_bounded_by_region_max(seed):
    g = np.random.default_rng(seed)
    fmap = g.normal(size=(12, 10, 3)).astype(np.float32)
    x0, y0 = g.integers(0, 9), g.integers(0, 11)
    box = R.Box(int(x0), int(y0), int(g.integers(x0 + 1, 11)), int(g.integers(y0 + 1, 13)))
    out = R.roi_pool(fmap, box, (int(g.integers(1, 8)), int(g.integers(1, 8))))
    region = fmap[box.y0:box.y1, box.x0:box.x1]
    assert np.all(out <= region.max(axis=(0, 1)))
    assert set(np.unique(out)) <= set(np.unique(region))


# ---------------------------------------------------------------- selective search

def test_constant_image_single_proposal():
    props = R.selective_search(np.full((16, 20, 1), 0.4))
    assert [p.box for p in props] == [R.Box(0, 0, 20, 16)]


def two_blob_image():
    img = np.full((48, 48), 0.1)
    img[6:18, 5:19] = 0.8
    img[30:42, 28:44] = 0.9
    return img[..., None], [R.Box(5, 6, 19, 18), R.Box(28, 30, 44, 42)]


def test_two_blobs_each_recovered():
    img, gts = two_blob_image()
    props = R.selective_search(img)
    assert all(v >= 0.7 for v in R.best_iou_per_gt(props, gts))
    assert all(p.box.within(48, 48) for p in props)
    assert len({p.box for p in props}) == len(props)


def test_proposal_cap_monotone():
    img, _ = two_blob_image()
    g = np.random.default_rng(0)
    noisy = np.clip(img + g.normal(0, 0.05, img.shape), 0, 1)
    counts = [len(R.selective_search(noisy, R.SegmentationParams(max_proposals=k))) for k in (1, 3, 10, 200)]
    assert counts[0] == 1 and counts == sorted(counts) and counts[-1] <= 200


def test_selective_search_deterministic_and_backend_free():
    img, _ = two_blob_image()
    g = np.random.default_rng(1)
    noisy = np.clip(img + g.normal(0, 0.05, img.shape), 0, 1)
    assert R.selective_search(noisy) == R.selective_search(noisy)


def test_small_image_rejected():
    with pytest.raises(R.RegionError):
        R.selective_search(np.zeros((3, 8, 1)))


# ---------------------------------------------------------------- classify

def test_classify_regions_end_to_end(tmp_path):
    # a linear classifier on 6x6 max-pooled positive RoIs is enough to separate the classes
    man = data.synth_generate(data.SyntheticSpec(per_class=80, size=48, seed=5), tmp_path)
    boxes = R.read_boxes(tmp_path / "boxes.csv")
    patches, labels = [], []
    for p, lab in man.records:
        img = data.load_image(man.resolve(p))
        gt = [b for b, _ in boxes[p]]
        for k in R.filter_proposals(R.selective_search(img), gt):
            patches.append(R.roi_pool(img, k.proposal.box, (6, 6)))
            labels.append(lab)
    model = m.assemble("patch", (6, 6, 1), [m.flatten(), m.dense(3, softmax=True)], 3, RngState(0))
    model, _ = train(model, np.stack(patches), np.array(labels), TrainConfig(epochs=200, batch_size=16, lr=0.05))
    test_man = data.synth_generate(data.SyntheticSpec(per_class=10, size=48, seed=99), tmp_path / "test")
    test_boxes = R.read_boxes(tmp_path / "test" / "boxes.csv")
    for p, lab in test_man.records:
        img = data.load_image(test_man.resolve(p))
        gt = [b for b, _ in test_boxes[p]]
        preds = R.classify_regions(img, model, ground_truth=gt)
        assert preds, "a proposal should survive the IoU filter"
        assert max(preds, key=lambda r: r.prob).label == lab
        assert preds == R.classify_regions(img, model, ground_truth=gt)
    # ground truth nowhere near any proposal leaves nothing to classify
    assert R.classify_regions(img, model, ground_truth=[R.Box(0, 0, 1, 1)]) == []


# ---------------------------------------------------------------- files

def test_read_boxes_errors(tmp_path):
    f = tmp_path / "b.csv"
    f.write_text("image_path,x0,y0,x1,y1,label\na.pgm,0,0,4,4,1\na.pgm,1,1,3,3,0\n")
    got = R.read_boxes(f)
    assert got["a.pgm"] == [(R.Box(0, 0, 4, 4), 1), (R.Box(1, 1, 3, 3), 0)]
    f.write_text("image_path,x0,y0,x1,y1,label\na.pgm,0,0,4,4,1\na.pgm,5,0,4,4,1\n")
    with pytest.raises(R.BoxFileError) as err:
        R.read_boxes(f)
    assert err.value.line == 3
    f.write_text("x0,y0,x1,y1\n")
    with pytest.raises(R.BoxFileError) as err:
        R.read_boxes(f)
    assert err.value.line == 1


def test_write_proposals(tmp_path):
    props = [prop(0, 0, 4, 4, score=0.5)]
    R.write_proposals(tmp_path / "p.csv", props)
    assert (tmp_path / "p.csv").read_text() == "x0,y0,x1,y1,score\n0,0,4,4,0.5\n"
    preds = [R.RegionPrediction(R.Box(0, 0, 4, 4), 2, 0.75, 0.5)]
    R.write_proposals(tmp_path / "q.csv", props, preds)
    assert (tmp_path / "q.csv").read_text().splitlines()[1] == "0,0,4,4,0.5,2,0.75"
