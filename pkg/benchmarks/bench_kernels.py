"""Compare the compiled and pure-Python kernel backends.

Times every kernel on representative inputs, checks that both backends agree
bit for bit, then times two pipelines (a cnn3 training step and selective
search) with each backend swapped in.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import contextlib
import timeit

import numpy as np

from tumorscope import _pykernels, kernels, models, regions
from tumorscope.optim import sparse_ce_loss
from tumorscope.tensorcore import RngState

try:
    from tumorscope import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

NAMES = ("im2col", "col2im", "pool_forward", "pool_backward", "segment_graph", "roi_max_pool")


def kernel_cases():
    g = np.random.default_rng(0)
    xp = g.uniform(size=(8, 66, 66, 16)).astype(np.float32)
    cols = g.uniform(size=(8, 64, 64, 144)).astype(np.float32)
    x = g.uniform(size=(8, 64, 64, 16)).astype(np.float32)
    _, arg = _pykernels.pool_forward(x, 2)
    grad = g.uniform(size=(8, 32, 32, 16)).astype(np.float32)
    # a 96x96 grid graph with sorted random weights
    h = w = 96
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:].ravel()])
    wt = g.uniform(0, 40, a.size)
    order = np.argsort(wt, kind="stable")
    fmap = g.uniform(size=(96, 96, 32)).astype(np.float32)
    return {
        "im2col": (xp, 3, 3),
        "col2im": (cols, 66, 66, 3, 3, 16),
        "pool_forward": (x, 2),
        "pool_backward": (grad, arg, 64, 64, 2),
        "segment_graph": (h * w, a[order].astype(np.int64), b[order].astype(np.int64), wt[order], 8.0, 20),
        "roi_max_pool": (fmap, 5, 7, 90, 83, 7, 7),
    }


def best_of(fn, repeat):
    t = timeit.Timer(fn)
    number, _ = t.autorange()
    return min(t.repeat(repeat, number)) / number


@contextlib.contextmanager
def backend(module):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(module, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def pipelines():
    g = np.random.default_rng(1)
    model = models.build_cnn3((64, 64, 1), 3, RngState(0))
    xb = g.uniform(size=(32, 64, 64, 1)).astype(np.float32)
    yb = g.integers(0, 3, 32)

    def train_step():
        logits, tr = models.forward_logits(model, xb, "train", RngState(2), trace=True)
        models.backward(model, tr, sparse_ce_loss(logits, yb)[1])

    image = np.clip(g.normal(0.1, 0.03, (96, 96, 1)), 0, 1).astype(np.float32)
    image[30:60, 20:50] = 0.7
    return {"cnn3 train step (B=32, 64px)": train_step,
            "selective_search (96px)": lambda: regions.selective_search(image)}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for name, case in kernel_cases().items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        tp, tc = best_of(lambda: py(*case), args.repeat), best_of(lambda: cy(*case), args.repeat)
        print(f"{name:32s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}  {same(py(*case), cy(*case))}")
    for name, fn in pipelines().items():
        times = []
        for module in (_pykernels, _ckernels):
            with backend(module):
                times.append(best_of(fn, args.repeat))
        print(f"{name:32s} {times[0] * 1e3:10.3f} {times[1] * 1e3:10.3f} {times[0] / times[1]:8.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
