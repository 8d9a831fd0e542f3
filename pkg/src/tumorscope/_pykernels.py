"""Pure-Python/numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Both must produce bit-identical results, so the floating-point accumulation
order in ``col2im`` is fixed: kernel offsets (i, j) in row-major order, each
added onto a zero-initialised buffer.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw):
    """Gather (kh, kw) patches of a padded NHWC batch.

    Returns an array of shape (B, Ho, Wo, kh*kw*C) whose last axis is ordered
    (i, j, c), matching ``kernels.reshape(kh*kw*C, Cout)``.
    """
    b, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, Ho, Wo, C, kh, kw
    ho, wo = hp - kh + 1, wp - kw + 1
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, kh * kw * c)


def col2im(cols, hp, wp, kh, kw, c):
    b, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho, j:j + wo, :] += cols[:, :, :, i, j, :]
    return out


def pool_forward(x, p):
    """Non-overlapping p×p max pool with floor semantics.

    ``arg`` holds the window-local flat index (a*p + b) of the first maximum.
    """
    b, h, w, c = x.shape
    ho, wo = h // p, w // p
    win = x[:, :ho * p, :wo * p, :].reshape(b, ho, p, wo, p, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, p * p)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def pool_backward(grad, arg, h, w, p):
    b, ho, wo, c = grad.shape
    onehot = np.zeros((b, ho, wo, c, p * p), dtype=grad.dtype)
    np.put_along_axis(onehot, arg[..., None], grad[..., None], axis=-1)
    onehot = onehot.reshape(b, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3)
    out = np.zeros((b, h, w, c), dtype=grad.dtype)
    out[:, :ho * p, :wo * p, :] = onehot.reshape(b, ho * p, wo * p, c)
    return out


def segment_graph(n, a, b, w, k, min_size):
    """Greedy graph segmentation over edges already sorted by weight.

    Two components merge across an edge of weight ``w`` when
    ``w <= min(int_1 + k/size_1, int_2 + k/size_2)``; afterwards, components
    smaller than ``min_size`` are absorbed along the same edge order.
    Returns the root id of every vertex.
    """
    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    thresh = [float(k)] * n

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def join(x, y):
        if rank[x] > rank[y]:
            parent[y] = x
            size[x] += size[y]
            return x
        parent[x] = y
        size[y] += size[x]
        if rank[x] == rank[y]:
            rank[y] += 1
        return y

    a = a.tolist()
    b = b.tolist()
    w = w.tolist()
    for e in range(len(w)):
        ra, rb = find(a[e]), find(b[e])
        if ra != rb and w[e] <= thresh[ra] and w[e] <= thresh[rb]:
            r = join(ra, rb)
            thresh[r] = w[e] + k / size[r]
    for e in range(len(w)):
        ra, rb = find(a[e]), find(b[e])
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            join(ra, rb)
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def roi_max_pool(fmap, y0, x0, y1, x1, oh, ow):
    c = fmap.shape[2]
    out = np.empty((oh, ow, c), dtype=fmap.dtype)
    eh, ew = y1 - y0, x1 - x0
    for i in range(oh):
        ys = y0 + (i * eh) // oh
        ye = max(ys + 1, y0 + ((i + 1) * eh) // oh)
        for j in range(ow):
            xs = x0 + (j * ew) // ow
            xe = max(xs + 1, x0 + ((j + 1) * ew) // ow)
            out[i, j] = fmap[ys:ye, xs:xe].max(axis=(0, 1))
    return out
