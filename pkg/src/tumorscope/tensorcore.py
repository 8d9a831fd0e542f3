"""Layer primitives with explicit forward and backward passes.

Tensors are C-contiguous numpy arrays in NHWC layout. Spatial ops accept a
single image ``[H, W, C]`` or a batch ``[B, H, W, C]``; dense ops accept
``[n]`` or ``[B, n]``. Every op preserves the input dtype, so float32 is used
for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tumorscope import kernels


class ShapeError(ValueError):
    """Raised when tensor shapes do not fit an op's contract."""

    def __init__(self, op: str, expected, got):
        super().__init__(f"{op}: shape mismatch, expected {tuple(expected)} but got {tuple(got)}")
        self.op = op
        self.expected = tuple(expected)
        self.got = tuple(got)


class NonFiniteError(ValueError):
    pass


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class RngState:
    """Seeded, splittable random state.

    Streams come from numpy's PCG64 seeded through ``SeedSequence(seed,
    spawn_key=path)``; ``split`` derives an independent child stream, so a
    given (seed, path) always yields the same numbers.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def split(self, *keys: int) -> RngState:
        return RngState(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError("batch", ("B",) + ("*",) * (ndim - 1), x.shape)
    return x, False


def _pad_amounts(k: int) -> tuple[int, int]:
    # floor on the leading edge, ceil on the trailing edge
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return np.ascontiguousarray(x)
    if padding != "same":
        raise ValueError(f"unknown padding {padding!r}")
    (t, b), (l, r) = _pad_amounts(kh), _pad_amounts(kw)
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return h, w
    return h - kh + 1, w - kw + 1


def conv2d(x: np.ndarray, kernels_: np.ndarray, bias: np.ndarray, padding: str = "same") -> np.ndarray:
    """2-D cross-correlation (no kernel flip) plus bias.

    ``kernels_`` has shape ``[kh, kw, Cin, Cout]``.
    """
    xb, single = _batched(x, 4)
    kh, kw, cin, cout = kernels_.shape
    if xb.shape[3] != cin:
        raise ShapeError("conv2d", xb.shape[:3] + (cin,), xb.shape)
    if bias.shape != (cout,):
        raise ShapeError("conv2d bias", (cout,), bias.shape)
    xp = _pad(xb, kh, kw, padding)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError("conv2d", (kh, kw), xp.shape[1:3])
    cols = kernels.im2col(xp, kh, kw)
    out = cols @ kernels_.reshape(kh * kw * cin, cout) + bias
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernels_: np.ndarray, output_grad: np.ndarray,
                    padding: str = "same") -> LayerGrad:
    xb, single = _batched(x, 4)
    gb, _ = _batched(output_grad, 4)
    kh, kw, cin, cout = kernels_.shape
    xp = _pad(xb, kh, kw, padding)
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if gb.shape != (xb.shape[0], ho, wo, cout):
        raise ShapeError("conv2d_backward", (xb.shape[0], ho, wo, cout), gb.shape)
    cols = kernels.im2col(xp, kh, kw).reshape(-1, kh * kw * cin)
    g2 = np.ascontiguousarray(gb).reshape(-1, cout)
    dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
    db = g2.sum(axis=0)
    dcols = np.ascontiguousarray((g2 @ kernels_.reshape(-1, cout).T).reshape(xb.shape[0], ho, wo, -1))
    dxp = kernels.col2im(dcols, xp.shape[1], xp.shape[2], kh, kw, cin)
    if padding == "same":
        t, l = _pad_amounts(kh)[0], _pad_amounts(kw)[0]
        dxp = dxp[:, t:t + xb.shape[1], l:l + xb.shape[2], :]
    dx = np.ascontiguousarray(dxp)
    return LayerGrad(dx[0] if single else dx, {"kernel": dk, "bias": db})


def maxpool2d(x: np.ndarray, size: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``size``×``size`` max pool, stride = size.

    Trailing rows/columns that do not fill a window are dropped. The second
    return value is the window-local argmax map used by ``maxpool2d_backward``;
    ties go to the lowest flat index.
    """
    xb, single = _batched(x, 4)
    if xb.shape[1] < size or xb.shape[2] < size:
        raise ShapeError("maxpool2d", (size, size), xb.shape[1:3])
    out, arg = kernels.pool_forward(np.ascontiguousarray(xb), size)
    return (out[0], arg[0]) if single else (out, arg)


def maxpool2d_backward(output_grad: np.ndarray, argmax: np.ndarray, input_shape, size: int = 2) -> np.ndarray:
    gb, single = _batched(output_grad, 4)
    ab, _ = _batched(argmax, 4)
    shp = tuple(input_shape)
    if single:
        shp = (1,) + shp
    dx = kernels.pool_backward(np.ascontiguousarray(gb), np.ascontiguousarray(ab), shp[1], shp[2], size)
    return dx[0] if single else dx


def global_average_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(-3, -2))


def global_average_pool_backward(output_grad: np.ndarray, input_shape) -> np.ndarray:
    h, w = input_shape[-3], input_shape[-2]
    g = output_grad[..., None, None, :] / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g, input_shape)).astype(output_grad.dtype, copy=False)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError("dense", x.shape[:-1] + (weights.shape[0],), x.shape)
    if bias.shape != weights.shape[1:]:
        raise ShapeError("dense bias", weights.shape[1:], bias.shape)
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, output_grad: np.ndarray) -> LayerGrad:
    xb = x if x.ndim == 2 else x[None]
    gb = output_grad if output_grad.ndim == 2 else output_grad[None]
    dx = output_grad @ weights.T
    return LayerGrad(dx, {"weight": xb.T @ gb, "bias": gb.sum(axis=0)})


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    # gradient is zero at exactly x == 0
    return np.where(x > 0, output_grad, 0).astype(output_grad.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax: non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, running_mean: np.ndarray,
              running_var: np.ndarray, mode: str = "train", eps: float = 1e-5,
              momentum: float = 0.9) -> tuple[np.ndarray, BatchNormCache, np.ndarray, np.ndarray]:
    """Per-channel batch normalisation over every axis but the last.

    Returns ``(y, cache, new_running_mean, new_running_var)``; the running
    statistics are only changed in train mode (biased batch variance).
    """
    c = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise ShapeError(f"batchnorm {name}", (c,), p.shape)
    if mode == "train":
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (momentum * running_mean + (1 - momentum) * mean).astype(running_mean.dtype)
        new_var = (momentum * running_var + (1 - momentum) * var).astype(running_var.dtype)
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y.astype(x.dtype, copy=False), BatchNormCache(xhat, inv_std, mode), new_mean, new_var


def batchnorm_backward(cache: BatchNormCache, gamma: np.ndarray, output_grad: np.ndarray) -> LayerGrad:
    axes = tuple(range(output_grad.ndim - 1))
    xhat = cache.xhat
    dgamma = (output_grad * xhat).sum(axis=axes)
    dbeta = output_grad.sum(axis=axes)
    dxhat = output_grad * gamma
    if cache.mode == "infer":
        dx = dxhat * cache.inv_std
    else:
        m = output_grad.size // output_grad.shape[-1]
        dx = cache.inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return LayerGrad(dx.astype(output_grad.dtype, copy=False), {"gamma": dgamma, "beta": dbeta})


def dropout_mask(shape, rate: float, rng: RngState, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.generator().random(shape) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate)) if rate > 0 else np.ones(shape, dtype=dtype)


def dropout(x: np.ndarray, rate: float, mode: str = "train", rng: RngState | None = None) -> np.ndarray:
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngState")
    return x * dropout_mask(x.shape, rate, rng, x.dtype.type)


def l2_penalty(params: dict[str, np.ndarray], lam: float) -> tuple[float, dict[str, np.ndarray]]:
    """``lam * sum(w**2)`` over ``params`` and its gradient ``2 * lam * w``."""
    if lam < 0:
        raise ValueError("l2 coefficient must be non-negative")
    loss = float(sum(np.sum(np.asarray(w, dtype=np.float64) ** 2) for w in params.values()) * lam)
    grads = {k: (2 * lam * w).astype(w.dtype, copy=False) for k, w in params.items()}
    return loss, grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    nonfinite: dict[str, list[tuple[int, ...]]]
    tolerance: float

    @property
    def ok(self) -> bool:
        return not any(self.nonfinite.values()) and all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray],
                      analytic: dict[str, np.ndarray], epsilon: float = 1e-6,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``analytic`` gradients of scalar ``f`` against central differences.

    ``params`` are perturbed in place one coordinate at a time (and restored).
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    errors: dict[str, float] = {}
    bad: dict[str, list[tuple[int, ...]]] = {}
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise ShapeError(f"finite_diff_check {name}", p.shape, a.shape)
        worst = 0.0
        bad[name] = []
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + epsilon
            fp = f(params)
            p[idx] = orig - epsilon
            fm = f(params)
            p[idx] = orig
            num = (fp - fm) / (2 * epsilon)
            an = float(a[idx])
            if not (np.isfinite(num) and np.isfinite(an)):
                bad[name].append(idx)
                continue
            rel = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return GradCheckReport(errors, bad, tolerance)
