"""Layer catalog with analytic forward/backward.

Quadratic layers implement ``(xWa + ba) * (xWb + bb) + (xWc + bc)``: three
ordinary linear branches sharing one input, the first two multiplied. Since
the backward pass only needs the branch activations ``A`` and ``B`` besides
the input, a layer can either keep them from the forward pass
(:attr:`MemoryMode.CACHED`) or rebuild them from the stored input
(:attr:`MemoryMode.RECOMPUTE`).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError


class MemoryMode(enum.Enum):
    CACHED = "cached"
    RECOMPUTE = "recompute"


class CacheError(RuntimeError):
    """Backward called without a matching forward."""


@dataclass
class LayerCache:
    mode: MemoryMode
    x: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    argmax: np.ndarray | None = None
    in_shape: tuple | None = None

    def nbytes(self) -> int:
        return sum(t.nbytes for t in (self.x, self.a, self.b, self.argmax) if t is not None)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)


class Layer:
    """Base class. Subclasses fill ``params`` (registry order) in ``__init__``."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.memory_mode = MemoryMode.CACHED
        self.cache: LayerCache | None = None

    def __repr__(self):
        return self.kind

    # -- shape pass -------------------------------------------------------
    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape, or :class:`ShapeError`."""
        raise NotImplementedError

    # -- accounting -------------------------------------------------------
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def flop_count(self, in_shape: tuple) -> int:
        return 0

    def cache_elements(self, in_shape: tuple, mode: MemoryMode) -> int:
        """Per-sample element count held in the cache between forward and backward."""
        return 0

    # -- numerics ---------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self) -> LayerCache:
        cache = self.cache
        if cache is None:
            raise CacheError(f"{self!r}: backward called before forward")
        if cache.mode is not self.memory_mode:
            raise CacheError(
                f"{self!r}: cache was filled in {cache.mode.value} mode but backward runs in "
                f"{self.memory_mode.value} mode"
            )
        self.cache = None
        return cache


def _check_features(x: np.ndarray, n: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != n:
        raise ShapeError(f"{who} expects input (batch, {n}), got {x.shape}")


def _branch(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return T.elementwise("add", T.matmul(x, w), bias)


class LinearDense(Layer):
    kind = "LinearDense"

    def __init__(self, n: int, m: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.m = n, m
        self.params["W"] = _uniform(rng, math.sqrt(1.0 / n), (n, m))
        self.params["b"] = np.zeros(m)

    def __repr__(self):
        return f"LinearDense({self.n},{self.m})"

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n,):
            raise ShapeError(f"{self!r} expects per-sample shape ({self.n},), got {tuple(in_shape)}")
        return (self.m,)

    def flop_count(self, in_shape):
        return 2 * self.n * self.m + self.m

    def cache_elements(self, in_shape, mode):
        return self.n

    def forward(self, x):
        _check_features(x, self.n, repr(self))
        self.cache = LayerCache(self.memory_mode, x=x)
        return _branch(x, self.params["W"], self.params["b"])

    def backward(self, grad_out):
        x = self._take_cache().x
        self.grads["W"] = T.matmul(x.T, grad_out)
        self.grads["b"] = grad_out.sum(axis=0)
        return T.matmul(grad_out, self.params["W"].T)


class QuadraticDense(Layer):
    """Decomposed quadratic neuron layer, ``3*m*(n+1)`` parameters."""

    kind = "QuadraticDense"

    def __init__(self, n: int, m: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.m = n, m
        bound = math.sqrt(1.0 / n)
        # Product branches start near 1 so the layer is close to affine and
        # avoids the zero-product saddle.
        self.params["Wa"] = 0.5 * _uniform(rng, bound, (n, m))
        self.params["ba"] = np.ones(m)
        self.params["Wb"] = 0.5 * _uniform(rng, bound, (n, m))
        self.params["bb"] = np.ones(m)
        self.params["Wc"] = _uniform(rng, bound, (n, m))
        self.params["bc"] = np.zeros(m)
        self.branch_evals = 0

    def __repr__(self):
        return f"QuadraticDense({self.n},{self.m})"

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n,):
            raise ShapeError(f"{self!r} expects per-sample shape ({self.n},), got {tuple(in_shape)}")
        return (self.m,)

    def flop_count(self, in_shape):
        return 3 * (2 * self.n * self.m) + 2 * self.m

    def cache_elements(self, in_shape, mode):
        if mode is MemoryMode.CACHED:
            return self.n + 2 * self.m
        return self.n

    def _product_branches(self, x):
        p = self.params
        self.branch_evals += 2
        return _branch(x, p["Wa"], p["ba"]), _branch(x, p["Wb"], p["bb"])

    def forward(self, x):
        _check_features(x, self.n, repr(self))
        a, b = self._product_branches(x)
        c = _branch(x, self.params["Wc"], self.params["bc"])
        self.branch_evals += 1
        if self.memory_mode is MemoryMode.CACHED:
            self.cache = LayerCache(self.memory_mode, x=x, a=a, b=b)
        else:
            self.cache = LayerCache(self.memory_mode, x=x)
        return T.elementwise("add", T.elementwise("mul", a, b), c)

    def backward(self, grad_out):
        cache = self._take_cache()
        x = cache.x
        if cache.mode is MemoryMode.RECOMPUTE:
            a, b = self._product_branches(x)
        else:
            a, b = cache.a, cache.b
        p = self.params
        g_b = T.elementwise("mul", grad_out, b)  # flows into branch a
        g_a = T.elementwise("mul", grad_out, a)  # flows into branch b
        self.grads["Wa"] = T.matmul(x.T, g_b)
        self.grads["ba"] = g_b.sum(axis=0)
        self.grads["Wb"] = T.matmul(x.T, g_a)
        self.grads["bb"] = g_a.sum(axis=0)
        self.grads["Wc"] = T.matmul(x.T, grad_out)
        self.grads["bc"] = grad_out.sum(axis=0)
        return (
            T.matmul(g_b, p["Wa"].T)
            + T.matmul(g_a, p["Wb"].T)
            + T.matmul(grad_out, p["Wc"].T)
        )


class FullQuadraticDense(Layer):
    """Reference quadratic form ``x^T W_j x`` with one ``n x n`` matrix per output.

    No bias or linear term. Costs ``m*n^2`` parameters; kept as an oracle
    and a complexity baseline for :class:`QuadraticDense`.
    """

    kind = "FullQuadraticDense"

    def __init__(self, n: int, m: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.m = n, m
        self.params["Weta"] = _uniform(rng, 1.0 / n, (m, n, n))

    def __repr__(self):
        return f"FullQuadraticDense({self.n},{self.m})"

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n,):
            raise ShapeError(f"{self!r} expects per-sample shape ({self.n},), got {tuple(in_shape)}")
        return (self.m,)

    def flop_count(self, in_shape):
        return self.m * (2 * self.n * self.n + 2 * self.n)

    def cache_elements(self, in_shape, mode):
        return self.n

    def forward(self, x):
        _check_features(x, self.n, repr(self))
        self.cache = LayerCache(self.memory_mode, x=x)
        return T.check_finite(np.einsum("bi,jik,bk->bj", x, self.params["Weta"], x), repr(self))

    def backward(self, grad_out):
        x = self._take_cache().x
        w = self.params["Weta"]
        self.grads["Weta"] = np.einsum("bj,bi,bk->jik", grad_out, x, x)
        sym = w + w.transpose(0, 2, 1)
        return np.einsum("bj,jik,bk->bi", grad_out, sym, x)


class _ConvGeometry:
    def _init_geometry(self, ci, co, k, stride, padding):
        self.ci, self.co, self.k = ci, co, k
        self.stride, self.padding = stride, padding

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.ci:
            raise ShapeError(f"{self!r} expects per-sample shape ({self.ci}, h, w), got {tuple(in_shape)}")
        _, h, w = in_shape
        return (
            self.co,
            T.conv_output_extent(h, self.k, self.stride, self.padding),
            T.conv_output_extent(w, self.k, self.stride, self.padding),
        )

    def _out_pixels(self, in_shape):
        _, oh, ow = self.output_shape(in_shape)
        return oh * ow

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self!r} expects (batch, {self.ci}, h, w), got {x.shape}")
        self.output_shape(x.shape[1:])

    def _cols(self, x):
        return T.im2col(x, self.k, self.k, self.stride, self.padding)

    def _dims(self, x):
        _, oh, ow = self.output_shape(x.shape[1:])
        return x.shape[0], oh, ow

    def _flat(self, name):
        return self.params[name].reshape(self.co, -1)

    def _kernel_grad(self, g_cols, cols):
        return T.matmul(g_cols.T, cols).reshape(self.co, self.ci, self.k, self.k)

    def _input_grad(self, g_cols_x, x_shape):
        return T.col2im(g_cols_x, x_shape, self.k, self.k, self.stride, self.padding)


class Conv2dLayer(_ConvGeometry, Layer):
    kind = "Conv2d"

    def __init__(self, ci: int, co: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        Layer.__init__(self)
        rng = rng if rng is not None else np.random.default_rng(0)
        self._init_geometry(ci, co, k, stride, padding)
        self.params["K"] = _uniform(rng, math.sqrt(1.0 / (ci * k * k)), (co, ci, k, k))
        self.params["b"] = np.zeros(co)

    def __repr__(self):
        return f"Conv2d({self.ci}->{self.co},{self.k}x{self.k},s{self.stride},p{self.padding})"

    def flop_count(self, in_shape):
        px = self._out_pixels(in_shape)
        return 2 * self.ci * self.k * self.k * self.co * px + self.co * px

    def cache_elements(self, in_shape, mode):
        return math.prod(in_shape)

    def forward(self, x):
        self._check_input(x)
        self.cache = LayerCache(self.memory_mode, x=x)
        bsz, oh, ow = self._dims(x)
        rows = _branch(self._cols(x), self._flat("K").T, self.params["b"])
        return T.cols_to_map(rows, bsz, oh, ow)

    def backward(self, grad_out):
        x = self._take_cache().x
        cols = self._cols(x)
        g = T.map_to_cols(grad_out)
        self.grads["K"] = self._kernel_grad(g, cols)
        self.grads["b"] = g.sum(axis=0)
        return self._input_grad(T.matmul(g, self._flat("K")), x.shape)


class QuadraticConv2d(_ConvGeometry, Layer):
    """Quadratic neuron applied per sliding window.

    Three parallel convolutions ``A``, ``B``, ``C`` with shared stride and
    padding, combined as ``A * B + C``. With 1x1 kernels this is exactly
    :class:`QuadraticDense` applied to every pixel.
    """

    kind = "QuadraticConv2d"

    def __init__(self, ci: int, co: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        Layer.__init__(self)
        rng = rng if rng is not None else np.random.default_rng(0)
        self._init_geometry(ci, co, k, stride, padding)
        bound = math.sqrt(1.0 / (ci * k * k))
        shape = (co, ci, k, k)
        self.params["Ka"] = 0.5 * _uniform(rng, bound, shape)
        self.params["ba"] = np.ones(co)
        self.params["Kb"] = 0.5 * _uniform(rng, bound, shape)
        self.params["bb"] = np.ones(co)
        self.params["Kc"] = _uniform(rng, bound, shape)
        self.params["bc"] = np.zeros(co)
        self.branch_evals = 0

    def __repr__(self):
        return f"QuadraticConv2d({self.ci}->{self.co},{self.k}x{self.k},s{self.stride},p{self.padding})"

    def flop_count(self, in_shape):
        px = self._out_pixels(in_shape)
        return 3 * (2 * self.ci * self.k * self.k * self.co * px) + 2 * self.co * px

    def cache_elements(self, in_shape, mode):
        n = math.prod(in_shape)
        if mode is MemoryMode.CACHED:
            return n + 2 * self.co * self._out_pixels(in_shape)
        return n

    def _product_branches(self, cols):
        # both product branches in one GEMM; forward and recompute share this path
        self.branch_evals += 2
        p = self.params
        ab = _branch(cols, np.concatenate([self._flat("Ka"), self._flat("Kb")]).T,
                     np.concatenate([p["ba"], p["bb"]]))
        return ab[:, :self.co], ab[:, self.co:]

    def forward(self, x):
        self._check_input(x)
        bsz, oh, ow = self._dims(x)
        cols = self._cols(x)
        a, b = self._product_branches(cols)
        c = _branch(cols, self._flat("Kc").T, self.params["bc"])
        self.branch_evals += 1
        if self.memory_mode is MemoryMode.CACHED:
            self.cache = LayerCache(self.memory_mode, x=x, a=a, b=b)
        else:
            self.cache = LayerCache(self.memory_mode, x=x)
        out = T.elementwise("add", T.elementwise("mul", a, b), c)
        return T.cols_to_map(out, bsz, oh, ow)

    def backward(self, grad_out):
        cache = self._take_cache()
        x = cache.x
        cols = self._cols(x)
        if cache.mode is MemoryMode.RECOMPUTE:
            a, b = self._product_branches(cols)
        else:
            a, b = cache.a, cache.b
        g = T.map_to_cols(grad_out)
        # columns [g*B | g*A | g] feed branches a, b, c; one pass over cols each way
        g3 = np.concatenate([T.elementwise("mul", g, b), T.elementwise("mul", g, a), g], axis=1)
        k_grads = T.matmul(g3.T, cols)
        b_grads = g3.sum(axis=0)
        co = self.co
        for i, branch in enumerate("abc"):
            self.grads[f"K{branch}"] = k_grads[i * co:(i + 1) * co].reshape(self.params[f"K{branch}"].shape)
            self.grads[f"b{branch}"] = b_grads[i * co:(i + 1) * co]
        stacked = np.concatenate([self._flat("Ka"), self._flat("Kb"), self._flat("Kc")])
        return self._input_grad(T.matmul(g3, stacked), x.shape)


class ReluLayer(Layer):
    kind = "ReLU"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def flop_count(self, in_shape):
        return math.prod(in_shape)

    def cache_elements(self, in_shape, mode):
        return math.prod(in_shape)

    def forward(self, x):
        self.cache = LayerCache(self.memory_mode, x=x)
        return T.relu(x)

    def backward(self, grad_out):
        x = self._take_cache().x
        return grad_out * (x > 0)


class MaxPool2Layer(Layer):
    kind = "MaxPool2"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"MaxPool2 needs per-sample (c, even h, even w), got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def flop_count(self, in_shape):
        return 3 * math.prod(self.output_shape(in_shape))

    def cache_elements(self, in_shape, mode):
        # argmax indices are int64: one 8-byte slot per pooled cell
        return math.prod(self.output_shape(in_shape))

    def forward(self, x):
        pooled, idx = T.maxpool2(x)
        self.cache = LayerCache(self.memory_mode, argmax=idx)
        return pooled

    def backward(self, grad_out):
        return T.maxpool2_backward(grad_out, self._take_cache().argmax)


class FlattenLayer(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        self.cache = LayerCache(self.memory_mode, in_shape=x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._take_cache().in_shape)


QUADRATIC_LAYERS = (QuadraticDense, QuadraticConv2d)


def param_count(layer: Layer) -> int:
    return layer.param_count()


def flop_count(layer: Layer, input_shape: tuple) -> int:
    """Forward FLOPs per sample for a per-sample ``input_shape``."""
    return layer.flop_count(tuple(input_shape))
