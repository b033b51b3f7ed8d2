"""Sequential networks: forward/backward pipeline, memory accounting, gradcheck."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import QUADRATIC_LAYERS, Layer, MaxPool2Layer, MemoryMode, ReluLayer
from .tensor import NonFiniteError, ShapeError

LOSSES = {"softmax_xent": T.softmax_xent, "logistic": T.logistic_loss}


class Network:
    """Ordered layers plus a loss head.

    ``input_shape`` is the per-sample shape; every layer's shape contract is
    checked when the network is built, so an ill-formed stack never reaches
    numeric code.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple, loss: str = "softmax_xent",
                 memory_mode: MemoryMode | str = MemoryMode.CACHED):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss head {loss!r}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.loss_name = loss
        self.shapes = self._shape_pass()
        if loss == "logistic" and self.shapes[-1] != (1,):
            raise ShapeError(f"logistic head needs a single output, network ends in {self.shapes[-1]}")
        if loss == "softmax_xent" and len(self.shapes[-1]) != 1:
            raise ShapeError(f"softmax head needs flat logits, network ends in {self.shapes[-1]}")
        self.memory_mode = MemoryMode(memory_mode)

    def _shape_pass(self) -> list[tuple]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} {layer!r}: {exc}") from None
        return shapes

    @property
    def memory_mode(self) -> MemoryMode:
        return self._memory_mode

    @memory_mode.setter
    def memory_mode(self, mode) -> None:
        self._memory_mode = MemoryMode(mode)
        for layer in self.layers:
            layer.memory_mode = self._memory_mode

    @property
    def classes(self) -> int:
        return 2 if self.loss_name == "logistic" else self.shapes[-1][0]

    def describe(self) -> list[str]:
        return [f"{i}:{layer!r}" for i, layer in enumerate(self.layers)]

    # -- parameter registry ----------------------------------------------
    def registry(self) -> list[tuple[int, str, np.ndarray]]:
        """``(layer index, name, array)`` by layer, then branch a/b/c, weights before biases."""
        return [(i, name, p) for i, layer in enumerate(self.layers) for name, p in layer.params.items()]

    def parameters(self) -> list[np.ndarray]:
        return [p for _, _, p in self.registry()]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[name] for layer in self.layers for name in layer.params]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def flop_count(self) -> int:
        return sum(layer.flop_count(s) for layer, s in zip(self.layers, self.shapes))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, network has {offset} parameters")

    def flat_gradient(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.gradients()])

    def state_copy(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ShapeError(f"state has {len(state)} tensors, network has {len(params)}")
        for p, s in zip(params, state):
            if p.shape != s.shape:
                raise ShapeError(f"state tensor shape {s.shape} does not match parameter {p.shape}")
            p[...] = s

    # -- numerics ---------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        x = T.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects per-sample shape {self.input_shape}, got {x.shape[1:]}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite activation in layer {i} {layer!r}: {exc}") from None
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            try:
                grad = layer.backward(grad)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite gradient in layer {i} {layer!r}: {exc}") from None
        return grad

    def loss(self, x: np.ndarray, labels: np.ndarray) -> float:
        value, _ = LOSSES[self.loss_name](self.forward(x), labels)
        self.clear_caches()
        return value

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
        value, dlogits = LOSSES[self.loss_name](self.forward(x), labels)
        self.backward(dlogits)
        return value, self.gradients()

    def clear_caches(self) -> None:
        for layer in self.layers:
            layer.cache = None

    def predict(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Predicted class per sample."""
        out = []
        for start in range(0, len(x), batch_size):
            logits = self.forward(x[start:start + batch_size])
            if self.loss_name == "logistic":
                out.append((logits[:, 0] > 0).astype(np.int64))
            else:
                out.append(logits.argmax(axis=1))
        self.clear_caches()
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def loss_and_grads(net: Network, x: np.ndarray, labels: np.ndarray):
    return net.loss_and_grads(x, labels)


# -- memory accounting ------------------------------------------------------

@dataclass
class MemoryReport:
    mode: MemoryMode
    batch: int
    per_layer: list[tuple[str, int]]

    @property
    def peak_activation_bytes(self) -> int:
        # all layer caches are alive together between the end of forward and
        # the start of backward
        return sum(b for _, b in self.per_layer)


BYTES_PER_ELEMENT = 8


def measure_peak_memory(net: Network, batch_shape: tuple, mode: MemoryMode | str) -> MemoryReport:
    """Analytic cache footprint (elements x 8 bytes) of one training step.

    ``batch_shape`` is the full input shape including the batch dimension.
    """
    mode = MemoryMode(mode)
    batch, *sample = batch_shape
    if tuple(sample) != net.input_shape:
        raise ShapeError(f"batch shape {tuple(batch_shape)} does not match network input {net.input_shape}")
    per_layer = [
        (f"{i}:{layer!r}", batch * layer.cache_elements(s, mode) * BYTES_PER_ELEMENT)
        for i, (layer, s) in enumerate(zip(net.layers, net.shapes))
    ]
    return MemoryReport(mode, batch, per_layer)


def observed_cache_bytes(net: Network) -> int:
    """Bytes actually held in layer caches right now (call after a forward)."""
    return sum(layer.cache.nbytes() for layer in net.layers if layer.cache is not None)


def has_quadratic(net: Network) -> bool:
    return any(isinstance(layer, QUADRATIC_LAYERS) for layer in net.layers)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradcheckReport:
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    # tensors whose perturbation flipped a ReLU mask or max-pool argmax
    kinks: list[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tol}

    @property
    def differentiable(self) -> bool:
        """False when some difference quotient straddled a ReLU or max-pool switch."""
        return not self.kinks


def _switch_state(net: Network) -> tuple:
    """Discrete routing of the last forward: ReLU masks and max-pool winners."""
    out = []
    for layer in net.layers:
        if isinstance(layer, MaxPool2Layer) and layer.cache is not None:
            out.append(layer.cache.argmax.tobytes())
        elif isinstance(layer, ReluLayer) and layer.cache is not None:
            out.append(np.packbits(layer.cache.x > 0).tobytes())
    return tuple(out)


def _probe(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, tuple]:
    value, _ = LOSSES[net.loss_name](net.forward(x), labels)
    switches = _switch_state(net)
    net.clear_caches()
    return value, switches


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradcheck(net: Network, x: np.ndarray, labels: np.ndarray, eps: float = 1e-6, tol: float = 1e-6,
              max_coords: int | None = None, rng: np.random.Generator | None = None,
              check_input: bool = True, directional: bool = False) -> GradcheckReport:
    """Compare analytic gradients with central differences of the loss.

    Each parameter tensor (and the input) is checked as a whole. By default
    the error is the 2-norm relative error over its coordinates;
    ``max_coords`` samples that many coordinates per tensor.

    ``directional=True`` instead moves the whole tensor a distance ``eps``
    along the unit vector ``v ~ sign(g) * u`` with ``u ~ U(0.5, 1.5)`` and
    compares ``g.v`` with the central difference along ``v``. That costs two
    loss evaluations per tensor, and ``g.v`` is a positively weighted sum of
    ``|g_i|`` that cannot cancel, so full-size networks stay well above
    round-off. A sign-flipped gradient shows up as error 2.

    A difference quotient that flips a ReLU mask or a max-pool winner does not
    measure the derivative; such tensors are listed in ``report.kinks`` so
    the caller can retry at a different point.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = T.as_tensor(x).copy()
    _, dlogits = LOSSES[net.loss_name](net.forward(x), labels)
    base = _switch_state(net)
    grad_x = net.backward(dlogits)
    grads = [g.copy() for g in net.gradients()]
    report = GradcheckReport(eps, tol)

    def numeric(key: str, target: np.ndarray, idx: np.ndarray) -> np.ndarray:
        flat = target.reshape(-1)
        out = np.empty(idx.size)
        for k, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + eps
            plus, s_plus = _probe(net, x, labels)
            flat[j] = old - eps
            minus, s_minus = _probe(net, x, labels)
            flat[j] = old
            out[k] = (plus - minus) / (2 * eps)
            if (s_plus != base or s_minus != base) and key not in report.kinks:
                report.kinks.append(key)
        return out

    def along(key: str, target: np.ndarray, analytic: np.ndarray) -> float:
        v = np.sign(analytic) * rng.uniform(0.5, 1.5, size=target.shape)
        v /= max(np.linalg.norm(v), 1e-300)
        old = target.copy()
        target += eps * v
        plus, s_plus = _probe(net, x, labels)
        target[...] = old - eps * v
        minus, s_minus = _probe(net, x, labels)
        target[...] = old
        if s_plus != base or s_minus != base:
            report.kinks.append(key)
        return relative_error(np.sum(analytic * v), (plus - minus) / (2 * eps))

    def pick(size: int) -> np.ndarray:
        if max_coords is None or size <= max_coords:
            return np.arange(size)
        return np.sort(rng.choice(size, size=max_coords, replace=False))

    targets = [(f"{i}:{name}", p, g) for (i, name, p), g in zip(net.registry(), grads)]
    if check_input:
        targets.append(("input", x, grad_x))
    for key, p, g in targets:
        if directional:
            report.errors[key] = along(key, p, g)
        else:
            idx = pick(p.size)
            report.errors[key] = relative_error(g.reshape(-1)[idx], numeric(key, p, idx))
    net.clear_caches()
    return report


def gradcheck_layer(layer: Layer, x: np.ndarray, eps: float = 1e-6, tol: float = 1e-6,
                    rng: np.random.Generator | None = None) -> GradcheckReport:
    """Finite-difference check of one layer under the loss ``sum(R * layer(x))``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = T.as_tensor(x).copy()
    proj = rng.normal(size=layer.forward(x).shape)
    grad_x = layer.backward(proj)
    grads = {name: layer.grads[name].copy() for name in layer.params}

    def value() -> float:
        out = float(np.sum(proj * layer.forward(x)))
        layer.cache = None
        return out

    def numeric(target: np.ndarray) -> np.ndarray:
        flat = target.reshape(-1)
        out = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            plus = value()
            flat[j] = old - eps
            minus = value()
            flat[j] = old
            out[j] = (plus - minus) / (2 * eps)
        return out

    report = GradcheckReport(eps, tol)
    for name, p in layer.params.items():
        report.errors[name] = relative_error(grads[name], numeric(p))
    report.errors["input"] = relative_error(grad_x, numeric(x))
    return report
