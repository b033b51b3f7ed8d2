"""Experiment orchestration: presets, training loop, records, reports, checkpoints."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .layers import (Conv2dLayer, FlattenLayer, LinearDense, MaxPool2Layer, MemoryMode,
                     QuadraticConv2d, QuadraticDense, ReluLayer)
from .network import LOSSES, Network, measure_peak_memory
from .optim import LbfgsState, SgdState, epoch_schedule, lbfgs_step, sgd_step
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

PRESETS = ("mlp-first-order", "mlp-quadratic", "convnet-first-order", "convnet-quadratic",
           "xor-first-order", "xor-quadratic")
DATASETS = ("mnist", "cifar10", "xor")
INPUT_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32), "xor": (2,)}


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: str = "mnist"
    data_dir: str = ""
    preset: str = "mlp-quadratic"
    relu: bool = False
    hidden: int = 128
    optimizer: str = "sgd"
    lr: float = 0.0  # 0 -> preset default, see learning_rate
    momentum: float = 0.9
    clip_norm: float = -1.0  # < 0 -> preset default, see gradient_clip; 0 disables
    batch_size: int = 128
    megabatch: int = 10000
    lbfgs_history: int = 10
    memory_mode: str = "cached"
    seed: int = 0
    epochs: int = 30
    patience: int = 3
    min_delta: float = 0.001
    val_size: int = 5000
    train_subset: int = 0  # 0 -> whole training split (CIFAR-10 defaults to 5000 unless full)
    full: bool = False
    xor_per_quadrant: int = 25
    xor_noise: float = 0.0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.optimizer not in ("sgd", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        MemoryMode(self.memory_mode)

    @property
    def neuron(self) -> str:
        return "quadratic" if self.preset.endswith("quadratic") else "first-order"

    @property
    def learning_rate(self) -> float:
        if self.lr:
            return self.lr
        # stacked quadratic layers diverge at 0.05 with momentum 0.9
        return 0.05 if self.preset in ("mlp-first-order", "xor-first-order") else 0.01

    @property
    def gradient_clip(self) -> float:
        if self.clip_norm >= 0:
            return self.clip_norm
        # a 4096-wide dense head on raw conv features diverges under plain SGD,
        # and so does the stacked quadratic MLP for some seeds
        if self.preset.startswith("convnet") or self.preset == "mlp-quadratic":
            return 1.0
        return 0.0

    @property
    def effective_subset(self) -> int:
        if self.train_subset or self.full:
            return 0 if self.full else self.train_subset
        return 5000 if self.dataset == "cifar10" else 0

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- file format: one [experiment] section of key = value lines --------
    def dumps(self) -> str:
        parser = configparser.ConfigParser()
        parser["experiment"] = {f.name: _format_value(getattr(self, f.name)) for f in dataclasses.fields(self)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        if not parser.has_section("experiment"):
            raise ValueError("config needs an [experiment] section")
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser["experiment"].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse_value(known[key].type, raw, parser["experiment"], key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(type_name: str, raw: str, section, key):
    if type_name == "bool":
        return section.getboolean(key)
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw


# -- presets -----------------------------------------------------------------

def build_preset(config: ExperimentConfig, input_shape: tuple | None = None) -> Network:
    """Network for a preset; layer sizes are fixed here, neuron type and ReLU by config."""
    rng = np.random.default_rng(config.seed)
    shape = tuple(input_shape) if input_shape is not None else INPUT_SHAPES[config.dataset]
    quad = config.neuron == "quadratic"
    dense = QuadraticDense if quad else LinearDense
    conv = QuadraticConv2d if quad else Conv2dLayer
    mode = MemoryMode(config.memory_mode)
    family = config.preset.split("-", 1)[0]

    if family == "xor":
        return Network([dense(math.prod(shape), 1, rng)], shape, loss="logistic", memory_mode=mode)
    layers = []
    if family == "mlp":
        n = math.prod(shape)
        if len(shape) > 1:
            layers.append(FlattenLayer())
        layers.append(dense(n, config.hidden, rng))
        if config.relu:
            layers.append(ReluLayer())
        layers.append(dense(config.hidden, 10, rng))
    else:
        c, h, w = shape
        for ci, co in ((c, 32), (32, 64)):
            layers.append(conv(ci, co, 5, padding=2, rng=rng))
            if config.relu:
                layers.append(ReluLayer())
            layers.append(MaxPool2Layer())
        layers += [FlattenLayer(), dense(64 * (h // 4) * (w // 4), 10, rng)]
    return Network(layers, shape, memory_mode=mode)


# -- data ----------------------------------------------------------------------

def resolve_data_dir(config: ExperimentConfig) -> Path:
    if config.data_dir:
        return Path(config.data_dir)
    return Path(os.environ.get("QUADNET_DATA_DIR", "data")) / config.dataset


@dataclass
class Splits:
    train: D.LabeledDataset
    val: D.LabeledDataset
    test: D.LabeledDataset


def load_splits(config: ExperimentConfig) -> Splits:
    """Train/validation/test. Validation is the last ``val_size`` training samples."""
    if config.dataset == "xor":
        ds = D.make_xor(config.xor_per_quadrant, config.xor_noise, config.seed)
        return Splits(ds, ds, ds)
    root = resolve_data_dir(config)
    if config.dataset == "mnist":
        full = D.load_mnist(*D.mnist_paths(root, "train"))
        test = D.load_mnist(*D.mnist_paths(root, "test"))
    else:
        full = D.load_cifar10(D.cifar_paths(root, "train"))
        test = D.load_cifar10(D.cifar_paths(root, "test"))
    train, val = full.split_last(config.val_size)
    if config.effective_subset:
        train = train.subset(slice(0, config.effective_subset))
    return Splits(train, val, test)


# -- records -------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    seconds: float
    peak_bytes: int


METRIC_COLUMNS = ("epoch", "train_loss", "val_acc", "seconds", "peak_bytes")
_META_TYPES = {"name": str, "preset": str, "neuron": str, "relu": bool, "optimizer": str,
               "memory_mode": str, "seed": int, "params": int, "test_acc": float,
               "converged_epoch": int, "stopped_early": bool, "nondescent_steps": int}


@dataclass
class RunRecord:
    name: str
    preset: str
    neuron: str
    relu: bool
    optimizer: str
    memory_mode: str
    seed: int
    params: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    test_acc: float = float("nan")
    converged_epoch: int = 0
    stopped_early: bool = False
    nondescent_steps: int = 0

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else float("nan")

    @property
    def peak_bytes(self) -> int:
        return max((e.peak_bytes for e in self.epochs), default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in _META_TYPES:
            buf.write(f"# {key}={_format_value(getattr(self, key))}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_acc), repr(e.seconds), e.peak_bytes])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunRecord":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                kind = _META_TYPES.get(key)
                if kind is None:
                    continue
                meta[key] = value.lower() == "true" if kind is bool else kind(value)
            elif line.strip():
                body.append(line)
        rows = list(csv.reader(body))
        if not rows or tuple(rows[0]) != METRIC_COLUMNS:
            raise ValueError(f"metrics CSV must start with header {','.join(METRIC_COLUMNS)}")
        epochs = [EpochMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]
        missing = set(_META_TYPES) - set(meta)
        if missing:
            raise ValueError(f"metrics CSV lacks metadata: {', '.join(sorted(missing))}")
        return cls(epochs=epochs, **meta)


class TrainingDiverged(RuntimeError):
    pass


# -- training ------------------------------------------------------------------

def evaluate(net: Network, dataset: D.LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(net.predict(dataset.inputs) == dataset.labels))


def _sgd_epoch(net, train, config, state, epoch):
    units = epoch_schedule("sgd", len(train), config.batch_size, [config.seed, epoch])
    total = 0.0
    for idx in units:
        loss, grads = net.loss_and_grads(train.inputs[idx], train.labels[idx])
        sgd_step(net.parameters(), grads, state)
        total += loss * len(idx)
    return total / len(train)


def _lbfgs_epoch(net, train, config, state, epoch):
    units = epoch_schedule("lbfgs", len(train), config.megabatch, [config.seed, epoch])
    total = 0.0
    for idx in units:
        x, y = train.inputs[idx], train.labels[idx]

        def loss_fn(w):
            net.set_flat(w)
            loss, _ = net.loss_and_grads(x, y)
            return loss, net.flat_gradient()

        w, loss = lbfgs_step(loss_fn, net.get_flat(), state)
        net.set_flat(w)
        total += loss * len(idx)
    return total / len(train)


def train(config: ExperimentConfig, splits: Splits | None = None,
          net: Network | None = None) -> tuple[RunRecord, Network]:
    """Train until the epoch cap or until validation accuracy stalls.

    The converged epoch is the last epoch that raised validation accuracy by
    more than ``min_delta``; training stops after ``patience`` epochs without
    such a gain, and the weights from the converged epoch are restored before
    the single test evaluation.
    """
    splits = splits if splits is not None else load_splits(config)
    net = net if net is not None else build_preset(config, splits.train.sample_shape)
    net.memory_mode = config.memory_mode
    record = RunRecord(config.name, config.preset, config.neuron, config.relu, config.optimizer,
                       config.memory_mode, config.seed, net.param_count())
    unit = config.batch_size if config.optimizer == "sgd" else min(config.megabatch, len(splits.train))
    peak = measure_peak_memory(net, (unit,) + net.input_shape, config.memory_mode).peak_activation_bytes
    if config.optimizer == "sgd":
        state = SgdState(config.learning_rate, config.momentum, clip_norm=config.gradient_clip)
        run_epoch = _sgd_epoch
    else:
        state, run_epoch = LbfgsState(history_size=config.lbfgs_history), _lbfgs_epoch

    best_acc, best_state, stale = -math.inf, net.state_copy(), 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        try:
            loss = run_epoch(net, splits.train, config, state, epoch)
            seconds = time.perf_counter() - start
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{config.name}: epoch {epoch} produced loss {loss}")
            acc = evaluate(net, splits.val)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{config.name}: epoch {epoch} diverged: {exc}") from None
        record.epochs.append(EpochMetrics(epoch, loss, acc, seconds, peak))
        log.info("%s epoch %d loss %.4f val_acc %.4f (%.1fs)", config.name, epoch, loss, acc, seconds)
        if acc > best_acc + config.min_delta:
            best_acc, best_state, stale = acc, net.state_copy(), 0
            record.converged_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                record.stopped_early = True
                break
    if isinstance(state, LbfgsState):
        record.nondescent_steps = state.nondescent_steps
    if isinstance(state, LbfgsState) and (state.nondescent_steps or state.line_search_failures):
        log.warning("%s: L-BFGS saw %d non-descent directions and %d line-search failures",
                    config.name, state.nondescent_steps, state.line_search_failures)
    net.load_state(best_state)
    record.test_acc = evaluate(net, splits.test)
    return record, net


# -- reporting -----------------------------------------------------------------

TABLE_COLUMNS = ("run", "neuron", "relu", "optimizer", "accuracy", "epoch", "time/epoch",
                 "memory", "peak_bytes")


def _row(r: RunRecord) -> list[str]:
    return [r.name, r.neuron, "yes" if r.relu else "no", r.optimizer, f"{100 * r.test_acc:.2f}%",
            str(r.converged_epoch), f"{r.mean_seconds:.1f}s", r.memory_mode, str(r.peak_bytes)]


def report(records: list[RunRecord]) -> tuple[str, str, list[str]]:
    """``(csv, aligned text table, warnings)`` comparing finished runs."""
    rows = [_row(r) for r in records]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "neuron", "relu", "optimizer", "test_acc", "converged_epoch",
                     "mean_seconds", "memory_mode", "peak_bytes"])
    for r in records:
        writer.writerow([r.name, r.neuron, r.relu, r.optimizer, repr(r.test_acc), r.converged_epoch,
                         repr(r.mean_seconds), r.memory_mode, r.peak_bytes])
    table = ""
    if rows:
        widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(TABLE_COLUMNS)]
        lines = [" | ".join(h.ljust(w) for h, w in zip(TABLE_COLUMNS, widths)),
                 "-+-".join("-" * w for w in widths)]
        lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        table = "\n".join(lines) + "\n"
    return buf.getvalue(), table, activation_free_warnings(records)


def activation_free_warnings(records: list[RunRecord]) -> list[str]:
    """Soft check: without ReLU a quadratic net should converge no later than with it."""
    out = []
    for off in records:
        if off.neuron != "quadratic" or off.relu:
            continue
        for on in records:
            if (on.neuron == "quadratic" and on.relu and on.optimizer == off.optimizer
                    and on.seed == off.seed and off.converged_epoch > on.converged_epoch):
                out.append(f"warning: {off.name} (relu off) converged at epoch {off.converged_epoch}, "
                           f"later than {on.name} (relu on) at {on.converged_epoch}")
    return out


def benchmark(config: ExperimentConfig, steps: int = 5, n_samples: int | None = None) -> dict:
    """Parameters, FLOPs, per-mode cache bytes and timed update units on synthetic input.

    ``seconds_per_epoch`` extrapolates the mean update time to an epoch of
    ``n_samples`` (default: the dataset's training split size).
    """
    net = build_preset(config)
    rng = np.random.default_rng(config.seed)
    unit = config.batch_size if config.optimizer == "sgd" else config.megabatch
    if n_samples is None:
        n_samples = {"mnist": 55000, "cifar10": 45000 if config.full else 5000,
                     "xor": 4 * config.xor_per_quadrant}[config.dataset]
    unit = min(unit, n_samples)
    x = rng.normal(size=(unit,) + net.input_shape)
    y = rng.integers(0, net.classes, size=unit)
    out = {"preset": config.preset, "relu": config.relu, "params": net.param_count(),
           "flops_per_sample": net.flop_count(), "unit_size": unit}
    for mode in MemoryMode:
        net.memory_mode = mode
        out[f"peak_bytes_{mode.value}"] = measure_peak_memory(net, x.shape, mode).peak_activation_bytes
        fwd = bwd = 0.0
        for _ in range(steps):
            t0 = time.perf_counter()
            loss, dlogits = _loss_head(net, x, y)
            t1 = time.perf_counter()
            net.backward(dlogits)
            t2 = time.perf_counter()
            fwd += t1 - t0
            bwd += t2 - t1
        out[f"forward_seconds_{mode.value}"] = fwd / steps
        out[f"backward_seconds_{mode.value}"] = bwd / steps
        out[f"seconds_per_epoch_{mode.value}"] = (fwd + bwd) / steps * math.ceil(n_samples / unit)
    out["recompute_backward_overhead"] = out["backward_seconds_recompute"] / out["backward_seconds_cached"] - 1.0
    return out


def _loss_head(net: Network, x, y):
    return LOSSES[net.loss_name](net.forward(x), y)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"QNETCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: Network, config: ExperimentConfig) -> None:
    """Layout: magic, u32 version, u32 config length, config text, u32 tensor
    count, then per tensor u32 rank, u32 dims, float64 little-endian payload."""
    cfg = config.dumps().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    params = net.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(p.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Network, ExperimentConfig]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a quadnet checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, cfg_len = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ExperimentConfig.loads(blob[pos:pos + cfg_len].decode())
    pos += cfg_len
    (count,) = take("<I")
    state = []
    for _ in range(count):
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = math.prod(shape)
        if pos + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated tensor payload")
        state.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    net = build_preset(config)
    net.load_state(state)
    return net, config


def write_run(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{record.name}.csv"
    path.write_text(record.to_csv())
    return path
