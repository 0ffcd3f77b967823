"""Accuracy oracle for pruned networks.

Contains a torch interpreter for :class:`NetworkSpec` DAGs (with zero-masking
of pruned units), a procedural 10-class shape dataset, a small trainer for
baseline weights, and a client for external evaluation commands.
"""
from __future__ import annotations

import logging
import math
import re
import shlex
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import diffcore
from .errors import DivergenceError, EmptyDatasetError, OracleProtocolError, OracleUnavailableError, ShapeMismatchError
from .formats import save_mask
from .netmodel import LayerKind, NetworkSpec, PruningMask, keep_vectors

log = logging.getLogger(__name__)

NUM_CLASSES = 10
_TENSOR_NAMES = ("weights", "bias", "running_mean", "running_var")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.labels) == 0:
            raise EmptyDatasetError(f"{self.split} split is empty")
        if self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def head(self, n: int) -> Dataset:
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


@dataclass(frozen=True)
class AccuracyReport:
    top1: float
    n_samples: int
    eval_ms: float


class TorchNet:
    """Executes a NetworkSpec with torch ops.

    Parameters are copied into torch tensors once; ``trainable=True`` makes
    them leaves that require grad so the net can be optimised in place and
    written back with :meth:`to_spec`.
    """

    def __init__(self, net: NetworkSpec, dtype: torch.dtype = torch.float32, trainable: bool = False):
        self.net = net
        self.dtype = dtype
        self.order = net.topo_order()
        self.inputs = {lid: net.inputs_of(lid) for lid in self.order}
        self.output_id = self.order[-1]
        self.tensors: dict[int, dict[str, torch.Tensor]] = {}
        for layer in net.layers:
            ts = {}
            for name, value in layer.tensors().items():
                t = torch.tensor(np.asarray(value), dtype=dtype)
                if trainable and name in ("weights", "bias"):
                    t.requires_grad_(True)
                ts[name] = t
            self.tensors[layer.id] = ts

    def parameters(self) -> list[torch.Tensor]:
        return [t for ts in self.tensors.values() for t in ts.values() if t.requires_grad]

    def keep_tensors(self, mask: PruningMask | None) -> dict[int, torch.Tensor]:
        if mask is None or not mask.bits.any():
            return {}
        out = {}
        for lid, k in keep_vectors(self.net, mask).items():
            if not k.all():
                out[lid] = torch.tensor(k, dtype=self.dtype)
        return out

    def forward(
        self,
        x: torch.Tensor,
        keep: dict[int, torch.Tensor] | None = None,
        training: bool = False,
        on_layer: Callable | None = None,
        record: dict | None = None,
    ) -> torch.Tensor:
        keep = keep or {}
        outs: dict[int, torch.Tensor] = {}
        for lid in self.order:
            layer = self.net.layer(lid)
            ts = self.tensors[lid]
            ins = [outs[i] for i in self.inputs[lid]]
            kind = layer.kind
            if kind == LayerKind.INPUT:
                y = x
            elif kind == LayerKind.CONV2D:
                y = F.conv2d(ins[0], ts["weights"], ts.get("bias"), stride=layer.stride, padding=layer.padding)
            elif kind == LayerKind.LINEAR:
                y = F.linear(ins[0], ts["weights"], ts.get("bias"))
            elif kind == LayerKind.BATCHNORM:
                y = F.batch_norm(
                    ins[0], ts["running_mean"], ts["running_var"], ts.get("weights"), ts.get("bias"),
                    training=training, momentum=0.1, eps=layer.eps,
                )
            elif kind == LayerKind.POOL:
                pool = F.max_pool2d if layer.pool_mode == "max" else F.avg_pool2d
                y = pool(ins[0], kernel_size=layer.kernel, stride=layer.stride)
            elif kind == LayerKind.ADD:
                y = ins[0] + ins[1]
            elif kind == LayerKind.FLATTEN:
                y = ins[0].flatten(1)
            else:  # OUTPUT
                y = ins[0]
            if layer.relu:
                y = torch.relu(y)
            if lid in keep:
                k = keep[lid]
                y = y * (k.view(1, -1, 1, 1) if y.dim() == 4 else k.view(1, -1))
            if on_layer is not None:
                on_layer(layer, ts, y)
            if record is not None:
                record[lid] = y
            outs[lid] = y
        return outs[self.output_id]

    def to_spec(self) -> NetworkSpec:
        layers = []
        for layer in self.net.layers:
            changes = {
                name: t.detach().cpu().numpy().astype(np.float32).copy()
                for name, t in self.tensors[layer.id].items()
            }
            layers.append(replace(layer, **changes))
        return NetworkSpec(tuple(layers), self.net.edges, self.net.input_resolution)


def _check_batch(net: NetworkSpec, batch: np.ndarray) -> None:
    if tuple(batch.shape[1:]) != tuple(net.input_resolution):
        raise ShapeMismatchError(f"batch shape {batch.shape[1:]} != input resolution {net.input_resolution}")


def forward_masked(net: NetworkSpec, mask: PruningMask | None, batch: np.ndarray, dtype=torch.float32) -> np.ndarray:
    """Inference with pruned units zeroed at their producing layer (after BatchNorm)."""
    _check_batch(net, batch)
    tnet = TorchNet(net, dtype=dtype)
    with torch.no_grad():
        return tnet.forward(torch.tensor(batch, dtype=dtype), tnet.keep_tensors(mask)).numpy()


def forward(net: NetworkSpec, batch: np.ndarray, dtype=torch.float32) -> np.ndarray:
    return forward_masked(net, None, batch, dtype)


def count_macs(net: NetworkSpec, batch: np.ndarray) -> int:
    """Multiply-accumulates per sample, counted from live tensor shapes during a forward pass."""
    _check_batch(net, batch)
    tnet = TorchNet(net)
    total = 0

    def hook(layer, ts, y):
        nonlocal total
        if layer.kind in (LayerKind.CONV2D, LayerKind.LINEAR):
            per_output = ts["weights"][0].numel()
            total += (y.numel() // y.shape[0]) * per_output

    with torch.no_grad():
        tnet.forward(torch.tensor(batch), on_layer=hook)
    return int(total)


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(logits, axis=1)


def _accuracy(tnet: TorchNet, keep, images: np.ndarray, labels: np.ndarray, batch_size: int) -> int:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            xb = torch.tensor(images[start : start + batch_size], dtype=tnet.dtype)
            logits = tnet.forward(xb, keep).numpy()
            correct += int((predict(logits) == labels[start : start + batch_size]).sum())
    return correct


def accuracy(net: NetworkSpec, mask: PruningMask | None, dataset: Dataset, batch_size: int = 256) -> AccuracyReport:
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset is empty")
    _check_batch(net, dataset.images[:1])
    t0 = time.perf_counter()
    tnet = TorchNet(net)
    correct = _accuracy(tnet, tnet.keep_tensors(mask), dataset.images, dataset.labels, batch_size)
    n = len(dataset)
    return AccuracyReport(correct / n, n, (time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------- synthetic data


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    r = np.hypot(u, v)

    def bar(angle: float, offset: float = 0.0, half_len: float = 0.75, half_w: float = 0.16):
        ca, sa = math.cos(angle), math.sin(angle)
        along = u * ca + v * sa
        across = -u * sa + v * ca - offset * s
        return (np.abs(along) < half_len * s) & (np.abs(across) < half_w * s)

    q = math.pi / 4
    if cls == 0:
        return bar(0.0)
    if cls == 1:
        return bar(2 * q)
    if cls == 2:
        return bar(q)
    if cls == 3:
        return bar(-q)
    if cls == 4:
        return r < 0.35 * s
    if cls == 5:
        return r < 0.72 * s
    if cls == 6:
        return np.abs(r - 0.55 * s) < 0.13 * s
    if cls == 7:
        return bar(0.0, half_w=0.12) | bar(2 * q, half_w=0.12)
    if cls == 8:
        return bar(q, half_w=0.12) | bar(-q, half_w=0.12)
    return bar(0.0, offset=0.4, half_w=0.11) | bar(0.0, offset=-0.4, half_w=0.11)


def synth_arrays(seed: int, n_per_class: int, resolution: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Procedural 10-class shape images; sample ``i`` has class ``i % 10``."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    rng = np.random.default_rng(seed)
    n = n_per_class * NUM_CLASSES
    grid = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    for i in range(n):
        cx, cy = rng.uniform(-0.2, 0.2, 2)
        scale = rng.uniform(0.75, 1.2)
        theta = rng.uniform(-0.25, 0.25)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        shape = _shape_mask(int(labels[i]), u, v, scale).astype(np.float32)
        fg = rng.uniform(0.45, 0.9) * rng.uniform(0.7, 1.0, 3)
        bg = rng.uniform(0.0, 0.25, 3)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * shape[None]
        images[i] = img + rng.normal(0.0, 0.1, img.shape)
    return images, labels


def split_indices(labels: np.ndarray, num_classes: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split: the first 80% of each class (in file order) train, the rest validate."""
    train, val = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        cut = int(round(train_fraction * len(idx)))
        train.append(idx[:cut])
        val.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def make_splits(images: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[Dataset, Dataset]:
    tr, va = split_indices(labels, num_classes)
    return (
        Dataset(images[tr], labels[tr], num_classes, "train"),
        Dataset(images[va], labels[va], num_classes, "val"),
    )


def synth_dataset(seed: int, n_per_class: int, resolution: int = 16) -> tuple[Dataset, Dataset]:
    images, labels = synth_arrays(seed, n_per_class, resolution)
    return make_splits(images, labels, NUM_CLASSES)


# ---------------------------------------------------------------- training


def train_baseline(
    net: NetworkSpec,
    dataset: Dataset,
    epochs: int,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
    val: Dataset | None = None,
) -> tuple[NetworkSpec, list[dict]]:
    """Cross-entropy + Adam; returns the trained network and per-epoch accuracy logs."""
    if epochs == 0:
        return net, []
    rng = np.random.default_rng(seed)
    tnet = TorchNet(net, trainable=True)
    params = tnet.parameters()
    opt = diffcore.Adam(params, lr=lr)
    images = torch.tensor(dataset.images)
    labels = torch.tensor(dataset.labels)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = torch.tensor(order[start : start + batch_size])
            logits = tnet.forward(images[idx], training=True)
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.step(diffcore.backward(loss, params))
            total += float(loss.detach()) * len(idx)
        record = {
            "epoch": epoch,
            "loss": total / len(order),
            "train_top1": _accuracy(tnet, None, dataset.images, dataset.labels, 256) / len(dataset),
        }
        if val is not None:
            record["val_top1"] = _accuracy(tnet, None, val.images, val.labels, 256) / len(val)
        log.info("epoch %d loss %.4f train %.3f", epoch, record["loss"], record["train_top1"])
        history.append(record)
    return tnet.to_spec(), history


# ---------------------------------------------------------------- oracles


class BuiltinOracle:
    """Evaluates masks on a fixed validation subset with the in-process interpreter.

    Reentrant: weights are read-only after construction.
    """

    def __init__(self, net: NetworkSpec, val: Dataset, subset: int = 512, calibration: int = 64, batch_size: int = 256):
        self.net = net
        self.data = val.head(subset)
        self.calibration = val.head(calibration)
        self.batch_size = batch_size
        self._tnet = TorchNet(net)

    def evaluate(self, mask: PruningMask | None) -> AccuracyReport:
        t0 = time.perf_counter()
        correct = _accuracy(self._tnet, self._tnet.keep_tensors(mask), self.data.images, self.data.labels, self.batch_size)
        n = len(self.data)
        return AccuracyReport(correct / n, n, (time.perf_counter() - t0) * 1e3)

    def edge_activation_l1(self) -> list[float]:
        """Mean per-sample l1 norm of each edge's source activation on the calibration batch."""
        record: dict[int, torch.Tensor] = {}
        with torch.no_grad():
            self._tnet.forward(torch.tensor(self.calibration.images), record=record)
        per_layer = {lid: float(y.abs().flatten(1).sum(1).mean()) for lid, y in record.items()}
        return [per_layer[s] for s, _, _ in self.net.edges]


_DECIMAL = re.compile(r"^\s*[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\s*$")


def external_oracle(cmd: str, mask_file, timeout: float = 600.0) -> AccuracyReport:
    """Run ``cmd <mask_file>`` and parse a single accuracy in [0, 1] from stdout."""
    t0 = time.perf_counter()
    try:
        proc = subprocess.run(
            shlex.split(cmd) + [str(mask_file)], capture_output=True, text=True, timeout=timeout
        )
    except subprocess.TimeoutExpired as exc:
        raise OracleProtocolError(f"oracle command timed out after {timeout}s") from exc
    except OSError as exc:
        raise OracleProtocolError(f"cannot run oracle command: {exc}") from exc
    if proc.returncode != 0:
        raise OracleProtocolError(f"oracle exited with code {proc.returncode}", exit_code=proc.returncode)
    out = proc.stdout.strip()
    if not _DECIMAL.match(out):
        raise OracleProtocolError(f"oracle output is not a single decimal: {out!r}")
    value = float(out)
    if not 0.0 <= value <= 1.0:
        raise OracleProtocolError(f"oracle accuracy {value} outside [0, 1]")
    return AccuracyReport(value, 0, (time.perf_counter() - t0) * 1e3)


class ExternalOracle:
    """Oracle backed by an external command; calls are serialised unless marked concurrency-safe."""

    def __init__(self, cmd: str, timeout: float = 600.0, concurrency_safe: bool = False, workdir=None, n_units: int | None = None):
        self.cmd = cmd
        self.n_units = n_units
        self.timeout = timeout
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="oracle-"))
        self._lock = None if concurrency_safe else threading.Lock()
        self._calls = 0
        self._count_lock = threading.Lock()

    def evaluate(self, mask: PruningMask | None) -> AccuracyReport:
        if mask is None:
            if self.n_units is None:
                raise OracleUnavailableError("external oracle needs n_units to evaluate the unpruned network")
            mask = PruningMask.empty(self.n_units)
        with self._count_lock:
            self._calls += 1
            path = self.workdir / f"mask-{self._calls}.gsccm"
        save_mask(path, mask)
        if self._lock is None:
            return external_oracle(self.cmd, path, self.timeout)
        with self._lock:
            return external_oracle(self.cmd, path, self.timeout)

    def edge_activation_l1(self) -> None:
        return None
