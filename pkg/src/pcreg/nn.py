"""Parameterised blocks (dense, point norm, MLP, edge convolution), Adam, checkpoints."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ParameterError, ShapeError, TrainingError


class Module:
    """Container discovering parameters and buffers from its attributes."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Module, Tensor)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        """This module and every sub-module, depth first."""
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        params = dict(self.named_parameters())
        for key, value in state.items():
            value = np.array(value, dtype=np.float64)
            if value.shape != own[key].shape:
                raise CheckpointError(f"{key}: shape {value.shape} != {own[key].shape}")
            kind, name = key.split("/", 1)
            if kind == "param":
                params[name].data = value
            else:
                self._set_buffer(name, value)

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        target: Module = self
        *path, leaf = dotted.split(".")
        i = 0
        while i < len(path):
            attr = getattr(target, path[i])
            if isinstance(attr, (list, tuple)):
                attr = attr[int(path[i + 1])]
                i += 1
            target = attr
            i += 1
        getattr(target, leaf)[...] = value


class DenseLayer(Module):
    """Fully connected layer ``y = x W^T + b`` with He-uniform initialisation."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "he"):
        if init == "he":
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
        elif init == "identity":
            if n_in != n_out:
                raise ParameterError("identity init needs n_in == n_out")
            w = np.eye(n_in)
        elif init == "zeros":
            w = np.zeros((n_out, n_in))
        else:
            raise ParameterError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class PointNorm(Module):
    """Per-channel normalisation over the point (or point-pair) axis.

    Train mode normalises with the statistics of the current rows and folds
    them into running estimates; eval mode uses the running estimates.
    ``momentum=None`` makes the running estimates a plain cumulative average
    over all updates since :meth:`reset_stats`.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float | None = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.track_stats = True
        self.updates = 0

    def reset_stats(self) -> None:
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0
        self.updates = 0

    def __call__(self, x) -> Tensor:
        if not self.training:
            y, _, _ = ad.batch_norm(
                x, self.gamma, self.beta, self.eps, stats=(self.running_mean, self.running_var)
            )
            return y
        y, mu, var = ad.batch_norm(x, self.gamma, self.beta, self.eps)
        if self.track_stats:
            m = x.shape[0]
            unbiased = var * m / (m - 1) if m > 1 else var
            self.updates += 1
            f = 1.0 / self.updates if self.momentum is None else self.momentum
            self.running_mean *= 1.0 - f
            self.running_mean += f * mu
            self.running_var *= 1.0 - f
            self.running_var += f * unbiased
        return y


class Mlp(Module):
    """Dense -> PointNorm -> ReLU blocks, with a bare last layer.

    ``final_activation`` is ``"none"``/``"identity"`` or ``"sigmoid"``.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        final_activation: str = "none",
        init: str = "he",
    ):
        widths = list(widths)
        if len(widths) < 2:
            raise ParameterError("an MLP needs at least two widths")
        if final_activation not in ("none", "identity", "sigmoid"):
            raise ParameterError(f"unknown final activation {final_activation!r}")
        self.widths = widths
        self.final_activation = final_activation
        self.layers = [DenseLayer(a, b, rng, init) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [PointNorm(w) for w in widths[1:-1]]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"MLP expects (N, {self.widths[0]}) input, got {x.shape}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.norms):
                x = ad.relu(self.norms[i](x))
        if self.final_activation == "sigmoid":
            x = ad.sigmoid(x)
        return x


def mlp_forward(mlp: Mlp, x) -> Tensor:
    return mlp(x)


def knn_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``x`` to each row (self included).

    Ordered by ascending distance, ties towards the lower index.
    """
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k must lie in [1, {n - 1}], got {k}")
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    dpart = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, dpart), axis=-1)
    return np.take_along_axis(part, order, axis=1)


class EdgeConv(Module):
    """Edge convolution: shared map over ``[x_i ; x_j - x_i]``, max over neighbours.

    The dense map over the concatenated edge vector is evaluated as
    ``(W_self - W_nbr) x_i + W_nbr x_j`` so the projection runs per point
    rather than per edge.
    """

    def __init__(self, n_in: int, n_out: int, k: int, rng: np.random.Generator):
        self.k = k
        self.n_in = n_in
        self.dense = DenseLayer(2 * n_in, n_out, rng)
        self.norm = PointNorm(n_out)

    def __call__(self, x, neighbors: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        x = ad.as_tensor(x)
        n, d = x.shape
        if d != self.n_in:
            raise ShapeError(f"EdgeConv expects width {self.n_in}, got {d}")
        if self.k >= n:
            raise ParameterError(f"EdgeConv needs k < N (k={self.k}, N={n})")
        if neighbors is None:
            neighbors = knn_graph(x.data, self.k)
        w_self = ad.slice_last(self.dense.weight, 0, d)
        w_nbr = ad.slice_last(self.dense.weight, d, 2 * d)
        centre = ad.linear(x, w_self - w_nbr, self.dense.bias)
        nbr = ad.linear(x, w_nbr)
        rows = np.repeat(np.arange(n), self.k)
        pre = ad.gather_rows(centre, rows) + ad.gather_rows(nbr, neighbors.reshape(-1))
        h = ad.relu(self.norm(pre))
        out = ad.max_reduce(ad.reshape(h, (n, self.k, -1)), axis=1)
        return out, neighbors


def edge_conv(layer: EdgeConv, x, k: int | None = None) -> Tensor:
    if k is not None and k != layer.k:
        raise ParameterError(f"layer was built for k={layer.k}, got k={k}")
    return layer(x)[0]


# optimisation ---------------------------------------------------------------


class Adam:
    """Adam with classic L2-coupled weight decay (decay folded into the gradient)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """One update from ``grads`` (default: each parameter's ``.grad``)."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"adam/m/{k}": v for k, v in self.m.items()}
        state.update({f"adam/v/{k}": v for k, v in self.v.items()})
        state["adam/t"] = np.array([float(self.t)])
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"adam/m/{k}"])
            self.v[k] = np.array(state[f"adam/v/{k}"])
        self.t = int(state["adam/t"][0])


def adam_step(state: Adam, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
    """Functional wrapper: apply one Adam update and return the parameters."""
    state.params = dict(params)
    state.step(grads)
    return state.params


def lr_schedule(
    epoch: int,
    base_lr: float = 1e-4,
    total_epochs: int = 50,
    drop_fraction: float = 0.8,
    factor: float = 10.0,
) -> float:
    """Step schedule: ``base_lr`` until ``drop_fraction * total_epochs``, then ``/ factor``."""
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    drop_at = int(round(drop_fraction * total_epochs))
    return base_lr if epoch < drop_at else base_lr / factor


# checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCREG-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays and a JSON metadata block.

    Layout: ``PCREG-CKPT <version>\\n``, one line of JSON header (entry
    names, shapes, byte offsets, SHA-256 of the payload, metadata), then
    the concatenated little-endian float64 payload.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "entries": entries,
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = (
        CHECKPOINT_MAGIC
        + f" {CHECKPOINT_VERSION}\n".encode()
        + json.dumps(header, sort_keys=True).encode()
        + b"\n"
        + payload
    )
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    first, _, rest = blob.partition(b"\n")
    parts = first.split(b" ")
    if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a pcreg checkpoint")
    try:
        version = int(parts[1])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable version field") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head, _, payload = rest.partition(b"\n")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt or truncated)")
    tensors = {}
    for e in header["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, header.get("meta", {})
