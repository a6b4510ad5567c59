"""MLP encoder, Prototypical Network head and MAML adaptation."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from metadro import autodiff as ad
from metadro.autodiff import Tape, Tensor
from metadro.dataset import FORMAT_VERSION, read_exact, read_header, read_str, write_str
from metadro.episodes import Episode

Params = Mapping[str, Tensor]
LossFn = Callable[[Params], Tensor]

CHECKPOINT_MAGIC = b"MSHP"


@dataclass(frozen=True)
class MlpEncoder:
    """Fully connected encoder; ReLU between layers, none after the last.

    ``widths`` runs from input dimension to output dimension. A single width
    gives the identity map.
    """

    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"invalid layer widths {self.widths}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            shapes[f"enc.{i}.weight"] = (a, b)
            shapes[f"enc.{i}.bias"] = (b,)
        return shapes

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Orthogonal weights (gain sqrt(2) before a ReLU), zero biases."""
        params = {}
        last = len(self.widths) - 2
        for name, shape in self.param_shapes().items():
            if name.endswith("weight"):
                gain = 1.0 if int(name.split(".")[1]) == last else np.sqrt(2.0)
                params[name] = gain * _orthogonal(rng, shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def __call__(self, params: Params, x) -> Tensor:
        h = ad.as_tensor(x)
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, params[f"enc.{i}.weight"]), params[f"enc.{i}.bias"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def class_average_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    """[n_way, len(labels)] matrix whose row n averages the items labelled n."""
    labels = np.asarray(labels)
    a = (labels[None, :] == np.arange(n_way)[:, None]).astype(np.float64)
    return a / a.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ProtoNetModel:
    encoder: MlpEncoder

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return self.encoder.param_shapes()

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return self.encoder.init(rng)

    def prototypes(self, params: Params, support_x, support_y, n_way: int) -> Tensor:
        """Row n is the mean encoded support vector of episode class n."""
        z = self.encoder(params, support_x)
        return ad.matmul(Tensor(class_average_matrix(support_y, n_way)), z)

    def logits(self, params: Params, prototypes: Tensor, query_x) -> Tensor:
        """Negative squared distance from each encoded query to each prototype."""
        q = ad.as_tensor(query_x)
        if q.ndim == 1:
            q = ad.reshape(q, (1, q.size))
        return ad.neg(ad.pairwise_sq_dists(self.encoder(params, q), prototypes))

    def query_logits(self, params: Params, episode: Episode) -> Tensor:
        protos = self.prototypes(params, episode.support_x, episode.support_y, episode.n_way)
        return self.logits(params, protos, episode.query_x)

    def query_losses(self, params: Params, episode: Episode) -> Tensor:
        return ad.cross_entropy(self.query_logits(params, episode), episode.query_y)

    def loss(self, params: Params, episode: Episode) -> Tensor:
        return ad.mean(self.query_losses(params, episode))


def inner_adapt(
    params: Params,
    support_loss: LossFn,
    lr: float,
    steps: int = 1,
    order: str = "second",
) -> dict[str, Tensor]:
    """Plain SGD on ``support_loss`` starting from ``params``.

    With ``order="second"`` the update is recorded so that later gradients
    flow through it. ``order="first"`` treats the inner gradients as
    constants (first-order MAML). The input parameters are never modified.
    """
    if steps < 1:
        raise ValueError("inner steps must be >= 1")
    if order not in ("first", "second"):
        raise ValueError(f"order must be 'first' or 'second', got {order!r}")
    names = list(params)
    current = dict(params)
    for _ in range(steps):
        loss = support_loss(current)
        grads = ad.grad(loss, [current[n] for n in names], create_graph=order == "second")
        current = {n: ad.sub(current[n], ad.scale(g, lr)) for n, g in zip(names, grads)}
    return current


def meta_gradient(
    params: Mapping[str, np.ndarray],
    tasks: Sequence[tuple[LossFn, LossFn]],
    lr: float,
    steps: int = 1,
    order: str = "second",
) -> dict[str, np.ndarray]:
    """Gradient of the summed post-adaptation query losses w.r.t. ``params``.

    Each task is a pair ``(support_loss, query_loss)`` of functions from a
    parameter mapping to a scalar tensor.
    """
    if not tasks:
        raise ValueError("meta batch is empty")
    tape = Tape()
    leaves = {n: tape.parameter(v, n) for n, v in params.items()}
    total = None
    for support_loss, query_loss in tasks:
        adapted = inner_adapt(leaves, support_loss, lr, steps, order)
        loss = query_loss(adapted)
        total = loss if total is None else ad.add(total, loss)
    grads = ad.grad(total, list(leaves.values()))
    return {n: g.numpy() for n, g in zip(leaves, grads)}


@dataclass(frozen=True)
class MamlModel:
    """Encoder plus a linear classifier head, all adapted in the inner loop.

    The head starts at zero so the initial model is symmetric in the episode
    labels, which are a random permutation per task.
    """

    encoder: MlpEncoder
    n_way: int
    inner_lr: float = 0.1
    inner_steps: int = 1
    order: str = "second"

    def __post_init__(self):
        if self.inner_lr < 0 or not np.isfinite(self.inner_lr):
            raise ValueError("inner_lr must be finite and >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = self.encoder.param_shapes()
        shapes["head.weight"] = (self.encoder.out_dim, self.n_way)
        shapes["head.bias"] = (self.n_way,)
        return shapes

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = self.encoder.init(rng)
        params["head.weight"] = np.zeros((self.encoder.out_dim, self.n_way))
        params["head.bias"] = np.zeros(self.n_way)
        return params

    def forward(self, params: Params, x) -> Tensor:
        z = self.encoder(params, x)
        return ad.add(ad.matmul(z, params["head.weight"]), params["head.bias"])

    def support_loss_fn(self, episode: Episode) -> LossFn:
        return lambda p: ad.softmax_cross_entropy(self.forward(p, episode.support_x), episode.support_y)

    def query_loss_fn(self, episode: Episode) -> LossFn:
        return lambda p: ad.softmax_cross_entropy(self.forward(p, episode.query_x), episode.query_y)

    def adapt(self, params: Params, episode: Episode, order: str | None = None) -> dict[str, Tensor]:
        return inner_adapt(
            params, self.support_loss_fn(episode), self.inner_lr, self.inner_steps, order or self.order
        )

    def query_logits(self, params: Params, episode: Episode, order: str | None = None) -> Tensor:
        return self.forward(self.adapt(params, episode, order), episode.query_x)

    def query_losses(self, params: Params, episode: Episode, order: str | None = None) -> Tensor:
        return ad.cross_entropy(self.query_logits(params, episode, order), episode.query_y)

    def meta_gradient(self, params: Mapping[str, np.ndarray], episodes: Sequence[Episode]) -> dict[str, np.ndarray]:
        tasks = [(self.support_loss_fn(ep), self.query_loss_fn(ep)) for ep in episodes]
        return meta_gradient(params, tasks, self.inner_lr, self.inner_steps, self.order)


# --------------------------------------------------------------- checkpoints


def params_to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + bytes([FORMAT_VERSION]))
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        arr = np.asarray(params[name], dtype="<f8")
        write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open("rb") as fh:
        read_header(fh, CHECKPOINT_MAGIC)
        (count,) = struct.unpack("<I", read_exact(fh, 4))
        params = {}
        for _ in range(count):
            name = read_str(fh)
            (ndim,) = struct.unpack("<I", read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", read_exact(fh, 4 * ndim))
            n = int(np.prod(shape))
            params[name] = np.frombuffer(read_exact(fh, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        return params
