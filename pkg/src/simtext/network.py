"""Deeply supervised Siamese convolutional network.

The fixed pipeline is conv1 -> pool -> conv2 -> pool -> ip -> relu -> feat,
with two companion embedding heads branching off: a parameter-free global
average pool over the conv2 channels, and a learned affine head on the
rectifier output. Each head contributes a margin-based contrastive term to
the combined training loss; parameters are updated with adadelta, which has
no learning-rate hyperparameter.

Parameters live in a plain name -> array dict whose shapes are derivable
from the NetworkSpec alone (see `param_shapes`).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import tensor as T

Array = np.ndarray

HEAD_ORDER = ("conv2_head", "relu_head", "feat")


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read back safely."""


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyperparameters; all tensor shapes derive from these."""

    input_h: int = 28
    input_w: int = 56
    conv1_channels: int = 20
    conv1_kernel: int = 5
    conv2_channels: int = 50
    conv2_kernel: int = 5
    ip_width: int = 500
    relu_head_dim: int = 20
    feat_dim: int = 10
    margin: float = 1.0
    head_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        extents = (
            self.input_h, self.input_w, self.conv1_channels, self.conv1_kernel,
            self.conv2_channels, self.conv2_kernel, self.ip_width,
            self.relu_head_dim, self.feat_dim,
        )
        if any(int(e) <= 0 for e in extents):
            raise ValueError(f"all extents must be positive: {self}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if len(self.head_weights) != 3:
            raise ValueError("head_weights needs one weight per head")
        object.__setattr__(self, "head_weights", tuple(float(w) for w in self.head_weights))
        self._spatial()  # validates pool/conv arithmetic

    def _spatial(self) -> Tuple[int, int, int, int]:
        """(h, w) after pool1 and after pool2."""
        h1 = self.input_h - self.conv1_kernel + 1
        w1 = self.input_w - self.conv1_kernel + 1
        if h1 <= 0 or w1 <= 0 or h1 % 2 or w1 % 2:
            raise ValueError(f"conv1 output {h1}x{w1} must be positive and even")
        hp1, wp1 = h1 // 2, w1 // 2
        h2 = hp1 - self.conv2_kernel + 1
        w2 = wp1 - self.conv2_kernel + 1
        if h2 <= 0 or w2 <= 0 or h2 % 2 or w2 % 2:
            raise ValueError(f"conv2 output {h2}x{w2} must be positive and even")
        return hp1, wp1, h2 // 2, w2 // 2

    @property
    def flat_dim(self) -> int:
        _, _, hp2, wp2 = self._spatial()
        return self.conv2_channels * hp2 * wp2

    def head_dims(self) -> Dict[str, int]:
        return {
            "conv2_head": self.conv2_channels,
            "relu_head": self.relu_head_dim,
            "feat": self.feat_dim,
        }

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["head_weights"] = list(self.head_weights)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        d["head_weights"] = tuple(d["head_weights"])
        return cls(**d)


@dataclass
class MultiLevelEmbedding:
    """Per-head embedding vectors for one image."""

    conv2_head: Array
    relu_head: Array
    feat: Array

    def head(self, name: str) -> Array:
        return getattr(self, name)


def param_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Parameter tensor shapes, in fixed order."""
    flat = spec.flat_dim
    return {
        "conv1_w": (spec.conv1_channels, 1, spec.conv1_kernel, spec.conv1_kernel),
        "conv1_b": (spec.conv1_channels,),
        "conv2_w": (spec.conv2_channels, spec.conv1_channels,
                    spec.conv2_kernel, spec.conv2_kernel),
        "conv2_b": (spec.conv2_channels,),
        "ip_w": (spec.ip_width, flat),
        "ip_b": (spec.ip_width,),
        "relu_head_w": (spec.relu_head_dim, spec.ip_width),
        "relu_head_b": (spec.relu_head_dim,),
        "feat_w": (spec.feat_dim, spec.ip_width),
        "feat_b": (spec.feat_dim,),
    }


def _fan(name: str, shape: Tuple[int, ...]) -> Tuple[int, int]:
    if name.startswith("conv"):
        c_out, c_in, k, _ = shape
        return c_in * k * k, c_out * k * k
    m, n = shape
    return n, m


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Dict[str, Array]:
    """Glorot-uniform weights, zero biases."""
    params: Dict[str, Array] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fan(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def check_params(spec: NetworkSpec, params: Dict[str, Array]) -> None:
    expected = param_shapes(spec)
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ValueError(
                f"parameter {name} has shape {params[name].shape}, expected {shape}"
            )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward_batch(spec: NetworkSpec, params: Dict[str, Array],
                   images: Array) -> Tuple[dict, Dict[str, Array]]:
    """Run [B,1,H,W] images through the pipeline.

    Returns (cache for backward, head activations incl. the ip pre-rectifier).
    """
    if images.ndim != 4 or images.shape[1:] != (1, spec.input_h, spec.input_w):
        raise T.ShapeError(
            f"expected images [B,1,{spec.input_h},{spec.input_w}], got {images.shape}"
        )
    b = images.shape[0]
    conv1 = T.conv2d_batch(images, params["conv1_w"], params["conv1_b"])
    pool1 = T.maxpool2_batch(conv1)
    conv2 = T.conv2d_batch(pool1, params["conv2_w"], params["conv2_b"])
    pool2 = T.maxpool2_batch(conv2)
    conv2_head = pool2.mean(axis=(2, 3))
    flat = pool2.reshape(b, -1)
    ip = T.affine_batch(flat, params["ip_w"], params["ip_b"])
    rect = T.relu(ip)
    relu_head = T.affine_batch(rect, params["relu_head_w"], params["relu_head_b"])
    feat = T.affine_batch(rect, params["feat_w"], params["feat_b"])
    cache = {
        "images": images, "conv1": conv1, "pool1": pool1,
        "conv2": conv2, "pool2": pool2, "flat": flat, "ip": ip, "rect": rect,
    }
    heads = {"conv2_head": conv2_head, "relu_head": relu_head, "feat": feat, "ip": ip}
    return cache, heads


def _backward_batch(spec: NetworkSpec, params: Dict[str, Array], cache: dict,
                    d_heads: Dict[str, Array]) -> Dict[str, Array]:
    """Gradients of the parameters given upstream gradients on the heads."""
    grads: Dict[str, Array] = {}
    d_rect, grads["feat_w"], grads["feat_b"] = T.affine_batch_backward(
        cache["rect"], params["feat_w"], d_heads["feat"])
    d_rect2, grads["relu_head_w"], grads["relu_head_b"] = T.affine_batch_backward(
        cache["rect"], params["relu_head_w"], d_heads["relu_head"])
    d_rect = d_rect + d_rect2
    d_ip = T.relu_backward(cache["ip"], d_rect)
    d_flat, grads["ip_w"], grads["ip_b"] = T.affine_batch_backward(
        cache["flat"], params["ip_w"], d_ip)
    d_pool2 = d_flat.reshape(cache["pool2"].shape)
    # global average pool head: spread the head gradient uniformly over space
    _, _, hp2, wp2 = cache["pool2"].shape
    d_pool2 = d_pool2 + d_heads["conv2_head"][:, :, None, None] / float(hp2 * wp2)
    d_conv2 = T.maxpool2_batch_backward(cache["conv2"], d_pool2)
    d_pool1, grads["conv2_w"], grads["conv2_b"] = T.conv2d_batch_backward(
        cache["pool1"], params["conv2_w"], d_conv2)
    d_conv1 = T.maxpool2_batch_backward(cache["conv1"], d_pool1)
    _, grads["conv1_w"], grads["conv1_b"] = T.conv2d_batch_backward(
        cache["images"], params["conv1_w"], d_conv1)
    return grads


def forward_embed(spec: NetworkSpec, params: Dict[str, Array],
                  image: Array) -> MultiLevelEmbedding:
    """Embed one [1,H,W] image at all supervised heads."""
    if image.ndim != 3:
        raise T.ShapeError(f"expected a [1,H,W] image, got shape {image.shape}")
    _, heads = _forward_batch(spec, params, image[None])
    return MultiLevelEmbedding(
        conv2_head=heads["conv2_head"][0],
        relu_head=heads["relu_head"][0],
        feat=heads["feat"][0],
    )


def embed_batch(spec: NetworkSpec, params: Dict[str, Array], images: Array,
                batch_size: int = 256) -> Dict[str, Array]:
    """Head activations (incl. 'ip') for [N,1,H,W] images, in chunks."""
    outs: Dict[str, List[Array]] = {k: [] for k in (*HEAD_ORDER, "ip")}
    for start in range(0, images.shape[0], batch_size):
        _, heads = _forward_batch(spec, params, images[start:start + batch_size])
        for k in outs:
            outs[k].append(heads[k])
    return {k: np.concatenate(v, axis=0) for k, v in outs.items()}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def contrastive_loss(d: float, y: int, m: float) -> Tuple[float, float]:
    """Margin-based pair loss and its derivative w.r.t. the distance.

    y=0 pulls the pair together (loss D^2/2); y=1 pushes it beyond the
    margin (loss max(0, m-D)^2/2).
    """
    if d < 0:
        raise ValueError("distance must be non-negative")
    if y not in (0, 1):
        raise ValueError("pair label must be 0 (similar) or 1 (dissimilar)")
    hinge = max(0.0, m - d)
    loss = (1 - y) * 0.5 * d * d + 0.5 * y * hinge * hinge
    dloss_dd = (1 - y) * d - y * hinge
    return loss, dloss_dd


def _contrastive_vec(d: Array, y: Array, m: float) -> Tuple[Array, Array]:
    hinge = np.maximum(0.0, m - d)
    loss = (1 - y) * 0.5 * d * d + 0.5 * y * hinge * hinge
    dloss_dd = (1 - y) * d - y * hinge
    return loss, dloss_dd


def combined_loss(emb_a: MultiLevelEmbedding, emb_b: MultiLevelEmbedding,
                  y: int, spec: NetworkSpec) -> Tuple[float, List[float]]:
    """Weighted sum of the per-head contrastive losses.

    Returns (total, per-head values in conv2_head, relu_head, feat order);
    the per-head values already include their weights, so the total is their
    exact sum.
    """
    per_head = []
    for name, weight in zip(HEAD_ORDER, spec.head_weights):
        d = float(np.linalg.norm(emb_a.head(name) - emb_b.head(name)))
        loss, _ = contrastive_loss(d, y, spec.margin)
        per_head.append(weight * loss)
    return float(sum(per_head)), per_head


def _pair_head_grads(spec: NetworkSpec, heads_a: Dict[str, Array],
                     heads_b: Dict[str, Array], ys: Array
                     ) -> Tuple[Array, Dict[str, Array], Dict[str, Array]]:
    """Per-pair combined losses and loss gradients w.r.t. both embeddings.

    The distance gradient (a-b)/D is taken as 0 at D == 0 (subgradient
    choice; the similar-pair branch has true gradient 0 there anyway).
    """
    n = ys.shape[0]
    losses = np.zeros(n)
    d_a = {name: np.zeros_like(heads_a[name]) for name in HEAD_ORDER}
    d_b = {name: np.zeros_like(heads_b[name]) for name in HEAD_ORDER}
    for name, weight in zip(HEAD_ORDER, spec.head_weights):
        diff = heads_a[name] - heads_b[name]
        dist = np.sqrt((diff * diff).sum(axis=1))
        loss, dloss_dd = _contrastive_vec(dist, ys, spec.margin)
        losses += weight * loss
        safe = np.where(dist > 0.0, dist, 1.0)
        unit = diff / safe[:, None]
        unit[dist == 0.0] = 0.0
        d_a[name] = weight * dloss_dd[:, None] * unit
        d_b[name] = -d_a[name]
    return losses, d_a, d_b


# ---------------------------------------------------------------------------
# adadelta
# ---------------------------------------------------------------------------

@dataclass
class AdadeltaState:
    """Running accumulators E[g^2] and E[dx^2], one per parameter tensor."""

    sq_grad: Dict[str, Array]
    sq_delta: Dict[str, Array]
    rho: float = 0.95
    eps: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ValueError("rho must be in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def zeros(cls, params: Dict[str, Array], rho: float = 0.95,
              eps: float = 1e-6) -> "AdadeltaState":
        return cls(
            sq_grad={k: np.zeros_like(v) for k, v in params.items()},
            sq_delta={k: np.zeros_like(v) for k, v in params.items()},
            rho=rho, eps=eps,
        )


def adadelta_update(state: AdadeltaState, grads: Dict[str, Array]
                    ) -> Tuple[Dict[str, Array], AdadeltaState]:
    """One accumulator decay + parameter delta per tensor; no learning rate."""
    rho, eps = state.rho, state.eps
    deltas: Dict[str, Array] = {}
    sq_grad: Dict[str, Array] = {}
    sq_delta: Dict[str, Array] = {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        eg2 = rho * state.sq_grad[name] + (1 - rho) * g * g
        delta = -np.sqrt(state.sq_delta[name] + eps) / np.sqrt(eg2 + eps) * g
        edx2 = rho * state.sq_delta[name] + (1 - rho) * delta * delta
        deltas[name] = delta
        sq_grad[name] = eg2
        sq_delta[name] = edx2
    return deltas, AdadeltaState(sq_grad=sq_grad, sq_delta=sq_delta, rho=rho, eps=eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def pair_batch_grads(spec: NetworkSpec, params: Dict[str, Array],
                     images_a: Array, images_b: Array, ys: Array
                     ) -> Tuple[Array, Dict[str, Array]]:
    """Per-pair losses and parameter gradients of the mean combined loss.

    Both twin branches share weights, so a single backward pass over the
    stacked batch accumulates both branches' contributions in index order.
    """
    n = ys.shape[0]
    stacked = np.concatenate([images_a, images_b], axis=0)
    cache, heads = _forward_batch(spec, params, stacked)
    heads_a = {k: heads[k][:n] for k in HEAD_ORDER}
    heads_b = {k: heads[k][n:] for k in HEAD_ORDER}
    losses, d_a, d_b = _pair_head_grads(spec, heads_a, heads_b, ys)
    d_heads = {k: np.concatenate([d_a[k], d_b[k]], axis=0) / float(n)
               for k in HEAD_ORDER}
    grads = _backward_batch(spec, params, cache, d_heads)
    return losses, grads


def train_step(spec: NetworkSpec, params: Dict[str, Array], opt: AdadeltaState,
               minibatch: Sequence) -> Tuple[Dict[str, Array], AdadeltaState, float]:
    """One adadelta step on the mean combined loss of a pair minibatch.

    Returns fresh (params, optimizer state, mean loss); inputs are not
    mutated. Aborts without updating if any pair yields a non-finite loss.
    """
    if not minibatch:
        raise ValueError("minibatch must be non-empty")
    images_a = np.stack([p.a.pixels for p in minibatch])
    images_b = np.stack([p.b.pixels for p in minibatch])
    ys = np.array([p.y for p in minibatch], dtype=np.float64)
    losses, grads = pair_batch_grads(spec, params, images_a, images_b, ys)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        i = int(bad[0])
        pair = minibatch[i]
        raise TrainingError(
            f"non-finite loss for pair {i} ({pair.a.id!r}, {pair.b.id!r})"
        )
    deltas, opt2 = adadelta_update(opt, grads)
    params2 = {name: params[name] + deltas[name] for name in params}
    return params2, opt2, float(losses.mean())


def fit_pairs(spec: NetworkSpec, params: Dict[str, Array], opt: AdadeltaState,
              pool: Sequence, *, epochs: int, batch_size: int = 10,
              log=None) -> Tuple[Dict[str, Array], AdadeltaState, List[float]]:
    """Train over a fixed pool of pairs for a fixed epoch budget.

    The pool is consumed in consecutive minibatches in a fixed order each
    epoch, so a given (pool, epochs) is bitwise reproducible. Returns the
    per-epoch mean losses.
    """
    history: List[float] = []
    for epoch in range(epochs):
        losses = []
        for start in range(0, len(pool), batch_size):
            batch = pool[start:start + batch_size]
            params, opt, loss = train_step(spec, params, opt, batch)
            losses.append(loss)
        mean = float(np.mean(losses))
        history.append(mean)
        if log is not None:
            log(epoch, mean)
    return params, opt, history


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

MAGIC = b"DSSN"
VERSION = 1


def save_checkpoint(path, spec: NetworkSpec, params: Dict[str, Array]) -> None:
    """Little-endian binary checkpoint; round-trips bit-exactly."""
    check_params(spec, params)
    spec_blob = spec.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(spec_blob)))
        f.write(spec_blob)
        f.write(struct.pack("<I", len(params)))
        for name in param_shapes(spec):
            blob = name.encode("utf-8")
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Tuple[NetworkSpec, Dict[str, Array]]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError("bad magic bytes; not a network checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(f, 4, "spec length"))
        try:
            spec = NetworkSpec.from_json(_read_exact(f, spec_len, "spec").decode("utf-8"))
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"invalid spec record: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        params: Dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 8 * size, f"tensor {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    try:
        check_params(spec, params)
    except ValueError as e:
        raise CheckpointError(f"checkpoint inconsistent with its spec: {e}") from e
    return spec, params
