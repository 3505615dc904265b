"""A small numpy network stack whose weights may be held as ``W = A @ B``.

Linear and convolution weights are treated as matrices of shape
``(out, fan_in)``; convolutions go through im2col so that 4-D kernels use the
same code path. A factored weight keeps its two factors and one of them is
the training target; the other one is frozen and always gets a zero gradient.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateMatrixError, NotDecomposableError, NumericError, ShapeError

TRAIN_TARGETS = ("A", "B")


@dataclass
class Parameter:
    """A named weight, either full rank (``w``) or factored (``a``, ``b``).

    ``transposed`` records whether the 2-D view was transposed before the
    decomposition, so that ``a @ b`` equals the (possibly transposed) 2-D view.
    """

    name: str
    w: np.ndarray | None
    orig_shape: tuple[int, ...]
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    train_target: str | None = None
    transposed: bool = False
    decomposable: bool = True

    @classmethod
    def full(cls, name: str, w: np.ndarray, decomposable: bool | None = None) -> Parameter:
        if decomposable is None:
            decomposable = w.ndim >= 2
        return cls(name=name, w=w, orig_shape=tuple(w.shape), decomposable=decomposable)

    @property
    def factored(self) -> bool:
        return self.a is not None

    @property
    def rank(self) -> int | None:
        return self.a.shape[1] if self.factored else None

    def pieces(self) -> dict[str, np.ndarray]:
        if self.factored:
            return {f"{self.name}.A": self.a, f"{self.name}.B": self.b}
        return {self.name: self.w}

    def trainable_pieces(self) -> dict[str, np.ndarray]:
        if self.factored:
            key = f"{self.name}.{self.train_target}"
            return {key: self.pieces()[key]}
        return self.pieces()

    def set_piece(self, key: str, value: np.ndarray) -> None:
        if key == self.name and not self.factored:
            self.w = value
        elif key == f"{self.name}.A" and self.factored:
            self.a = value
        elif key == f"{self.name}.B" and self.factored:
            self.b = value
        else:
            raise KeyError(f"{key!r} is not a piece of parameter {self.name!r}")

    def numel(self) -> int:
        return sum(v.size for v in self.pieces().values())

    def full_numel(self) -> int:
        return math.prod(self.orig_shape)

    def matrix(self) -> np.ndarray:
        """The ``(out, fan_in)`` matrix this parameter represents."""
        if self.factored:
            w2d = self.a @ self.b
            return w2d.T if self.transposed else w2d
        return self.w.reshape(self.orig_shape[0], -1)


def flatten_to_2d(w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Collapse trailing dims into columns; transpose when wider than tall."""
    w = np.asarray(w)
    if w.ndim < 2:
        raise NotDecomposableError(f"cannot decompose a {w.ndim}-D tensor")
    m2d = w.reshape(w.shape[0], -1)
    if m2d.shape[1] > m2d.shape[0]:
        return np.ascontiguousarray(m2d.T), True
    return m2d, False


def unflatten(m2d: np.ndarray, orig_shape: tuple[int, ...], transposed: bool) -> np.ndarray:
    if transposed:
        m2d = m2d.T
    return np.ascontiguousarray(m2d).reshape(orig_shape)


def ab_decompose(p: Parameter, sigma_cutoff: float, train_target: str = "A") -> Parameter:
    """Factor a full-rank parameter as ``A = U sqrt(S)``, ``B = sqrt(S) Vt``.

    The rank is chosen by :func:`linalg.truncate_rank`. An all-zero weight has
    no usable spectrum; it is returned unchanged (still full rank) with a
    warning.
    """
    if p.factored:
        raise ValueError(f"parameter {p.name!r} is already factored")
    if not p.decomposable:
        raise NotDecomposableError(f"parameter {p.name!r} is not decomposable")
    if train_target not in TRAIN_TARGETS:
        raise ValueError(f"train_target must be 'A' or 'B', got {train_target!r}")
    m2d, transposed = flatten_to_2d(p.w)
    res = linalg.svd(m2d)
    try:
        k = linalg.truncate_rank(res.s, sigma_cutoff)
    except DegenerateMatrixError:
        warnings.warn(f"{p.name}: all-zero weight left at full rank", RuntimeWarning, stacklevel=2)
        return p
    root = np.sqrt(res.s[:k])
    a = np.ascontiguousarray(res.u[:, :k] * root)
    b = np.ascontiguousarray(root[:, None] * res.vt[:k, :])
    return Parameter(
        name=p.name,
        w=None,
        orig_shape=p.orig_shape,
        a=a,
        b=b,
        train_target=train_target,
        transposed=transposed,
        decomposable=True,
    )


def reconstruct(p: Parameter) -> Parameter:
    """Materialize a factored parameter back to its original full shape."""
    if not p.factored:
        raise ValueError(f"parameter {p.name!r} is not factored")
    w = unflatten(p.a @ p.b, p.orig_shape, p.transposed)
    return Parameter.full(p.name, w, decomposable=p.decomposable)


# -- layers ------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    """Stride-1 convolution with "same" zero padding (odd kernels only)."""

    in_channels: int
    out_channels: int
    kh: int = 3
    kw: int = 3
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Linear | Conv2d | ReLU | Flatten


@dataclass
class Model:
    layers: list
    params: dict[str, Parameter] = field(default_factory=dict)

    @property
    def dtype(self):
        for v in self.pieces().values():
            return v.dtype
        return linalg.DEFAULT_DTYPE

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def num_elements(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def full_num_elements(self) -> int:
        return sum(p.full_numel() for p in self.params.values())

    def pieces(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params.values():
            out.update(p.pieces())
        return out

    def trainable_pieces(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params.values():
            out.update(p.trainable_pieces())
        return out

    def piece_owner(self, key: str) -> Parameter:
        return self.params[key.rsplit(".", 1)[0] if key not in self.params else key]

    def set_piece(self, key: str, value: np.ndarray) -> None:
        self.piece_owner(key).set_piece(key, value)

    def state_bytes(self) -> bytes:
        """Raw bytes of every piece in order; used for byte-equality checks."""
        return b"".join(v.tobytes() for v in self.pieces().values())


def build_model(layers, seed: int, dtype=linalg.DEFAULT_DTYPE) -> Model:
    """Instantiate parameters: orthogonal weights, zero biases."""
    model = Model(layers=list(layers))
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            shape = (layer.out_features, layer.in_features)
        elif isinstance(layer, Conv2d):
            if layer.kh % 2 == 0 or layer.kw % 2 == 0:
                raise ShapeError("only odd kernel sizes support 'same' padding")
            shape = (layer.out_channels, layer.in_channels, layer.kh, layer.kw)
        else:
            continue
        fan_in = math.prod(shape[1:])
        w = linalg.orthogonal_init(shape[0], fan_in, seed=seed * 1009 + i, dtype=dtype)
        name = f"layers.{i}.weight"
        model.params[name] = Parameter.full(name, w.reshape(shape))
        if layer.bias:
            bname = f"layers.{i}.bias"
            model.params[bname] = Parameter.full(bname, np.zeros(shape[0], dtype=dtype), decomposable=False)
    return model


# -- forward / backward ------------------------------------------------------


def _apply_weight(p: Parameter, x: np.ndarray):
    """``y = x @ W2d.T`` using the factors directly when factored."""
    if not p.factored:
        w2d = p.w.reshape(p.orig_shape[0], -1)
        return x @ w2d.T, None
    if p.transposed:
        h = x @ p.a
        return h @ p.b, h
    h = x @ p.b.T
    return h @ p.a.T, h


def _weight_backward(p: Parameter, x: np.ndarray, h, dy: np.ndarray, need_dx: bool):
    grads = {}
    dx = None
    if not p.factored:
        w2d = p.w.reshape(p.orig_shape[0], -1)
        grads[p.name] = (dy.T @ x).reshape(p.orig_shape)
        if need_dx:
            dx = dy @ w2d
        return grads, dx
    key_a, key_b = f"{p.name}.A", f"{p.name}.B"
    train_a = p.train_target == "A"
    if p.transposed:
        # W2d.T = A @ B, y = (x @ A) @ B
        dh = dy @ p.b.T
        grads[key_a] = x.T @ dh if train_a else np.zeros_like(p.a)
        grads[key_b] = np.zeros_like(p.b) if train_a else h.T @ dy
        if need_dx:
            dx = dh @ p.a.T
    else:
        # W2d = A @ B, y = (x @ B.T) @ A.T
        dh = dy @ p.a
        grads[key_a] = dy.T @ h if train_a else np.zeros_like(p.a)
        grads[key_b] = np.zeros_like(p.b) if train_a else dh.T @ x
        if need_dx:
            dx = dh @ p.b
    return grads, dx


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, hgt, wid = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (n, c, h, w, kh, kw) -> (n, h, w, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * hgt * wid, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    n, c, hgt, wid = x_shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, hgt, wid, c, kh, kw)
    dxp = np.zeros((n, c, hgt + 2 * ph, wid + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + hgt, j : j + wid] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, ph : ph + hgt, pw : pw + wid]


def logits(model: Model, x: np.ndarray) -> np.ndarray:
    out, _ = _forward_layers(model, x)
    return out


def _forward_layers(model: Model, x: np.ndarray):
    x = np.asarray(x, dtype=model.dtype)
    records = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise ShapeError(f"layer {i}: expected (N, {layer.in_features}), got {x.shape}")
            p = model.params[f"layers.{i}.weight"]
            y, h = _apply_weight(p, x)
            if layer.bias:
                y = y + model.params[f"layers.{i}.bias"].w
            records.append((x, h))
            x = y
        elif isinstance(layer, Conv2d):
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise ShapeError(f"layer {i}: expected (N, {layer.in_channels}, H, W), got {x.shape}")
            n, _, hgt, wid = x.shape
            cols = _im2col(x, layer.kh, layer.kw)
            p = model.params[f"layers.{i}.weight"]
            y, h = _apply_weight(p, cols)
            if layer.bias:
                y = y + model.params[f"layers.{i}.bias"].w
            records.append((x.shape, cols, h))
            x = y.reshape(n, hgt, wid, layer.out_channels).transpose(0, 3, 1, 2)
        elif isinstance(layer, ReLU):
            mask = x > 0
            records.append(mask)
            x = x * mask
        elif isinstance(layer, Flatten):
            records.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return x, records


def softmax_cross_entropy(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = z.shape[0]
    idx = np.arange(n)
    loss = -float(logp[idx, labels].mean())
    dz = np.exp(logp)
    dz[idx, labels] -= 1.0
    return loss, dz / n


@dataclass
class ForwardCache:
    records: list
    dlogits: np.ndarray


def forward(model: Model, batch: np.ndarray, labels: np.ndarray) -> tuple[float, ForwardCache]:
    labels = np.asarray(labels)
    z, records = _forward_layers(model, batch)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {z.shape[0]}")
    loss, dz = softmax_cross_entropy(z, labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss, ForwardCache(records=records, dlogits=dz)


def backward(model: Model, cache: ForwardCache) -> dict[str, np.ndarray]:
    """Gradients for every piece; frozen factors get exact zeros."""
    grads: dict[str, np.ndarray] = {}
    d = cache.dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        rec = cache.records[i]
        need_dx = i > 0
        if isinstance(layer, Linear):
            x, h = rec
            p = model.params[f"layers.{i}.weight"]
            g, dx = _weight_backward(p, x, h, d, need_dx)
            grads.update(g)
            if layer.bias:
                grads[f"layers.{i}.bias"] = d.sum(axis=0)
            d = dx
        elif isinstance(layer, Conv2d):
            x_shape, cols, h = rec
            dy = d.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
            p = model.params[f"layers.{i}.weight"]
            g, dcols = _weight_backward(p, cols, h, dy, need_dx)
            grads.update(g)
            if layer.bias:
                grads[f"layers.{i}.bias"] = dy.sum(axis=0)
            d = _col2im(dcols, x_shape, layer.kh, layer.kw) if need_dx else None
        elif isinstance(layer, ReLU):
            d = d * rec
        elif isinstance(layer, Flatten):
            d = d.reshape(rec)
    return {key: grads[key] for key in model.pieces()}


def loss_and_grads(model: Model, batch: np.ndarray, labels: np.ndarray):
    loss, cache = forward(model, batch, labels)
    return loss, backward(model, cache)


def accuracy(model: Model, x: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits(model, x), axis=1)
    return float(np.mean(pred == np.asarray(labels)))
