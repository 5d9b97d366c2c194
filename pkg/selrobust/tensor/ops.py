"""Differentiable operations and the ``forward_op`` registry.

Every op takes and returns :class:`~selrobust.tensor.tensor.Tensor` values;
non-tensor arguments are wrapped as constants. Shapes follow the NCHW
convention for images and ``[N, features]`` for dense activations.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from selrobust.errors import ShapeError
from selrobust.tensor.tensor import ArrayLike, Function, Tensor, as_tensor

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_shape(x, y, "add")
        self.saved["shapes"] = (x.shape, y.shape)
        return x + y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sx, sy = self.saved["shapes"]
        return self.unbroadcast(grad, sx), self.unbroadcast(grad, sy)


class Sub(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_shape(x, y, "sub")
        self.saved["shapes"] = (x.shape, y.shape)
        return x - y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sx, sy = self.saved["shapes"]
        return self.unbroadcast(grad, sx), self.unbroadcast(-grad, sy)


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_shape(x, y, "mul")
        self.saved["x"], self.saved["y"] = x, y
        return x * y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = self.saved["x"], self.saved["y"]
        return self.unbroadcast(grad * y, x.shape), self.unbroadcast(grad * x, y.shape)


class Div(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_shape(x, y, "div")
        self.saved["x"], self.saved["y"] = x, y
        with np.errstate(divide="ignore", invalid="ignore"):
            return x / y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = self.saved["x"], self.saved["y"]
        gx = grad / y
        gy = -grad * x / (y * y)
        return self.unbroadcast(gx, x.shape), self.unbroadcast(gy, y.shape)


class ScalarMul(Function):
    def forward(self, x: np.ndarray, scale: float = 1.0) -> np.ndarray:
        self.saved["scale"] = float(scale)
        return x * self.saved["scale"]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["scale"],)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self.saved["mask"] = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        # subgradient at exactly 0 is 0
        return (np.where(self.saved["mask"], grad, 0.0),)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")
        self.saved["x"], self.saved["w"] = x, w
        return x @ w

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, w = self.saved["x"], self.saved["w"]
        return grad @ w.T, x.T @ grad


def _conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation of ``x [N,C,H,W]`` with ``w [F,C,kh,kw]`` (im2col via strided views)."""

    def forward(self, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
        kh, kw = w.shape[2], w.shape[3]
        ho = _conv_output_extent(x.shape[2], kh, stride, padding)
        wo = _conv_output_extent(x.shape[3], kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d: kernel {kh}x{kw} does not fit input {x.shape[2]}x{x.shape[3]} "
                f"with padding {padding}"
            )
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        windows = windows[:, :, :ho, :wo]
        self.saved.update(
            windows=windows, w=w, stride=stride, padding=padding,
            padded_shape=padded.shape, out_hw=(ho, wo),
        )
        return np.einsum("nchwij,fcij->nfhw", windows, w, optimize=True)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        windows, w = self.saved["windows"], self.saved["w"]
        stride, padding = self.saved["stride"], self.saved["padding"]
        ho, wo = self.saved["out_hw"]
        grad_w = np.einsum("nfhw,nchwij->fcij", grad, windows, optimize=True)
        grad_padded = np.zeros(self.saved["padded_shape"])
        kh, kw = w.shape[2], w.shape[3]
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nfhw,fc->nchw", grad, w[:, :, i, j], optimize=True,
                )
        h_end = grad_padded.shape[2] - padding
        w_end = grad_padded.shape[3] - padding
        grad_x = grad_padded[:, :, padding:h_end, padding:w_end]
        return grad_x, grad_w


# ---------------------------------------------------------------------------
# Normalization and pooling
# ---------------------------------------------------------------------------


class BatchNorm(Function):
    """Per-channel batch normalization over ``[N,C]`` or ``[N,C,H,W]`` input.

    ``running_mean``/``running_var`` are updated in place in training mode:
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = True,
        momentum: float = BN_MOMENTUM,
        eps: float = BN_EPSILON,
    ) -> np.ndarray:
        if x.ndim not in (2, 4):
            raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
        channels = x.shape[1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise ShapeError(
                f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {channels} channels"
            )
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running_mean is not None:
                running_mean *= momentum
                running_mean += (1.0 - momentum) * mean
            if running_var is not None:
                running_var *= momentum
                running_var += (1.0 - momentum) * var
        else:
            if running_mean is None or running_var is None:
                raise ShapeError("batchnorm in evaluation mode needs running statistics")
            mean, var = running_mean, running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        self.saved.update(
            x_hat=x_hat, inv_std=inv_std, gamma=gamma, axes=axes, view=view, training=training,
        )
        return gamma.reshape(view) * x_hat + beta.reshape(view)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x_hat, inv_std, gamma = self.saved["x_hat"], self.saved["inv_std"], self.saved["gamma"]
        axes, view = self.saved["axes"], self.saved["view"]
        grad_gamma = (grad * x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_xhat = grad * gamma.reshape(view)
        if not self.saved["training"]:
            return grad_xhat * inv_std.reshape(view), grad_gamma, grad_beta
        count = grad.size // grad.shape[1]
        sum_g = grad_xhat.sum(axis=axes).reshape(view)
        sum_gx = (grad_xhat * x_hat).sum(axis=axes).reshape(view)
        grad_x = inv_std.reshape(view) / count * (count * grad_xhat - sum_g - x_hat * sum_gx)
        return grad_x, grad_gamma, grad_beta


def _pool_windows(x: np.ndarray, size: int) -> Tuple[np.ndarray, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects 4-D input, got {x.shape}")
    if size < 1:
        raise ShapeError(f"pool size must be >= 1, got {size}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool size {size} does not fit spatial extent {h}x{w}")
    cropped = x[:, :, :ho * size, :wo * size]
    blocks = cropped.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, ho, wo, size * size), ho, wo


class AvgPool2d(Function):
    def forward(self, x: np.ndarray, size: int = 2) -> np.ndarray:
        blocks, ho, wo = _pool_windows(x, size)
        self.saved.update(shape=x.shape, size=size, out_hw=(ho, wo))
        return blocks.mean(axis=-1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        size = self.saved["size"]
        ho, wo = self.saved["out_hw"]
        grad_x = np.zeros(self.saved["shape"])
        spread = np.repeat(np.repeat(grad, size, axis=2), size, axis=3) / (size * size)
        grad_x[:, :, :ho * size, :wo * size] = spread
        return (grad_x,)


class MaxPool2d(Function):
    def forward(self, x: np.ndarray, size: int = 2) -> np.ndarray:
        blocks, ho, wo = _pool_windows(x, size)
        # argmax returns the first maximizer: ties go to the lowest flat index
        winner = blocks.argmax(axis=-1)
        self.saved.update(shape=x.shape, size=size, out_hw=(ho, wo), winner=winner)
        return np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        size, winner = self.saved["size"], self.saved["winner"]
        n, c, h, w = self.saved["shape"]
        ho, wo = self.saved["out_hw"]
        routed = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        grad_x = np.zeros((n, c, h, w))
        grad_x[:, :, :ho * size, :wo * size] = routed.reshape(n, c, ho * size, wo * size)
        return (grad_x,)


class SpatialMean(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"spatial_mean expects [N,C,H,W], got {x.shape}")
        self.saved["shape"] = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        n, c, h, w = self.saved["shape"]
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)


# ---------------------------------------------------------------------------
# Shape and reductions
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Sequence[int] = ()) -> np.ndarray:
        self.saved["shape"] = x.shape
        try:
            return x.reshape(tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.saved["shape"]),)


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
        self.saved.update(shape=x.shape, axis=axis)
        return x.sum(axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape, axis = self.saved["shape"], self.saved["axis"]
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, x: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
        count = x.size if axis is None else x.shape[axis]
        if count == 0:
            raise ShapeError("mean over an empty axis")
        self.saved.update(shape=x.shape, axis=axis, count=count)
        return x.mean(axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape, axis, count = self.saved["shape"], self.saved["axis"], self.saved["count"]
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class Max(Function):
    """Max along one axis; the subgradient goes to the lowest-index maximizer."""

    def forward(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        if x.shape[axis] == 0:
            raise ShapeError("max over an empty axis")
        winner = x.argmax(axis=axis)
        self.saved.update(shape=x.shape, axis=axis, winner=winner)
        return np.take_along_axis(x, np.expand_dims(winner, axis), axis=axis).squeeze(axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape, axis, winner = self.saved["shape"], self.saved["axis"], self.saved["winner"]
        grad_x = np.zeros(shape)
        np.put_along_axis(grad_x, np.expand_dims(winner, axis), np.expand_dims(grad, axis), axis=axis)
        return (grad_x,)


class SoftmaxCrossEntropy(Function):
    """Cross-entropy of integer ``labels`` under softmax(``logits``), via a stable logsumexp."""

    def forward(self, logits: np.ndarray, labels: Any = None, reduction: str = "mean") -> np.ndarray:
        if logits.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy expects [N,C] logits, got {logits.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (logits.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ShapeError(f"labels must lie in [0, {logits.shape[1]})")
        if reduction not in ("mean", "sum", "none"):
            raise ValueError(f"Unknown reduction: {reduction!r}")
        shift = logits.max(axis=1, keepdims=True)
        exp = np.exp(logits - shift)
        total = exp.sum(axis=1, keepdims=True)
        log_z = shift[:, 0] + np.log(total[:, 0])
        losses = log_z - logits[np.arange(logits.shape[0]), labels]
        self.saved.update(probs=exp / total, labels=labels, reduction=reduction)
        if reduction == "none":
            return losses
        if reduction == "sum":
            return losses.sum()
        return losses.mean()

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        probs, labels, reduction = self.saved["probs"], self.saved["labels"], self.saved["reduction"]
        delta = probs.copy()
        delta[np.arange(delta.shape[0]), labels] -= 1.0
        if reduction == "none":
            return (delta * grad[:, None],)
        if reduction == "mean":
            return (delta * (grad / delta.shape[0]),)
        return (delta * grad,)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def add(x: ArrayLike, y: ArrayLike) -> Tensor:
    return Add.apply(x, y)


def sub(x: ArrayLike, y: ArrayLike) -> Tensor:
    return Sub.apply(x, y)


def mul(x: ArrayLike, y: ArrayLike) -> Tensor:
    return Mul.apply(x, y)


def div(x: ArrayLike, y: ArrayLike) -> Tensor:
    return Div.apply(x, y)


def scalar_mul(x: ArrayLike, scale: float) -> Tensor:
    return ScalarMul.apply(x, scale=scale)


def relu(x: ArrayLike) -> Tensor:
    return Relu.apply(x)


def matmul(x: ArrayLike, w: ArrayLike) -> Tensor:
    return MatMul.apply(x, w)


def linear(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(
    x: ArrayLike,
    w: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if bias is None:
        return out
    b = as_tensor(bias)
    if b.shape != (out.shape[1],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {out.shape[1]} filters")
    return add(out, reshape(b, (1, out.shape[1], 1, 1)))


def batchnorm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    return BatchNorm.apply(
        x, gamma, beta,
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps,
    )


def avgpool2d(x: ArrayLike, size: int = 2) -> Tensor:
    return AvgPool2d.apply(x, size=size)


def maxpool2d(x: ArrayLike, size: int = 2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


def spatial_mean(x: ArrayLike) -> Tensor:
    return SpatialMean.apply(x)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def reduce_sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(x, axis=axis)


def reduce_mean(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return Mean.apply(x, axis=axis)


def reduce_max(x: ArrayLike, axis: int = 0) -> Tensor:
    return Max.apply(x, axis=axis)


def softmax_cross_entropy(logits: ArrayLike, labels: Any, reduction: str = "mean") -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels, reduction=reduction)


OP_REGISTRY: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "batchnorm": batchnorm,
    "avgpool2d": avgpool2d,
    "maxpool2d": maxpool2d,
    "spatial_mean": spatial_mean,
    "reshape": reshape,
    "scalar_mul": scalar_mul,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "max": reduce_max,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(kind: str, *inputs: Any, **params: Any) -> Tensor:
    """Dispatch ``kind`` to its op, recording it for backward when needed."""
    try:
        op = OP_REGISTRY[kind]
    except KeyError:
        raise ValueError(
            f"Unknown op kind {kind!r}. Hint: choose one of {', '.join(sorted(OP_REGISTRY))}."
        ) from None
    logger.debug("forward_op %s", kind)
    return op(*inputs, **params)
