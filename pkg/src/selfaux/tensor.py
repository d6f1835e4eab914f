"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what shared-bottom MLPs need is provided: affine layers, ReLU, average
pooling, patch extraction for convolution-as-matmul, a few elementwise
helpers, MSE and temperature-scaled softmax cross-entropy.

Operations pick up the tape from their inputs. Tensors that are not on any
tape are constants, so the same model code runs both with and without
gradient recording::

    tape = Tape()
    w = tape.leaf(np.ones((3, 1)), "w")
    b = tape.leaf(np.zeros(1), "b")
    loss = mse_loss(affine(x, w, b), y)
    grads = backward(loss)          # {"w": ..., "b": ...}
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Optional

import numpy as np

from .exceptions import ConfigurationError, NonFiniteError, ShapeError


class Tensor:
    """Immutable n-dimensional float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Optional["Tape"] = None, index: Optional[int] = None, *, _owned=False):
        arr = data if _owned else np.array(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __float__(self):
        if self.data.size != 1:
            raise ShapeError(f"only scalar tensors convert to float, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {where})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("fn", "ctx", "parents", "name")

    def __init__(self, fn, ctx, parents, name=None):
        self.fn = fn
        self.ctx = ctx
        self.parents = parents
        self.name = name


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in execution order, so every node only reads earlier
    ones. A tape belongs to a single trial and is not shared across threads.
    """

    def __init__(self):
        self.nodes = []
        self.leaves: Dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node(None, None, (), name))
        self.leaves[name] = t
        return t

    def _record(self, fn, ctx, inputs, out: np.ndarray) -> Tensor:
        parents = tuple(x.index if isinstance(x, Tensor) and x.tape is self else None for x in inputs)
        t = Tensor(out, self, len(self.nodes), _owned=True)
        self.nodes.append(_Node(fn, ctx, parents))
        return t


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward(ctx, *arrays, **kwargs)`` returning an
    ndarray and ``backward(ctx, grad)`` returning one gradient (or ``None``)
    per positional input.
    """

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(x) for x in inputs)
        tape = None
        for x in inputs:
            if x.tape is not None:
                if tape is not None and x.tape is not tape:
                    raise ValueError("inputs are recorded on different tapes")
                tape = x.tape
        ctx = {}
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = cls.forward(ctx, *(x.data for x in inputs), **kwargs)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        if tape is None:
            return Tensor(out, _owned=True)
        return tape._record(cls, ctx, inputs, out)


class Affine(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ShapeError(
                f"affine: input {x.shape} incompatible with weight {w.shape} and bias {b.shape}"
            )
        ctx["x"], ctx["w"] = x, w
        return x @ w + b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx["w"].T, ctx["x"].T @ grad, grad.sum(axis=0)


_relu_log = threading.local()


class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx["mask"] = mask
        log = getattr(_relu_log, "masks", None)
        if log is not None:
            log.append(mask)
        return np.where(mask, x, 0.0)

    @staticmethod
    def backward(ctx, grad):
        # subgradient at exactly 0 is 0
        return (np.where(ctx["mask"], grad, 0.0),)


class AvgPool(Function):
    @staticmethod
    def forward(ctx, x, pool):
        if pool < 1 or x.shape[-1] % pool:
            raise ConfigurationError(f"pool size {pool} does not divide last dimension {x.shape[-1]}")
        ctx["pool"], ctx["shape"] = pool, x.shape
        return x.reshape(x.shape[:-1] + (x.shape[-1] // pool, pool)).mean(axis=-1)

    @staticmethod
    def backward(ctx, grad):
        p = ctx["pool"]
        return (np.repeat(grad / p, p, axis=-1).reshape(ctx["shape"]),)


class Patches(Function):
    """im2col: rows are k*k*C receptive fields of an (H, W, C) image batch."""

    @staticmethod
    def forward(ctx, x, image_shape, kernel, stride):
        h, w, c = image_shape
        if x.ndim != 2 or x.shape[1] != h * w * c:
            raise ShapeError(f"patches: input {x.shape} does not hold images of shape {image_shape}")
        if kernel > h or kernel > w:
            raise ConfigurationError(f"kernel {kernel} larger than image {h}x{w}")
        n = x.shape[0]
        oh, ow = (h - kernel) // stride + 1, (w - kernel) // stride + 1
        imgs = x.reshape(n, h, w, c)
        win = np.lib.stride_tricks.sliding_window_view(imgs, (kernel, kernel), axis=(1, 2))
        win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
        ctx.update(n=n, shape=(h, w, c), out=(oh, ow), k=kernel, s=stride)
        # (n, oh, ow, C, k, k) -> (n, oh, ow, k, k, C)
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kernel * kernel * c)

    @staticmethod
    def backward(ctx, grad):
        n, (h, w, c), (oh, ow), k, s = ctx["n"], ctx["shape"], ctx["out"], ctx["k"], ctx["s"]
        g = grad.reshape(n, oh, ow, k, k, c)
        out = np.zeros((n, h, w, c))
        for di in range(k):
            for dj in range(k):
                out[:, di : di + s * (oh - 1) + 1 : s, dj : dj + s * (ow - 1) + 1 : s, :] += g[:, :, :, di, dj, :]
        return (out.reshape(n, h * w * c),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Function):
    @staticmethod
    def forward(ctx, x, factor):
        ctx["factor"] = float(factor)
        return x * ctx["factor"]

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["factor"],)


class Exp(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.exp(x)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["out"],)


class Sum(Function):
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.sum())

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx["shape"], float(grad)),)


class Index(Function):
    @staticmethod
    def forward(ctx, x, i):
        ctx["shape"], ctx["i"] = x.shape, i
        return np.asarray(x[i])

    @staticmethod
    def backward(ctx, grad):
        g = np.zeros(ctx["shape"])
        g[ctx["i"]] = grad
        return (g,)


class MSELoss(Function):
    @staticmethod
    def forward(ctx, pred, target, reduction):
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        diff = pred - target
        ctx["diff"] = diff
        ctx["scale"] = 1.0 / diff.size if reduction == "mean" else 1.0
        return np.asarray((diff * diff).sum() * ctx["scale"])

    @staticmethod
    def backward(ctx, grad):
        g = 2.0 * ctx["scale"] * float(grad) * ctx["diff"]
        return g, -g


class SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels, temperature):
        if temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {temperature}")
        n, c = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"softmax_xent_loss: {labels.shape} labels for logits {logits.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        z = logits / temperature
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(n)
        ctx.update(z=z, logsum=logsum, labels=labels, tau=temperature)
        return np.asarray(np.mean(logsum - z[rows, labels]))

    @staticmethod
    def backward(ctx, grad):
        z, labels = ctx["z"], ctx["labels"]
        n = z.shape[0]
        p = np.exp(z - ctx["logsum"][:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (float(grad) / (n * ctx["tau"])),)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for a batch ``x`` of shape (batch, in)."""
    return Affine.apply(x, weight, bias)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def avg_pool(x, pool: int) -> Tensor:
    """Non-overlapping mean over consecutive groups of ``pool`` entries of the last axis."""
    return AvgPool.apply(x, pool=pool)


def extract_patches(x, image_shape, kernel: int, stride: int) -> Tensor:
    """Flattened (H, W, C) images to a (batch*oh*ow, kernel*kernel*C) patch matrix."""
    return Patches.apply(x, image_shape=tuple(image_shape), kernel=kernel, stride=stride)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(x, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def exp(x) -> Tensor:
    return Exp.apply(x)


def total(x) -> Tensor:
    return Sum.apply(x)


def index(x, i) -> Tensor:
    return Index.apply(x, i=i)


def mse_loss(pred, target, reduction: str = "mean") -> Tensor:
    """Squared error between ``pred`` and ``target``, averaged or summed over all entries."""
    return MSELoss.apply(pred, target, reduction=reduction)


def softmax_xent_loss(logits, labels, temperature: float = 1.0) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits / temperature)``.

    The row maximum is subtracted before exponentiating.
    """
    return SoftmaxCrossEntropy.apply(logits, labels=labels, temperature=temperature)


def backward(node: Tensor, seed=None) -> Dict[str, np.ndarray]:
    """Reverse-mode sweep from ``node``; returns the adjoint of every named leaf.

    ``node`` must be a scalar unless ``seed`` (the upstream gradient, same
    shape as ``node``) is given. Leaves the sweep never reaches get zeros.
    """
    tape = node.tape
    if tape is None:
        raise ValueError("node is not recorded on a tape")
    if seed is None:
        if node.size != 1:
            raise ShapeError(f"backward needs a scalar node or an explicit seed, got shape {node.shape}")
        seed = np.ones(node.shape)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != node.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match node shape {node.shape}")

    adj = [None] * len(tape.nodes)
    adj[node.index] = seed
    for i in range(node.index, -1, -1):
        g = adj[i]
        n = tape.nodes[i]
        if g is None or n.fn is None:
            continue
        for p, pg in zip(n.parents, n.fn.backward(n.ctx, g)):
            if p is None or pg is None:
                continue
            adj[p] = pg if adj[p] is None else adj[p] + pg

    return {
        name: np.zeros(leaf.shape) if adj[leaf.index] is None else adj[leaf.index]
        for name, leaf in tape.leaves.items()
    }


def _eval_with_masks(loss_fn, params):
    _relu_log.masks = []
    try:
        value = float(loss_fn(params))
        return value, _relu_log.masks
    finally:
        _relu_log.masks = None


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_errors(
    loss_fn: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skipped: Optional[Dict[str, int]] = None,
) -> Dict[str, float]:
    """Maximum relative error between analytic and central-difference gradients, per parameter.

    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator. An entry
    whose +-h perturbation flips any ReLU activation is excluded, since the
    difference quotient straddles a kink there; pass a dict as ``skipped``
    to receive the per-parameter count. With ``max_entries`` set, entries are
    visited in a random order until that many have been compared.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    analytic = backward(loss_fn(leaves))
    consts = {k: Tensor(v) for k, v in params.items()}
    _, base_masks = _eval_with_masks(loss_fn, consts)

    errors = {}
    for name, value in params.items():
        order = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            order = rng.permutation(value.size)
        worst, checked, n_skipped = 0.0, 0, 0
        for i in order:
            if max_entries is not None and checked >= max_entries:
                break
            shifted = value.copy()
            shifted.flat[i] = value.flat[i] + h
            up, up_masks = _eval_with_masks(loss_fn, {**consts, name: Tensor(shifted)})
            shifted.flat[i] = value.flat[i] - h
            down, down_masks = _eval_with_masks(loss_fn, {**consts, name: Tensor(shifted)})
            if not (_same_pattern(base_masks, up_masks) and _same_pattern(base_masks, down_masks)):
                n_skipped += 1
                continue
            numeric = (up - down) / (2 * h)
            a = analytic[name].flat[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            checked += 1
        errors[name] = worst
        if skipped is not None:
            skipped[name] = n_skipped
    return errors


def finite_diff_gradcheck(loss_fn, params, h: float = 1e-5, max_entries=None, rng=None) -> float:
    """Largest relative gradient error over all (or sampled) parameter entries."""
    errs = gradient_errors(loss_fn, params, h=h, max_entries=max_entries, rng=rng)
    return max(errs.values(), default=0.0)
