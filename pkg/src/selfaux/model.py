"""Shared-bottom multi-task networks with self-auxiliary towers.

Every task ``t`` owns a main tower reading the shared representation ``h``
and, optionally, a second smaller tower predicting the same label from the
same ``h``. The auxiliary tower only contributes a training loss; prediction
never evaluates it.

Parameter names encode the partition:

* ``shared.*``        shared layers
* ``task{t}.main.*``  main tower of task t
* ``task{t}.aux.*``   self-auxiliary tower of task t
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .tensor import Tensor, affine, avg_pool, extract_patches, mse_loss, relu, reshape, softmax_xent_loss

AUX_KINDS = ("none", "fc", "avgpool", "bottleneck", "mirror")
HEAD_KINDS = ("regression", "classification")


@dataclass(frozen=True)
class AuxTowerSpec:
    """Self-auxiliary tower shape.

    ``fc`` is one affine layer on ``h``; ``avgpool`` pools ``h`` by ``pool``
    first; ``bottleneck`` is affine -> ReLU -> affine through ``bottleneck``
    units (meant to be much smaller than both M and C); ``mirror`` copies the
    main tower's widths with its own parameters.
    """

    kind: str = "none"
    pool: Optional[int] = None
    bottleneck: Optional[int] = None
    temperature: float = 1.0

    def validate(self, shared_dim: int):
        if self.kind not in AUX_KINDS:
            raise ConfigurationError(f"unknown aux kind {self.kind!r}; expected one of {AUX_KINDS}")
        if not self.temperature > 0:
            raise ConfigurationError(f"aux temperature must be positive, got {self.temperature}")
        if self.kind == "avgpool":
            if self.pool is None or self.pool < 1 or shared_dim % self.pool:
                raise ConfigurationError(f"avgpool aux needs a pool size dividing M={shared_dim}, got {self.pool}")
        if self.kind == "bottleneck" and (self.bottleneck is None or self.bottleneck < 1):
            raise ConfigurationError(f"bottleneck aux needs bottleneck >= 1, got {self.bottleneck}")

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(kind=d)
        _check_keys(d, cls, "aux")
        return cls(**d)


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    dim: int

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, cls, "head")
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    """Convolution realised as patch extraction followed by a shared affine map."""

    channels: int
    kernel: int
    stride: int = 1

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, cls, "conv layer")
        return cls(**d)


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int
    shared_widths: Tuple[int, ...]
    tower_widths: Tuple[Tuple[int, ...], ...]
    heads: Tuple[HeadSpec, ...]
    aux: Tuple[AuxTowerSpec, ...] = ()
    input_shape: Optional[Tuple[int, int, int]] = None
    conv_layers: Tuple[ConvSpec, ...] = ()

    def __post_init__(self):
        # normalise list inputs so specs compare and hash by value
        object.__setattr__(self, "shared_widths", tuple(self.shared_widths))
        object.__setattr__(self, "tower_widths", tuple(tuple(w) for w in self.tower_widths))
        object.__setattr__(self, "heads", tuple(self.heads))
        aux = tuple(self.aux) if self.aux else tuple(AuxTowerSpec() for _ in self.heads)
        object.__setattr__(self, "aux", aux)
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def shared_dim(self) -> int:
        return self.shared_widths[-1]

    def validate(self):
        if self.n_tasks < 1:
            raise ConfigurationError("at least one task head is required")
        if not self.shared_widths:
            raise ConfigurationError("at least one shared dense layer is required")
        if len(self.tower_widths) != self.n_tasks or len(self.aux) != self.n_tasks:
            raise ConfigurationError(
                f"{self.n_tasks} heads but {len(self.tower_widths)} towers and {len(self.aux)} aux specs"
            )
        widths = [self.input_dim, *self.shared_widths, *(w for tw in self.tower_widths for w in tw)]
        if any(int(w) != w or w < 1 for w in widths):
            raise ConfigurationError(f"all widths must be positive integers, got {widths}")
        for head in self.heads:
            if head.kind not in HEAD_KINDS:
                raise ConfigurationError(f"unknown head kind {head.kind!r}")
            if head.dim < 1 or (head.kind == "classification" and head.dim < 2):
                raise ConfigurationError(f"invalid head dimension {head.dim} for {head.kind}")
        if self.conv_layers:
            if self.input_shape is None:
                raise ConfigurationError("conv layers need input_shape (H, W, C)")
            if int(np.prod(self.input_shape)) != self.input_dim:
                raise ConfigurationError(f"input_shape {self.input_shape} does not match input_dim {self.input_dim}")
            h, w, _ = self.input_shape
            for conv in self.conv_layers:
                if min(conv.channels, conv.kernel, conv.stride) < 1 or conv.kernel > min(h, w):
                    raise ConfigurationError(f"invalid conv layer {conv} for a {h}x{w} input")
                h, w = (h - conv.kernel) // conv.stride + 1, (w - conv.kernel) // conv.stride + 1
        for aux in self.aux:
            aux.validate(self.shared_dim)

    def with_aux(self, aux) -> "ArchitectureSpec":
        """Same network with ``aux`` (one spec, or one per task) as self-auxiliary towers."""
        if isinstance(aux, (AuxTowerSpec, str, dict)):
            aux = [aux] * self.n_tasks
        return replace(self, aux=tuple(a if isinstance(a, AuxTowerSpec) else AuxTowerSpec.from_dict(a) for a in aux))

    def select_tasks(self, tasks: Sequence[int]) -> "ArchitectureSpec":
        return replace(
            self,
            tower_widths=tuple(self.tower_widths[t] for t in tasks),
            heads=tuple(self.heads[t] for t in tasks),
            aux=tuple(self.aux[t] for t in tasks),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape) if self.input_shape else None
        d["shared_widths"] = list(self.shared_widths)
        d["tower_widths"] = [list(w) for w in self.tower_widths]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        _check_keys(d, cls, "architecture")
        d = dict(d)
        d["heads"] = [HeadSpec.from_dict(h) for h in d["heads"]]
        if d.get("aux"):
            d["aux"] = [AuxTowerSpec.from_dict(a) for a in d["aux"]]
        if d.get("conv_layers"):
            d["conv_layers"] = [ConvSpec.from_dict(c) for c in d["conv_layers"]]
        return cls(**d)


def _check_keys(d, cls, what):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {sorted(unknown)}")


def mlp_spec(
    input_dim: int,
    shared_widths: Sequence[int],
    tower_widths: Sequence[int],
    n_tasks: int = 2,
    head: str = "regression",
    head_dim: int = 1,
    aux="none",
) -> ArchitectureSpec:
    """Dense shared-bottom spec with identical towers and heads for every task."""
    spec = ArchitectureSpec(
        input_dim=input_dim,
        shared_widths=tuple(shared_widths),
        tower_widths=tuple(tuple(tower_widths) for _ in range(n_tasks)),
        heads=tuple(HeadSpec(head, head_dim) for _ in range(n_tasks)),
    )
    return spec.with_aux(aux)


def load_preset(name: str) -> ArchitectureSpec:
    """Architecture shipped under ``selfaux/configs/presets/<name>.json``."""
    try:
        text = resources.files("selfaux").joinpath("configs", "presets", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"unknown architecture preset {name!r}; available: {preset_names()}") from None
    return ArchitectureSpec.from_dict(json.loads(text))


def preset_names() -> List[str]:
    root = resources.files("selfaux").joinpath("configs", "presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


@dataclass(frozen=True)
class ParamPartition:
    """Disjoint split of parameter names into shared, per-task main and per-task aux sets."""

    shared: Tuple[str, ...]
    main: Tuple[Tuple[str, ...], ...]
    aux: Tuple[Tuple[str, ...], ...]

    def all(self) -> Tuple[str, ...]:
        return self.shared + sum(self.main, ()) + sum(self.aux, ())


@dataclass
class ForwardResult:
    shared: Tensor
    main: List[Tensor]
    aux: List[Optional[Tensor]]


@dataclass
class TaskLossVector:
    """Per-task (main loss, aux loss) for one batch; aux is ``None`` when a task has no aux tower."""

    main: List[Tensor]
    aux: List[Optional[Tensor]] = field(default_factory=list)

    def __len__(self):
        return len(self.main)

    def pairs(self):
        return list(zip(self.main, self.aux))

    def main_values(self) -> List[float]:
        return [float(m) for m in self.main]

    def aux_values(self) -> List[Optional[float]]:
        return [None if a is None else float(a) for a in self.aux]


def _layer_shapes(spec: ArchitectureSpec) -> Dict[str, tuple]:
    """Ordered parameter name -> shape map, with (fan_in, fan_out) implied by weights."""
    shapes = {}
    fan = spec.input_dim
    if spec.conv_layers:
        h, w, c = spec.input_shape
        for i, conv in enumerate(spec.conv_layers):
            shapes[f"shared.conv{i}.weight"] = (conv.kernel * conv.kernel * c, conv.channels)
            shapes[f"shared.conv{i}.bias"] = (conv.channels,)
            h, w, c = (h - conv.kernel) // conv.stride + 1, (w - conv.kernel) // conv.stride + 1, conv.channels
        fan = h * w * c
    for i, width in enumerate(spec.shared_widths):
        shapes[f"shared.dense{i}.weight"] = (fan, width)
        shapes[f"shared.dense{i}.bias"] = (width,)
        fan = width
    m = spec.shared_dim
    for t, (widths, head, aux) in enumerate(zip(spec.tower_widths, spec.heads, spec.aux)):
        _stack(shapes, f"task{t}.main", m, [*widths, head.dim])
        if aux.kind == "fc":
            _stack(shapes, f"task{t}.aux", m, [head.dim])
        elif aux.kind == "avgpool":
            _stack(shapes, f"task{t}.aux", m // aux.pool, [head.dim])
        elif aux.kind == "bottleneck":
            _stack(shapes, f"task{t}.aux", m, [aux.bottleneck, head.dim])
        elif aux.kind == "mirror":
            _stack(shapes, f"task{t}.aux", m, [*widths, head.dim])
    return shapes


def _stack(shapes, prefix, fan_in, widths):
    for i, width in enumerate(widths):
        shapes[f"{prefix}.layer{i}.weight"] = (fan_in, width)
        shapes[f"{prefix}.layer{i}.bias"] = (width,)
        fan_in = width


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-parameter streams: adding or removing aux towers leaves other initial values untouched
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def build_model(spec: ArchitectureSpec, seed: int = 0) -> "MultiTaskModel":
    """Glorot-uniform weights and zero biases, drawn from ``seed``."""
    params = {}
    for name, shape in _layer_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = _param_rng(seed, name).uniform(-limit, limit, size=shape)
    return MultiTaskModel(spec, params)


class MultiTaskModel:
    """Parameters plus the forward computation of a shared-bottom network.

    ``params`` maps names to float64 arrays. Methods taking a ``params``
    argument accept a name -> Tensor mapping (e.g. tape leaves) so gradients
    can be recorded; when omitted, the stored arrays are used as constants.
    """

    def __init__(self, spec: ArchitectureSpec, params: Dict[str, np.ndarray]):
        expected = _layer_shapes(spec)
        if set(params) != set(expected):
            raise ConfigurationError(
                f"parameters do not match spec: missing {sorted(set(expected) - set(params))}, "
                f"unexpected {sorted(set(params) - set(expected))}"
            )
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ShapeError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.spec = spec
        self.params = {k: np.array(params[k], dtype=np.float64) for k in expected}
        self.shared_evaluations = 0

    @property
    def partition(self) -> ParamPartition:
        names = list(self.params)
        return ParamPartition(
            shared=tuple(n for n in names if n.startswith("shared.")),
            main=tuple(tuple(n for n in names if n.startswith(f"task{t}.main.")) for t in range(self.spec.n_tasks)),
            aux=tuple(tuple(n for n in names if n.startswith(f"task{t}.aux.")) for t in range(self.spec.n_tasks)),
        )

    def count_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    def _resolve(self, params):
        if params is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return params

    def _check_input(self, X):
        X = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected inputs of shape (n, {self.spec.input_dim}), got {X.shape}")
        return X

    def shared(self, X, params=None) -> Tensor:
        """The shared representation h(x) of shape (n, M)."""
        p = self._resolve(params)
        z = self._check_input(X)
        self.shared_evaluations += 1
        n = z.shape[0]
        if self.spec.conv_layers:
            h, w, c = self.spec.input_shape
            for i, conv in enumerate(self.spec.conv_layers):
                cols = extract_patches(z, (h, w, c), conv.kernel, conv.stride)
                z = relu(affine(cols, p[f"shared.conv{i}.weight"], p[f"shared.conv{i}.bias"]))
                h, w, c = (h - conv.kernel) // conv.stride + 1, (w - conv.kernel) // conv.stride + 1, conv.channels
                z = reshape(z, (n, h * w * c))
        for i in range(len(self.spec.shared_widths)):
            z = relu(affine(z, p[f"shared.dense{i}.weight"], p[f"shared.dense{i}.bias"]))
        return z

    def tower(self, h, t: int, aux: bool = False, params=None) -> Tensor:
        """Output of task ``t``'s main tower, or its aux tower when ``aux`` is true."""
        p = self._resolve(params)
        if aux:
            spec = self.spec.aux[t]
            if spec.kind == "none":
                raise ConfigurationError(f"task {t} has no auxiliary tower")
            if spec.kind == "avgpool":
                h = avg_pool(h, spec.pool)
            prefix = f"task{t}.aux"
        else:
            prefix = f"task{t}.main"
        n_layers = sum(1 for k in p if k.startswith(prefix) and k.endswith(".weight"))
        z = h
        for i in range(n_layers):
            z = affine(z, p[f"{prefix}.layer{i}.weight"], p[f"{prefix}.layer{i}.bias"])
            if i < n_layers - 1:
                z = relu(z)
        return z

    def forward(self, X, params=None, with_aux: bool = True) -> ForwardResult:
        p = self._resolve(params)
        h = self.shared(X, p)
        main, aux = [], []
        for t in range(self.spec.n_tasks):
            main.append(self.tower(h, t, params=p))
            has_aux = with_aux and self.spec.aux[t].kind != "none"
            aux.append(self.tower(h, t, aux=True, params=p) if has_aux else None)
        return ForwardResult(h, main, aux)

    def head_loss(self, output, target, t: int, aux: bool = False) -> Tensor:
        head = self.spec.heads[t]
        if head.kind == "regression":
            target = np.asarray(target, dtype=np.float64)
            if target.ndim == 1:
                target = target.reshape(-1, 1)
            return mse_loss(output, target, "mean")
        tau = self.spec.aux[t].temperature if aux else 1.0
        labels = np.asarray(target)
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValueError(f"task {t}: classification labels must be integers")
            labels = labels.astype(np.int64)
        return softmax_xent_loss(output, labels, tau)

    def task_losses(self, X, targets, params=None, with_aux: bool = True) -> TaskLossVector:
        """Main and aux losses per task; ``targets`` has one array per task."""
        if targets is None or len(targets) != self.spec.n_tasks or any(y is None for y in targets):
            raise ValueError(f"labels are required for all {self.spec.n_tasks} tasks")
        out = self.forward(X, params, with_aux=with_aux)
        return self.losses_from_outputs(out, targets)

    def losses_from_outputs(self, out: ForwardResult, targets) -> TaskLossVector:
        main = [self.head_loss(o, y, t) for t, (o, y) in enumerate(zip(out.main, targets))]
        aux = [None if o is None else self.head_loss(o, y, t, aux=True) for t, (o, y) in enumerate(zip(out.aux, targets))]
        return TaskLossVector(main, aux)

    def predict(self, X) -> List[np.ndarray]:
        """Main-tower outputs per task; auxiliary towers are never evaluated."""
        p = {k: Tensor(v) for k, v in self.params.items() if ".aux." not in k}
        h = self.shared(X, p)
        return [self.tower(h, t, params=p).data for t in range(self.spec.n_tasks)]

    def strip_aux(self) -> "MultiTaskModel":
        spec = self.spec.with_aux("none")
        return MultiTaskModel(spec, {k: v for k, v in self.params.items() if ".aux." not in k})

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel(self.spec, self.params)


_CKPT_MAGIC = b"SAXCKPT1"


def save_checkpoint(model: MultiTaskModel, path) -> Path:
    """Write parameters to ``path`` and the architecture to ``path + '.json'``.

    Layout: magic, u32 tensor count, then per tensor u32 name length, UTF-8
    name, u32 ndim, u64 extents, little-endian float64 values.
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(model.params)))
        for name, value in model.params.items():
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(model.spec.to_dict(), indent=2))
    return path


def load_checkpoint(path) -> MultiTaskModel:
    path = Path(path)
    spec = ArchitectureSpec.from_dict(json.loads(Path(str(path) + ".json").read_text()))
    buf = path.read_bytes()
    if not buf.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return MultiTaskModel(spec, params)
