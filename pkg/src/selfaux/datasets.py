"""Dataset generation and loading.

Synthetic two-task regression data is drawn from a counter-based generator
(Philox): example ``i`` of a split owns a fixed block of the stream, so any
range of examples can be regenerated on its own and train/test never share
random numbers. Image tasks are built by overlaying two IDX digits.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, IdxFormatError

LABEL_FORMS = ("sinusoidal", "linear")
TRAIN, TEST = 0, 1

# words of the Philox stream reserved per example: D uniforms, two for the
# Box-Muller pair, padding to a whole 4-word block
_BLOCK = 4


@dataclass(frozen=True)
class SyntheticSpec:
    input_dim: int = 200
    n_train: int = 100_000
    n_test: int = 10_000
    noise: float = 0.2
    label_form: str = "sinusoidal"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigurationError("sample counts must be non-negative")
        if not self.noise >= 0:
            raise ConfigurationError(f"noise must be >= 0, got {self.noise}")
        if self.label_form not in LABEL_FORMS:
            raise ConfigurationError(f"label_form must be one of {LABEL_FORMS}, got {self.label_form!r}")


@dataclass
class MultiTaskDataset:
    """Inputs (n, D) plus one label vector per task.

    ``task_kinds`` holds "regression" or "classification" per task;
    ``image_shape`` is set when the flattened inputs are images.
    """

    inputs: np.ndarray
    labels: Tuple[np.ndarray, ...]
    task_kinds: Tuple[str, ...]
    image_shape: Optional[Tuple[int, ...]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = tuple(np.asarray(y) for y in self.labels)
        self.task_kinds = tuple(self.task_kinds)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.labels) != len(self.task_kinds) or not self.labels:
            raise ValueError("need one task kind per label vector and at least one task")
        n = len(self.inputs)
        for t, y in enumerate(self.labels):
            if y.shape != (n,):
                raise ValueError(f"task {t} has labels of shape {y.shape}, expected ({n},)")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def n_tasks(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "MultiTaskDataset":
        idx = np.asarray(idx)
        return replace(self, inputs=self.inputs[idx], labels=tuple(y[idx] for y in self.labels))

    def targets(self):
        """Label vectors in the form the model losses expect."""
        return [y.reshape(-1, 1) if k == "regression" else y.astype(np.int64) for y, k in zip(self.labels, self.task_kinds)]


# ---------------------------------------------------------------------------
# synthetic regression


def frequency_sets() -> Tuple[np.ndarray, np.ndarray]:
    w1 = np.concatenate([np.arange(0, 30), np.arange(50, 80), np.arange(100, 130)])
    w2 = np.concatenate([np.arange(25, 50), np.arange(75, 100), np.arange(125, 150)])
    return w1, w2


def _split_key(seed: int, split: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(split,))
    return ss.generate_state(2, np.uint64)


def _words_per_example(input_dim: int) -> int:
    need = input_dim + 2
    return -(-need // _BLOCK) * _BLOCK


def _uniform_block(seed, split, start, stop, input_dim):
    """(stop - start, words) uniforms in [0, 1) for examples ``start..stop-1``."""
    words = _words_per_example(input_dim)
    bitgen = np.random.Philox(key=_split_key(seed, split), counter=start * (words // _BLOCK))
    raw = bitgen.random_raw((stop - start) * words).reshape(stop - start, words)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def synthetic_inputs(spec: SyntheticSpec, split: int, start: int = 0, stop: Optional[int] = None):
    """Raw per-example draws: coordinates in [-1/2, 1/2) and the two standard normal noises."""
    if stop is None:
        stop = spec.n_train if split == TRAIN else spec.n_test
    U = _uniform_block(spec.seed, split, start, stop, spec.input_dim)
    X = U[:, : spec.input_dim] - 0.5
    u1, u2 = U[:, spec.input_dim], U[:, spec.input_dim + 1]
    radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
    E = np.stack([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)], axis=1)
    return X, E


def synthetic_labels(X, E, noise: float = 0.2, label_form: str = "sinusoidal"):
    """Both task targets from inputs ``X`` (n, D) and noises ``E`` (n, 2).

    Each task sums one term per frequency in its set; the noise is drawn once
    per example, so it enters with weight ``|W_t| * noise``.
    """
    s = np.asarray(X).sum(axis=1)
    out = []
    for t, W in enumerate(frequency_sets()):
        if label_form == "sinusoidal":
            signal = np.sin(np.outer(s, W)).sum(axis=1)
        elif label_form == "linear":
            signal = W.sum() * s
        else:
            raise ConfigurationError(f"unknown label_form {label_form!r}")
        out.append(signal + len(W) * noise * E[:, t])
    return tuple(out)


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Tuple[MultiTaskDataset, MultiTaskDataset]:
    """Train and test splits of the two-task regression problem."""
    splits = []
    for split, n in ((TRAIN, spec.n_train), (TEST, spec.n_test)):
        X, E = synthetic_inputs(spec, split, 0, n)
        y = synthetic_labels(X, E, spec.noise, spec.label_form)
        meta = {"source": "synthetic", "split": split, **spec.__dict__}
        splits.append(MultiTaskDataset(X, y, ("regression", "regression"), meta=meta))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# IDX files

_IDX_IMAGES, _IDX_LABELS = 0x00000803, 0x00000801


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped).

    Image files (magic 0x803) come back as float64 in [0, 1] with shape
    (n, rows, cols); label files (0x801) as int64 of shape (n,).
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError("file too short for an IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (_IDX_IMAGES, _IDX_LABELS):
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated header: need {header} bytes, have {len(raw)}", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IdxFormatError(f"truncated payload: need {size} bytes after the header, have {len(raw) - header}", len(raw))
    if len(raw) > header + size:
        raise IdxFormatError(f"{len(raw) - header - size} unexpected trailing bytes", header + size)
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)
    if magic == _IDX_LABELS:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def write_idx(path, array) -> Path:
    """Write images (n, rows, cols) or labels (n,) as IDX; ``.gz`` paths are gzipped.

    Float images are taken to lie in [0, 1] and rounded to bytes.
    """
    a = np.asarray(array)
    if a.ndim == 1:
        magic = _IDX_LABELS
    elif a.ndim == 3:
        magic = _IDX_IMAGES
    else:
        raise ValueError(f"IDX images are (n, rows, cols) and labels (n,), got shape {a.shape}")
    if a.dtype.kind == "f":
        if a.ndim == 1:
            raise ValueError("labels must be integers")
        a = np.rint(np.clip(a, 0, 1) * 255)
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("IDX payload must fit in unsigned bytes")
    payload = struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.astype(np.uint8).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


# ---------------------------------------------------------------------------
# two-digit composites

CANVAS = 36
_PAD = 2
_STRIDE = 4


def composite_batch(A, B) -> np.ndarray:
    """Overlay batches of 28x28 images: A at the top-left, B shifted 4 px down and right."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.shape[-2:] != (28, 28):
        raise ValueError(f"expected matching (..., 28, 28) inputs, got {A.shape} and {B.shape}")
    out = np.zeros(A.shape[:-2] + (CANVAS, CANVAS))
    out[..., _PAD : _PAD + 28, _PAD : _PAD + 28] = A
    lo = _PAD + _STRIDE
    np.maximum(out[..., lo : lo + 28, lo : lo + 28], B, out=out[..., lo : lo + 28, lo : lo + 28])
    return out


def composite_multimnist(img_a, img_b, label_a=None, label_b=None):
    """One 36x36 composite and its (task 1, task 2) labels."""
    return composite_batch(img_a, img_b), (label_a, label_b)


def make_multitask_image_dataset(images, labels, n_pairs: int, seed: int = 0) -> MultiTaskDataset:
    """Composite ``n_pairs`` random ordered pairs of distinct source images into flattened 36x36 inputs."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("no source images")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(2,)))
    n = len(images)
    ia = rng.integers(n, size=n_pairs)
    if n > 1:
        ib = rng.integers(n - 1, size=n_pairs)
        ib += ib >= ia
    else:
        ib = ia.copy()
    X = composite_batch(images[ia], images[ib]).reshape(n_pairs, -1)
    meta = {"source": "composite", "n_pairs": n_pairs, "seed": seed}
    return MultiTaskDataset(
        X, (labels[ia], labels[ib]), ("classification", "classification"), (CANVAS, CANVAS, 1), meta
    )


# ---------------------------------------------------------------------------
# dataset files

_DATA_MAGIC = b"SAXDATA1"


def save_dataset(ds: MultiTaskDataset, path) -> Path:
    """Binary container: magic, u32 header length, JSON header, little-endian float64 arrays."""
    arrays = [("inputs", ds.inputs)] + [(f"labels_{t + 1}", y.astype(np.float64)) for t, y in enumerate(ds.labels)]
    header = {
        "task_kinds": list(ds.task_kinds),
        "image_shape": list(ds.image_shape) if ds.image_shape else None,
        "meta": ds.meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_DATA_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_dataset(path) -> MultiTaskDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, "<f8", count, offset).reshape(entry["shape"]).copy()
        offset += 8 * count
    kinds = tuple(header["task_kinds"])
    labels = tuple(
        arrays[f"labels_{t + 1}"].astype(np.int64) if k == "classification" else arrays[f"labels_{t + 1}"]
        for t, k in enumerate(kinds)
    )
    shape = tuple(header["image_shape"]) if header["image_shape"] else None
    return MultiTaskDataset(arrays["inputs"], labels, kinds, shape, header["meta"])


def write_synthetic_csv(ds: MultiTaskDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{d}" for d in range(ds.inputs.shape[1])] + [f"y_{t + 1}" for t in range(ds.n_tasks)])
        for x, *ys in zip(ds.inputs, *ds.labels):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y)) for y in ys])
    return path


# ---------------------------------------------------------------------------
# config-driven materialisation

IMAGE_SOURCES = ("multimnist", "multifashion")


@dataclass(frozen=True)
class DataConfig:
    """Where a trial's data comes from.

    ``kind="synthetic"`` uses ``synthetic``; the image kinds read four IDX
    files (train/test images and labels) and composite ``n_train``/``n_test``
    pairs from the respective source split.
    """

    kind: str = "synthetic"
    synthetic: SyntheticSpec = SyntheticSpec()
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic",) + IMAGE_SOURCES:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind in IMAGE_SOURCES:
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not getattr(self, k)]
            if missing:
                raise ConfigurationError(f"{self.kind} dataset needs paths for {', '.join(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown dataset keys: {sorted(unknown)}")
        if "synthetic" in d:
            syn = dict(d["synthetic"])
            bad = set(syn) - set(SyntheticSpec.__dataclass_fields__)
            if bad:
                raise ConfigurationError(f"unknown synthetic keys: {sorted(bad)}")
            d["synthetic"] = SyntheticSpec(**syn)
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["synthetic"] = dict(self.synthetic.__dict__)
        return out

    def materialize(self, base_dir=None) -> Tuple[MultiTaskDataset, MultiTaskDataset]:
        if self.kind == "synthetic":
            return gen_synthetic(self.synthetic)
        base = Path(base_dir) if base_dir else Path(".")
        load = lambda p: load_idx(base / p)  # noqa: E731
        train = make_multitask_image_dataset(load(self.train_images), load(self.train_labels), self.n_train, self.seed)
        test = make_multitask_image_dataset(load(self.test_images), load(self.test_labels), self.n_test, self.seed + 1)
        return train, test
