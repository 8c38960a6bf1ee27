"""Model assembly and the training/evaluation machinery.

The classifier is: conv stem with ReLU, a second conv whose channels are
reshaped into primary capsules (type-major, so each type's grid positions
are contiguous), squash, per-pair prediction transforms, dynamic routing to
one capsule per class, and class scores as capsule lengths.  A three-layer
decoder reconstructs the input from the masked class capsules as a
regularizer.

Checkpoints are a single binary file: the magic string "GCAPS1", a
length-prefixed UTF-8 manifest of key=value lines, then each parameter as
(name length, name bytes, rank, dims, float64 values), all integers 64-bit
little-endian and values little-endian IEEE doubles.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .capsule import (
    RECON_WEIGHT,
    CapsLayerSpec,
    margin_loss,
    predict,
    reconstruction_loss,
    squash,
)
from .routing import RoutingConfig, route
from .seeds import SEED_ROLE_INIT, derived_rng
from .tensor import NonFiniteError, ShapeError, Tensor, conv2d, first_nonfinite, no_grad

CHECKPOINT_MAGIC = b"GCAPS1"
WEIGHT_INIT_STD = 0.1   # prediction-transform init; recorded in checkpoints


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the requested setup."""


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


@dataclass(frozen=True)
class ArchConfig:
    """Static geometry of the network; everything else is derived from it."""

    input_channels: int = 1
    input_height: int = 28
    input_width: int = 28
    stem_channels: int = 256
    stem_kernel: int = 9
    stem_stride: int = 1
    num_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    num_classes: int = 10
    digit_dim: int = 16
    decoder_hidden: tuple[int, int] = (512, 1024)

    def __post_init__(self):
        for name in ("input_channels", "input_height", "input_width",
                     "stem_channels", "stem_kernel", "stem_stride",
                     "num_types", "primary_dim", "primary_kernel",
                     "primary_stride", "num_classes", "digit_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"ArchConfig.{name} must be positive")
        if len(self.decoder_hidden) != 2:
            raise ValueError("decoder_hidden must name two layer widths")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ValueError(
                f"conv geometry collapses: input {self.input_height}x"
                f"{self.input_width} leaves a {self.grid_height}x"
                f"{self.grid_width} capsule grid")

    @property
    def stem_out_height(self) -> int:
        return _conv_out(self.input_height, self.stem_kernel, self.stem_stride)

    @property
    def stem_out_width(self) -> int:
        return _conv_out(self.input_width, self.stem_kernel, self.stem_stride)

    @property
    def grid_height(self) -> int:
        return _conv_out(self.stem_out_height, self.primary_kernel,
                         self.primary_stride)

    @property
    def grid_width(self) -> int:
        return _conv_out(self.stem_out_width, self.primary_kernel,
                         self.primary_stride)

    @property
    def caps_per_type(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def num_lower(self) -> int:
        return self.num_types * self.caps_per_type

    @property
    def pixels(self) -> int:
        return self.input_channels * self.input_height * self.input_width

    def layer_spec(self) -> CapsLayerSpec:
        return CapsLayerSpec(
            num_lower=self.num_lower, num_upper=self.num_classes,
            dim_lower=self.primary_dim, dim_upper=self.digit_dim,
            num_types=self.num_types, caps_per_type=self.caps_per_type)

    @classmethod
    def compact(cls) -> "ArchConfig":
        """A narrow variant for fast smoke runs; same structure throughout."""
        return cls(stem_channels=32, num_types=8, decoder_hidden=(128, 256))

    def to_manifest(self) -> dict[str, str]:
        return {
            "input_channels": str(self.input_channels),
            "input_height": str(self.input_height),
            "input_width": str(self.input_width),
            "stem_channels": str(self.stem_channels),
            "stem_kernel": str(self.stem_kernel),
            "stem_stride": str(self.stem_stride),
            "num_types": str(self.num_types),
            "primary_dim": str(self.primary_dim),
            "primary_kernel": str(self.primary_kernel),
            "primary_stride": str(self.primary_stride),
            "num_classes": str(self.num_classes),
            "digit_dim": str(self.digit_dim),
            "decoder_hidden": ",".join(str(h) for h in self.decoder_hidden),
        }

    @classmethod
    def from_manifest(cls, manifest: dict[str, str]) -> "ArchConfig":
        hidden = tuple(int(h) for h in manifest["decoder_hidden"].split(","))
        ints = {k: int(manifest[k]) for k in cls().to_manifest()
                if k != "decoder_hidden"}
        return cls(decoder_hidden=hidden, **ints)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; the schedule is lr0 * decay^epoch."""

    lr0: float = 0.001
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.decay <= 1:
            raise ValueError("lr0 must be positive and decay in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * self.decay ** epoch


@dataclass
class Model:
    arch: ArchConfig
    routing: RoutingConfig
    params: dict[str, Tensor] = field(repr=False)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.clear_grad()


def build_model(arch: ArchConfig, routing: RoutingConfig, seed: int) -> Model:
    """Deterministically initialized model for a (geometry, routing, seed)."""
    spec = arch.layer_spec()   # validates the grid math
    rng = derived_rng(seed, SEED_ROLE_INIT)

    def conv_init(c_out, c_in, k):
        # scaled for ReLU fan-in so stem activations start unit-ish
        std = np.sqrt(2.0 / (c_in * k * k))
        return Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), requires_grad=True)

    def dense_init(n_in, n_out, relu_gain=True):
        std = np.sqrt((2.0 if relu_gain else 1.0) / n_in)
        return Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True)

    primary_channels = arch.num_types * arch.primary_dim
    caps_in = arch.num_classes * arch.digit_dim
    h1, h2 = arch.decoder_hidden
    params = {
        "stem.kernel": conv_init(arch.stem_channels, arch.input_channels,
                                 arch.stem_kernel),
        "stem.bias": Tensor(np.zeros(arch.stem_channels), requires_grad=True),
        "primary.kernel": conv_init(primary_channels, arch.stem_channels,
                                    arch.primary_kernel),
        "primary.bias": Tensor(np.zeros(primary_channels), requires_grad=True),
        "routing.weights": Tensor(
            rng.normal(0.0, WEIGHT_INIT_STD,
                       (spec.num_lower, spec.num_upper, spec.dim_upper,
                        spec.dim_lower)), requires_grad=True),
        "decoder.w1": dense_init(caps_in, h1),
        "decoder.b1": Tensor(np.zeros(h1), requires_grad=True),
        "decoder.w2": dense_init(h1, h2),
        "decoder.b2": Tensor(np.zeros(h2), requires_grad=True),
        "decoder.w3": dense_init(h2, arch.pixels, relu_gain=False),
        "decoder.b3": Tensor(np.zeros(arch.pixels), requires_grad=True),
    }
    return Model(arch=arch, routing=routing, params=params)


def forward(model: Model, images):
    """Images to (lengths, digit_caps, per_type_caps-or-None).

    ``lengths`` [batch, num_classes] are the class scores; ``digit_caps``
    [batch, num_classes, digit_dim] the routed capsules; ``per_type_caps``
    [batch, num_types, num_classes, digit_dim] only in grouped routing.
    """
    lengths, v, per_type, _ = _forward(model, images, capture_trace=False)
    return lengths, v, per_type


def forward_traced(model: Model, images):
    """forward plus the RoutingTrace (heavier; for coupling analysis)."""
    return _forward(model, images, capture_trace=True)


def _forward(model: Model, images, capture_trace: bool):
    arch = model.arch
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1:] != (arch.input_channels, arch.input_height,
                                      arch.input_width):
        raise ShapeError(f"expected images [batch, {arch.input_channels},"
                         f" {arch.input_height}, {arch.input_width}],"
                         f" got {x.shape}")
    p = model.params
    stem = conv2d(x, p["stem.kernel"], stride=arch.stem_stride)
    stem = (stem + p["stem.bias"].reshape(1, arch.stem_channels, 1, 1)).relu()
    prim = conv2d(stem, p["primary.kernel"], stride=arch.primary_stride)
    prim = prim + p["primary.bias"].reshape(1, arch.num_types * arch.primary_dim,
                                            1, 1)
    batch = x.shape[0]
    # channels are type-major: capsule index = (type, row, col), so the
    # per-type index ranges used by grouped routing are contiguous
    grid = prim.reshape(batch, arch.num_types, arch.primary_dim,
                        arch.grid_height, arch.grid_width)
    u = grid.transpose(0, 1, 3, 4, 2).reshape(batch, arch.num_lower,
                                              arch.primary_dim)
    u = squash(u)
    u_hat = predict(u, p["routing.weights"])
    v, trace, per_type = route(u_hat, arch.layer_spec(), model.routing,
                               capture_trace=capture_trace)
    lengths = ((v * v).sum(axis=2) + 1e-18).sqrt()
    return lengths, v, per_type, trace


def decode(model: Model, digit_caps, labels) -> Tensor:
    """Reconstruct pixels from the capsules of the labeled class only.

    All other class capsules are zeroed before the decoder; the same decoder
    weights serve combined and per-type capsules.
    """
    caps = digit_caps if isinstance(digit_caps, Tensor) else Tensor(digit_caps)
    labels_t = labels if isinstance(labels, Tensor) else Tensor(labels)
    if caps.ndim != 3 or labels_t.shape != caps.shape[:2]:
        raise ShapeError(f"decode expects capsules [batch, classes, dim] and"
                         f" matching one-hot labels, got {caps.shape}"
                         f" and {labels_t.shape}")
    lab = labels_t.data
    if not (np.isin(lab, (0.0, 1.0)).all()
            and np.array_equal(lab.sum(axis=1), np.ones(lab.shape[0]))):
        raise ValueError("labels must be one-hot rows")
    p = model.params
    batch = caps.shape[0]
    masked = caps * labels_t.reshape(batch, caps.shape[1], 1)
    h = masked.reshape(batch, caps.shape[1] * caps.shape[2])
    h = ((h @ p["decoder.w1"]) + p["decoder.b1"]).relu()
    h = ((h @ p["decoder.w2"]) + p["decoder.b2"]).relu()
    return ((h @ p["decoder.w3"]) + p["decoder.b3"]).sigmoid()


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels < 0).any() or (labels >= num_classes).any():
        raise ValueError(f"labels must be 1-d in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class Adam:
    """Adam updates over a named parameter dict; ``lr`` may be reassigned
    between steps (the per-epoch schedule does)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params: dict[str, Tensor], cfg: TrainConfig) -> "Adam":
        return cls(params, lr=cfg.lr0, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.clear_grad()

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self._m[k], self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def batch_loss(model: Model, images, labels_1h):
    """Forward pass and total loss; returns (loss, lengths, named probes)."""
    lengths, digit_caps, _ = forward(model, images)
    margin = margin_loss(lengths, Tensor(labels_1h))
    decoded = decode(model, digit_caps, Tensor(labels_1h))
    flat = images.reshape(images.shape[0], -1) if isinstance(images, np.ndarray) \
        else images.data.reshape(images.shape[0], -1)
    recon = reconstruction_loss(decoded, Tensor(flat))
    total = margin + RECON_WEIGHT * recon
    probes = [("digit_caps", digit_caps), ("lengths", lengths),
              ("decoded", decoded), ("margin_loss", margin),
              ("reconstruction_loss", recon), ("total_loss", total)]
    return total, lengths, probes


def train_step(model: Model, optimizer: Adam, images: np.ndarray,
               labels: np.ndarray) -> tuple[float, float]:
    """One optimization step; returns (loss, accuracy) on the batch."""
    labels_1h = one_hot(labels, model.arch.num_classes)
    param_probes = [(f"parameter {k}", t) for k, t in model.params.items()]
    try:
        total, lengths, probes = batch_loss(model, images, labels_1h)
    except NonFiniteError as exc:
        culprit = first_nonfinite(param_probes) or "an intermediate activation"
        raise NonFiniteError(f"non-finite values in forward pass ({exc});"
                             f" first non-finite tensor: {culprit}") from None
    if not np.isfinite(total.data).all():
        culprit = first_nonfinite(param_probes + probes)
        raise NonFiniteError(f"non-finite loss; first non-finite tensor:"
                             f" {culprit}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    predicted = lengths.data.argmax(axis=1)
    return float(total.item()), float((predicted == labels).mean())


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 128):
    """Accuracy, mean total loss, and a (true, predicted) count matrix."""
    n = len(labels)
    if n == 0:
        raise ValueError("evaluate requires a nonempty dataset")
    num_classes = model.arch.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    loss_sum = 0.0
    correct = 0
    with no_grad():
        for start in range(0, n, batch_size):
            img = images[start:start + batch_size]
            lab = labels[start:start + batch_size]
            total, lengths, _ = batch_loss(model, img, one_hot(lab, num_classes))
            loss_sum += total.item() * len(lab)
            pred = lengths.data.argmax(axis=1)
            correct += int((pred == lab).sum())
            np.add.at(confusion, (lab, pred), 1)
    return correct / n, loss_sum / n, confusion


# -- checkpoint io -----------------------------------------------------------


def _routing_manifest(routing: RoutingConfig) -> dict[str, str]:
    return {
        "softmax_axis": routing.softmax_axis.value,
        "grouping": routing.grouping.value,
        "iterations": str(routing.iterations),
        "weight_init_std": repr(WEIGHT_INIT_STD),
    }


def save_checkpoint(path: str, model: Model,
                    extra: dict[str, str] | None = None) -> None:
    """Write the model atomically (temp file + rename)."""
    manifest = dict(model.arch.to_manifest())
    manifest.update(_routing_manifest(model.routing))
    for k, v in (extra or {}).items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"manifest entry {k!r} contains reserved characters")
        manifest[k] = str(v)
    body = "".join(f"{k}={v}\n" for k, v in sorted(manifest.items())).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<Q", len(body))
    blob += body
    for name, tensor in model.params.items():
        encoded = name.encode()
        blob += struct.pack("<Q", len(encoded))
        blob += encoded
        blob += struct.pack("<Q", tensor.ndim)
        blob += struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
        blob += np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def read_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint into (manifest, named arrays), validating framing."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    offset = len(CHECKPOINT_MAGIC)

    def take(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(raw):
            raise CheckpointError(
                f"truncated checkpoint {path}: needed {count} bytes for"
                f" {what} at offset {offset}")
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    def take_u64(what: str) -> int:
        return struct.unpack("<Q", take(8, what))[0]

    manifest_len = take_u64("manifest length")
    manifest: dict[str, str] = {}
    for line in take(manifest_len, "manifest").tobytes().decode().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed manifest line {line!r} in {path}")
        key, value = line.split("=", 1)
        manifest[key] = value
    params: dict[str, np.ndarray] = {}
    while offset < len(raw):
        name_len = take_u64("tensor name length")
        name = take(name_len, "tensor name").tobytes().decode()
        rank = take_u64(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name} in {path}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = take(8 * count, f"values of {name}")
        params[name] = np.frombuffer(values, dtype="<f8").reshape(dims).copy()
    return manifest, params


def load_model(path: str, arch: ArchConfig | None = None,
               routing: RoutingConfig | None = None) -> tuple[Model, dict[str, str]]:
    """Rebuild a model from a checkpoint; optional expectations are enforced.

    Passing ``arch``/``routing`` asserts the stored manifest matches them,
    failing with a CheckpointError naming each differing key.
    """
    manifest, arrays = read_checkpoint(path)
    try:
        stored_arch = ArchConfig.from_manifest(manifest)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint manifest in {path} lacks a valid"
                              f" architecture description: {exc}") from None
    from .capsule import AxisMode
    from .routing import Grouping
    try:
        stored_routing = RoutingConfig(
            softmax_axis=AxisMode(manifest["softmax_axis"]),
            grouping=Grouping(manifest["grouping"]),
            iterations=int(manifest["iterations"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint manifest in {path} lacks a valid"
                              f" routing description: {exc}") from None
    if arch is not None and arch != stored_arch:
        diffs = [k for k, v in arch.to_manifest().items()
                 if stored_arch.to_manifest()[k] != v]
        raise CheckpointError(f"manifest mismatch in {path}:"
                              f" differing keys {diffs}")
    if routing is not None and routing != stored_routing:
        raise CheckpointError(
            f"manifest mismatch in {path}: checkpoint routing is"
            f" {stored_routing.name}, requested {routing.name}")
    reference = build_model(stored_arch, stored_routing, seed=0)
    if set(arrays) != set(reference.params):
        raise CheckpointError(
            f"checkpoint {path} parameter names {sorted(arrays)} do not match"
            f" the architecture's {sorted(reference.params)}")
    for name, tensor in reference.params.items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(
                f"checkpoint {path}: {name} has shape {arrays[name].shape},"
                f" expected {tensor.shape}")
        tensor.data = arrays[name]
    return reference, manifest
