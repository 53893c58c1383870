"""Network specification, training, inference, and checkpoints.

Architectures are declarative: a list of conv / relu layers ending in
exactly one global-average-pool followed by exactly one dense layer, so
every network exposes a final activation map A (pre-GAP) and a class
weight vector w_c — the two ingredients of class activation maps and of
the logit gradient used for saliency.

Training is plain SGD with momentum on softmax cross-entropy, float32
throughout, with optional per-sample perturbation augmentation
(Gaussian noise or Bernoulli pixel masking). All randomness flows from
one run seed through independent derived streams (init / shuffle /
noise / flip), so e.g. disabling noise does not shift the shuffle
order and sigma=0 reproduces unperturbed training bit-for-bit.

Checkpoints are a small binary container (magic ``ASLC``): a JSON
header describing the architecture plus raw little-endian float32
parameter blobs in declaration order.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .rng import derive_generator

CHECKPOINT_MAGIC = b"ASLC"
CHECKPOINT_VERSION = 1

# Derived-stream indices off the run seed.
_S_INIT = 1
_S_SHUFFLE = 2
_S_NOISE = 3
_S_FLIP = 4


# ------------------------------------------------------------ layer specs


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    pad: int

    kind = "conv"


@dataclass(frozen=True)
class ReluSpec:
    kind = "relu"


@dataclass(frozen=True)
class GapSpec:
    kind = "gap"


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int

    kind = "dense"


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (C, H, W), the layer list, and the class count."""

    input_shape: tuple[int, int, int]
    layers: tuple
    num_classes: int

    def validate(self) -> None:
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.num_classes}")
        kinds = [l.kind for l in self.layers]
        if kinds.count("gap") != 1 or kinds.count("dense") != 1:
            raise ConfigError("network must contain exactly one gap and one dense layer")
        if kinds[-2:] != ["gap", "dense"]:
            raise ConfigError("network must end with gap followed by dense")
        for i, layer in enumerate(self.layers[:-2]):
            if layer.kind not in ("conv", "relu"):
                raise ConfigError(f"layer {i}: only conv/relu allowed before gap, got {layer.kind}")
            if layer.kind == "conv":
                if layer.in_channels != c:
                    raise ConfigError(
                        f"layer {i}: conv expects {layer.in_channels} channels, gets {c}"
                    )
                if layer.kernel_size < 1 or layer.pad < 0:
                    raise ConfigError(f"layer {i}: bad kernel/pad {layer.kernel_size}/{layer.pad}")
                h2, w2 = T.conv_output_hw(h, w, layer.kernel_size, layer.kernel_size, layer.pad)
                if h2 < 1 or w2 < 1:
                    raise ConfigError(
                        f"layer {i}: conv {layer.kernel_size}x{layer.kernel_size} pad {layer.pad} "
                        f"collapses {h}x{w} to {h2}x{w2}"
                    )
                c, h, w = layer.out_channels, h2, w2
        dense = self.layers[-1]
        if dense.in_features != c:
            raise ConfigError(f"dense expects {dense.in_features} features, gap produces {c}")
        if dense.out_features != self.num_classes:
            raise ConfigError(
                f"dense outputs {dense.out_features}, num_classes is {self.num_classes}"
            )

    @property
    def activation_channels(self) -> int:
        return self.layers[-1].in_features

    def activation_hw(self) -> tuple[int, int]:
        _, h, w = self.input_shape
        for layer in self.layers[:-2]:
            if layer.kind == "conv":
                h, w = T.conv_output_hw(h, w, layer.kernel_size, layer.kernel_size, layer.pad)
        return h, w

    def to_dict(self) -> dict:
        out = {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [],
        }
        for layer in self.layers:
            d = {"kind": layer.kind}
            if layer.kind == "conv":
                d.update(
                    in_channels=layer.in_channels,
                    out_channels=layer.out_channels,
                    kernel_size=layer.kernel_size,
                    pad=layer.pad,
                )
            elif layer.kind == "dense":
                d.update(in_features=layer.in_features, out_features=layer.out_features)
            out["layers"].append(d)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            kind = ld["kind"]
            if kind == "conv":
                layers.append(
                    ConvSpec(ld["in_channels"], ld["out_channels"], ld["kernel_size"], ld["pad"])
                )
            elif kind == "relu":
                layers.append(ReluSpec())
            elif kind == "gap":
                layers.append(GapSpec())
            elif kind == "dense":
                layers.append(DenseSpec(ld["in_features"], ld["out_features"]))
            else:
                raise FormatError(f"unknown layer kind {kind!r} in checkpoint header")
        spec = cls(tuple(d["input_shape"]), tuple(layers), d["num_classes"])
        spec.validate()
        return spec


def digit_network(
    kernel_size: int = 3,
    side: int = 64,
    channels: int = 16,
    depth: int = 5,
    num_classes: int = 10,
    in_channels: int = 1,
) -> NetworkSpec:
    """The standard digit-segmentation classifier: ``depth`` same-padded
    conv+relu blocks of ``channels`` channels, then gap and dense. The
    kernel size is the experiment's contribution-window knob."""
    if kernel_size % 2 != 1:
        raise ConfigError(f"same-padded network needs an odd kernel size, got {kernel_size}")
    pad = (kernel_size - 1) // 2
    layers: list = []
    cin = in_channels
    for _ in range(depth):
        layers.append(ConvSpec(cin, channels, kernel_size, pad))
        layers.append(ReluSpec())
        cin = channels
    layers.append(GapSpec())
    layers.append(DenseSpec(channels, num_classes))
    spec = NetworkSpec((in_channels, side, side), tuple(layers), num_classes)
    spec.validate()
    return spec


# ------------------------------------------------------------- train config


@dataclass(frozen=True)
class Perturb:
    """Input perturbation: mode 'none', 'gaussian' (value = sigma) or
    'binary' (value = keep probability p)."""

    mode: str = "none"
    value: float = 0.0

    def validate(self) -> None:
        if self.mode not in ("none", "gaussian", "binary"):
            raise ConfigError(f"unknown perturbation mode {self.mode!r}")
        if self.mode == "gaussian" and self.value < 0:
            raise ConfigError(f"gaussian sigma must be >= 0, got {self.value}")
        if self.mode == "binary" and not 0 < self.value <= 1:
            raise ConfigError(f"binary keep probability must be in (0, 1], got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "Perturb":
        """'none', 'gaussian:0.15', 'binary:0.9'."""
        if text == "none":
            return cls()
        if ":" not in text:
            raise ConfigError(f"perturbation spec {text!r} must look like 'gaussian:0.15'")
        mode, _, val = text.partition(":")
        try:
            p = cls(mode, float(val))
        except ValueError as exc:
            raise ConfigError(f"bad perturbation value in {text!r}") from exc
        p.validate()
        return p


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    perturb: Perturb = field(default_factory=Perturb)
    hflip: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        self.perturb.validate()


@dataclass
class TrainReport:
    losses: list[float]
    epochs: int
    samples: int


# ------------------------------------------------------------------ model


class Model:
    """A concrete network: spec + float32 parameters.

    ``params`` maps the index of each parametric layer in
    ``spec.layers`` to its (weight, bias) pair, in declaration order.
    """

    def __init__(self, spec: NetworkSpec, params: dict[int, tuple[np.ndarray, np.ndarray]]):
        spec.validate()
        self.spec = spec
        self.params = params

    # -- construction

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int) -> "Model":
        """Kaiming-style fan-in uniform init (bound sqrt(6/fan_in)),
        zero biases, drawn from the run seed's init stream."""
        spec.validate()
        gen = derive_generator(seed, _S_INIT)
        params: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for i, layer in enumerate(spec.layers):
            if layer.kind == "conv":
                fan_in = layer.in_channels * layer.kernel_size * layer.kernel_size
                bound = np.sqrt(6.0 / fan_in)
                k = gen.uniform(
                    -bound,
                    bound,
                    (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size),
                ).astype(np.float32)
                params[i] = (k, np.zeros(layer.out_channels, np.float32))
            elif layer.kind == "dense":
                bound = np.sqrt(6.0 / layer.in_features)
                w = gen.uniform(-bound, bound, (layer.out_features, layer.in_features)).astype(
                    np.float32
                )
                params[i] = (w, np.zeros(layer.out_features, np.float32))
        return cls(spec, params)

    @property
    def dense_index(self) -> int:
        return len(self.spec.layers) - 1

    @property
    def dense_weight(self) -> np.ndarray:
        return self.params[self.dense_index][0]

    def class_weights(self, class_index: int) -> np.ndarray:
        """w_c: the dense row that turns GAP channels into the class
        logit S_c = w_c . gap(A) + b_c."""
        w = self.dense_weight
        if not 0 <= class_index < w.shape[0]:
            raise ShapeError(f"class index {class_index} out of range for {w.shape[0]} classes")
        return w[class_index]

    def param_items(self):
        """(layer_index, weight, bias) in declaration order."""
        for i in sorted(self.params):
            w, b = self.params[i]
            yield i, w, b

    # -- forward

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        """The pooling head makes the classifier size-agnostic, so only
        the channel count is pinned; spatial dims may differ from the
        training size (native-resolution crops rely on this)."""
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != self.spec.input_shape[0]:
            raise ShapeError(
                f"image shape {image.shape} incompatible with network input "
                f"{self.spec.input_shape} (channel count must match)"
            )
        if min(image.shape[1:]) < 1:
            raise ShapeError(f"empty image {image.shape}")
        return image

    def _forward_batch(self, x: np.ndarray):
        """Returns (logits (B, n), inputs) where inputs[i] is the array
        fed to layer i (inputs[-1] is the gap output feeding dense)."""
        inputs = []
        cur = x
        for i, layer in enumerate(self.spec.layers):
            inputs.append(cur)
            if layer.kind == "conv":
                k, b = self.params[i]
                cur = T.conv2d_forward_batch(cur, k, b, layer.pad)
            elif layer.kind == "relu":
                cur = T.relu_forward(cur)
            elif layer.kind == "gap":
                cur = T.gap_forward_batch(cur)
            else:
                w, b = self.params[i]
                cur = T.dense_forward_batch(cur, w, b)
        return cur, inputs

    def forward_single(self, image: np.ndarray):
        """Single-image forward. Returns (logits (n,), inputs) with conv
        stages batched as (1, ...) and the gap/dense head unbatched."""
        image = self._check_image(image)
        cur = image[None]
        inputs = []
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                inputs.append(cur)
                k, b = self.params[i]
                cur = T.conv2d_forward_batch(cur, k, b, layer.pad)
            elif layer.kind == "relu":
                inputs.append(cur)
                cur = T.relu_forward(cur)
            elif layer.kind == "gap":
                a = cur[0]
                inputs.append(a)
                cur = T.gap_forward(a)
            else:
                inputs.append(cur)
                w, b = self.params[i]
                cur = T.dense_forward(cur, w, b)
        return cur, inputs

    def classify(self, image: np.ndarray) -> np.ndarray:
        """Pre-softmax logits for one image."""
        return self.forward_single(image)[0]

    def activation_map(self, image: np.ndarray) -> np.ndarray:
        """The final activation map A (C, H', W'), i.e. the gap input."""
        _, inputs = self.forward_single(image)
        return inputs[-2]

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
        hits = 0
        for s in range(0, images.shape[0], batch_size):
            xb = np.ascontiguousarray(images[s : s + batch_size], dtype=np.float32)
            logits, _ = self._forward_batch(xb)
            hits += int((logits.argmax(axis=1) == labels[s : s + batch_size]).sum())
        return hits / max(1, images.shape[0])

    # -- backward

    def _backward_convs(self, inputs, grad, upto: int | None = None):
        """Backpropagate ``grad`` (batched, shaped like the gap input)
        through the conv/relu stack. Returns the input gradient; no
        parameter gradients are formed."""
        g = grad
        start = len(self.spec.layers) - 3 if upto is None else upto
        for i in range(start, -1, -1):
            layer = self.spec.layers[i]
            if layer.kind == "relu":
                g = T.relu_backward(inputs[i], g)
            else:
                k, _ = self.params[i]
                g = T.conv2d_backward_batch(
                    inputs[i], k, g, layer.pad, need_input=True, need_kernel=False
                ).input_grad
        return g

    def input_gradient(self, image: np.ndarray, class_index: int) -> np.ndarray:
        """dS_c/dI for the pre-softmax logit S_c; shape = input shape.

        The dense+gap head contributes the uniform seed w_c/(H*W) on the
        activation map, which then backpropagates through the convs.
        """
        _, inputs = self.forward_single(image)
        a = inputs[-2]
        w_c = self.class_weights(class_index)
        seed = T.gap_backward(w_c, a.shape[1], a.shape[2])
        return self._backward_convs(inputs, seed[None])[0]

    def gap_channel_jacobian(self, image: np.ndarray) -> np.ndarray:
        """a' for every pixel: the Jacobian of the GAP vector w.r.t. the
        input, computed as one backward pass per GAP channel (batched
        into a single sweep). Returns (k, C_in, H, W)."""
        _, inputs = self.forward_single(image)
        a = inputs[-2]
        k, h, w = a.shape
        seeds = np.zeros((k, k, h, w), a.dtype)
        per_cell = a.dtype.type(1.0) / a.dtype.type(h * w)
        for ch in range(k):
            seeds[ch, ch] = per_cell
        # Input gradients never read the forward activations of the conv
        # layers themselves (only relu masks), so broadcasting the cached
        # (1, ...) activations across the k seed rows is exact.
        g = seeds
        for i in range(len(self.spec.layers) - 3, -1, -1):
            layer = self.spec.layers[i]
            if layer.kind == "relu":
                g = T.relu_backward(np.broadcast_to(inputs[i], (k,) + inputs[i].shape[1:]), g)
            else:
                kk, _ = self.params[i]
                g = T.conv2d_backward_batch(
                    np.broadcast_to(inputs[i], (k,) + inputs[i].shape[1:]),
                    kk,
                    g,
                    layer.pad,
                    need_input=True,
                    need_kernel=False,
                ).input_grad
        return g

    def _backward_batch(self, inputs, glogits):
        """Full parameter gradients for a training step. Returns a dict
        layer_index -> (dW, db)."""
        grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        n_layers = len(self.spec.layers)
        w, _ = self.params[n_layers - 1]
        gvec, dw, db = T.dense_backward_batch(inputs[n_layers - 1], w, glogits)
        grads[n_layers - 1] = (dw, db)
        a = inputs[n_layers - 2]
        g = T.gap_backward_batch(gvec, a.shape[2], a.shape[3])
        for i in range(n_layers - 3, -1, -1):
            layer = self.spec.layers[i]
            if layer.kind == "relu":
                g = T.relu_backward(inputs[i], g)
            else:
                k, _ = self.params[i]
                cg = T.conv2d_backward_batch(inputs[i], k, g, layer.pad)
                grads[i] = (cg.kernel_grad, cg.bias_grad)
                g = cg.input_grad
        return grads

    # -- training

    def train(self, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> TrainReport:
        """SGD with momentum on softmax cross-entropy, in place.

        images: (N, C, H, W) float32, labels: (N,) int. Raises
        TrainingDiverged as soon as a batch loss goes non-finite.
        """
        cfg.validate()
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels)
        if images.ndim != 4 or images.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"training images {images.shape} do not match input {self.spec.input_shape}"
            )
        if labels.shape != (images.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} != ({images.shape[0]},)")
        n = images.shape[0]
        shuffle_gen = derive_generator(cfg.seed, _S_SHUFFLE)
        noise_gen = derive_generator(cfg.seed, _S_NOISE)
        flip_gen = derive_generator(cfg.seed, _S_FLIP)
        velocity = {i: (np.zeros_like(w), np.zeros_like(b)) for i, w, b in self.param_items()}
        lr = np.float32(cfg.learning_rate)
        mu = np.float32(cfg.momentum)
        losses: list[float] = []
        for epoch in range(cfg.epochs):
            perm = shuffle_gen.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                xb = images[idx]
                if cfg.hflip:
                    flips = flip_gen.random(len(idx)) < 0.5
                    xb[flips] = xb[flips, :, :, ::-1]
                xb = _apply_perturb(xb, cfg.perturb, noise_gen)
                logits, inputs = self._forward_batch(xb)
                step_losses, glogits = T.softmax_cross_entropy_batch(logits, labels[idx])
                mean_loss = float(step_losses.mean())
                if not np.isfinite(mean_loss):
                    last = losses[-1] if losses else float("nan")
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch} step {len(losses)} "
                        f"(batch mean {mean_loss}, previous {last}); "
                        f"lr={cfg.learning_rate}, batch_size={cfg.batch_size}"
                    )
                losses.append(mean_loss)
                glogits *= np.float32(1.0 / len(idx))
                grads = self._backward_batch(inputs, glogits.astype(np.float32))
                for i, (gw, gb) in grads.items():
                    vw, vb = velocity[i]
                    w, b = self.params[i]
                    vw *= mu
                    vw -= lr * gw
                    w += vw
                    vb *= mu
                    vb -= lr * gb
                    b += vb
        return TrainReport(losses=losses, epochs=cfg.epochs, samples=n)

    # -- checkpoints

    def save(self, path, metadata: dict | None = None) -> None:
        header = {
            "network": self.spec.to_dict(),
            "params": [
                {"layer": i, "weight_shape": list(w.shape), "bias_shape": list(b.shape)}
                for i, w, b in self.param_items()
            ],
            "metadata": metadata or {},
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, w, b in self.param_items():
                fh.write(np.ascontiguousarray(w, "<f4").tobytes())
                fh.write(np.ascontiguousarray(b, "<f4").tobytes())

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        """Returns (model, metadata). Raises FormatError on bad magic,
        truncation, or parameter-shape mismatches."""
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 10:
            raise FormatError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
        if raw[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<H", raw[4:6])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", raw[6:10])
        if len(raw) < 10 + hlen:
            raise FormatError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from exc
        try:
            spec = NetworkSpec.from_dict(header["network"])
            entries = header["params"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: incomplete checkpoint header: {exc}") from exc

        expected: list[tuple[int, tuple, tuple]] = []
        total = 0
        for e in entries:
            wshape = tuple(int(v) for v in e["weight_shape"])
            bshape = tuple(int(v) for v in e["bias_shape"])
            expected.append((int(e["layer"]), wshape, bshape))
            total += (int(np.prod(wshape)) + int(np.prod(bshape))) * 4
        body = raw[10 + hlen :]
        if len(body) != total:
            raise FormatError(
                f"{path}: parameter payload size mismatch: expected {total} bytes, got {len(body)}"
            )

        params: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        off = 0
        for layer_idx, wshape, bshape in expected:
            spec_layer = spec.layers[layer_idx]
            if spec_layer.kind == "conv":
                want = (
                    spec_layer.out_channels,
                    spec_layer.in_channels,
                    spec_layer.kernel_size,
                    spec_layer.kernel_size,
                )
            else:
                want = (spec_layer.out_features, spec_layer.in_features)
            if wshape != want:
                raise FormatError(
                    f"{path}: layer {layer_idx} weight shape {wshape} does not match "
                    f"architecture {want}"
                )
            nw = int(np.prod(wshape)) * 4
            nb = int(np.prod(bshape)) * 4
            w = np.frombuffer(body, "<f4", count=int(np.prod(wshape)), offset=off).reshape(wshape)
            off += nw
            b = np.frombuffer(body, "<f4", count=int(np.prod(bshape)), offset=off).reshape(bshape)
            off += nb
            params[layer_idx] = (w.astype(np.float32), b.astype(np.float32))
        return cls(spec, params), header.get("metadata", {})


def _apply_perturb(xb: np.ndarray, perturb: Perturb, gen: np.random.Generator) -> np.ndarray:
    if perturb.mode == "gaussian":
        noise = gen.standard_normal(xb.shape, dtype=np.float32)
        noise *= np.float32(perturb.value)
        xb = xb + noise
    elif perturb.mode == "binary":
        keep = gen.random(xb.shape) < perturb.value
        xb = xb * keep.astype(np.float32)
    return xb
