"""A small convolutional classifier written directly in numpy.

Layers operate on batches: images are ``(N, C, H, W)`` float64 arrays and the
31-entry time features are ``(N, 31)``. The feature vector is spliced into the
activations by the single ``concat_features`` layer after ``flatten``.

Every layer implements ``forward(x, feats, training, rng) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``; gradients are of the mean batch loss.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encode import N_CLASSES, N_FEATURES, stack

MAGIC = b"DXNAT1"
FORMAT_VERSION = 1
EPS = 1e-12


class ModelFileError(ValueError):
    pass


# ---------------------------------------------------------------- layers

class Layer:
    kind = ""
    params: dict

    def __init__(self):
        self.params = {}

    def build(self, in_shape: tuple, rng) -> tuple:
        """Allocate parameters for per-sample ``in_shape``; return the output shape."""
        return in_shape

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, feats, training, rng):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class Conv2D(Layer):
    """Stride-1 convolution with zero 'same' padding (odd kernels)."""

    kind = "conv2d"

    def __init__(self, out_channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("conv kernel size must be odd")
        self.out_channels, self.kernel = int(out_channels), int(kernel)

    def spec(self):
        return {"kind": self.kind, "out_channels": self.out_channels, "kernel": self.kernel}

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ValueError(f"conv2d needs (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        fan_in = c * self.kernel ** 2
        lim = np.sqrt(6.0 / fan_in)
        self.params = {
            "W": rng.uniform(-lim, lim, size=(self.out_channels, c, self.kernel, self.kernel)),
            "b": np.zeros(self.out_channels),
        }
        return self.out_channels, h, w

    def _cols(self, x):
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))  # N,C,H,W,k,k
        n, c, h, w = x.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.kernel ** 2)

    def forward(self, x, feats, training, rng):
        n, c, h, w = x.shape
        W, b = self.params["W"], self.params["b"]
        cols = self._cols(x)
        y = cols @ W.reshape(self.out_channels, -1).T + b
        return y.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, dy, cache):
        (n, c, h, w), cols = cache
        W = self.params["W"]
        k, p = self.kernel, self.kernel // 2
        d = dy.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        grads = {"W": (d.T @ cols).reshape(W.shape), "b": d.sum(axis=0)}
        dcols = (d @ W.reshape(self.out_channels, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, feats, training, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def build(self, in_shape, rng):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ValueError(f"input {in_shape} too small for 2x2 pooling")
        return c, h // 2, w // 2

    def forward(self, x, feats, training, rng):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h2, w2, 4)
        arg = blocks.argmax(axis=-1)  # first maximum wins ties
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        (n, c, h, w), arg = cache
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :2 * h2, :2 * w2] = (
            blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return dx, {}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, feats, training, rng):
        if not training or self.rate == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), {}


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, x, feats, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class ConcatFeatures(Layer):
    kind = "concat_features"

    def __init__(self, size: int = N_FEATURES):
        super().__init__()
        self.size = int(size)

    def spec(self):
        return {"kind": self.kind, "size": self.size}

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ValueError("concat_features must follow flatten")
        return (in_shape[0] + self.size,)

    def forward(self, x, feats, training, rng):
        if feats.shape != (x.shape[0], self.size):
            raise ValueError(f"expected features of shape {(x.shape[0], self.size)}, got {feats.shape}")
        return np.concatenate([x, feats], axis=1), x.shape[1]

    def backward(self, dy, n_in):
        return dy[:, :n_in], {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        self.units = int(units)

    def spec(self):
        return {"kind": self.kind, "units": self.units}

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ValueError("dense needs a flat input")
        lim = np.sqrt(6.0 / in_shape[0])
        self.params = {
            "W": rng.uniform(-lim, lim, size=(in_shape[0], self.units)),
            "b": np.zeros(self.units),
        }
        return (self.units,)

    def forward(self, x, feats, training, rng):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, x):
        return dy @ self.params["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, feats, training, rng):
        z = np.exp(x - x.max(axis=1, keepdims=True))
        y = z / z.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, dy, y):
        return y * (dy - (dy * y).sum(axis=1, keepdims=True)), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2x2, Dropout, Flatten, ConcatFeatures, Dense, Softmax)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)


# ---------------------------------------------------------------- network

DEFAULT_LAYERS = [
    {"kind": "conv2d", "out_channels": 8, "kernel": 3},
    {"kind": "relu"},
    {"kind": "maxpool2x2"},
    {"kind": "dropout", "rate": 0.25},
    {"kind": "conv2d", "out_channels": 16, "kernel": 3},
    {"kind": "relu"},
    {"kind": "maxpool2x2"},
    {"kind": "dropout", "rate": 0.25},
    {"kind": "flatten"},
    {"kind": "concat_features", "size": N_FEATURES},
    {"kind": "dense", "units": 128},
    {"kind": "relu"},
    {"kind": "dropout", "rate": 0.5},
    {"kind": "dense", "units": N_CLASSES},
    {"kind": "softmax"},
]


class Network:
    def __init__(self, width: int, layers: Sequence[dict] = DEFAULT_LAYERS, seed: int = 0,
                 channels: int = 1, n_outputs: Optional[int] = N_CLASSES):
        self.width, self.channels, self.seed = int(width), int(channels), int(seed)
        self.layers = [layer_from_spec(s) for s in layers]
        kinds = [l.kind for l in self.layers]
        if kinds.count("concat_features") != 1:
            raise ValueError("network needs exactly one concat_features layer")
        if not kinds or kinds[-1] != "softmax":
            raise ValueError("softmax must be the last layer")
        rng = np.random.default_rng(self.seed)
        shape = (self.channels, self.width, self.width)
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.build(shape, rng)
            self.shapes.append(shape)
        if len(shape) != 1 or (n_outputs is not None and shape[0] != n_outputs):
            raise ValueError(f"network output shape {shape} != ({n_outputs},)")
        self._cache = None

    @property
    def n_outputs(self) -> int:
        return self.shapes[-1][0]

    def layer_specs(self) -> list:
        return [l.spec() for l in self.layers]

    def parameters(self):
        """``(layer_index, name, array)`` for every parameter, in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def n_parameters(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        if (self.width, self.channels, self.layer_specs()) != (other.width, other.channels, other.layer_specs()):
            return False
        return all(
            a[1] == b[1] and np.array_equal(a[2], b[2]) for a, b in zip(self.parameters(), other.parameters())
        )

    def _check_inputs(self, x, feats):
        x = np.asarray(x, dtype=np.float64)
        feats = np.asarray(feats, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None]
        if feats.ndim == 1:
            feats = feats[None]
        if x.shape[1:] != (self.channels, self.width, self.width):
            raise ValueError(f"image shape {x.shape[1:]} does not match network input "
                             f"{(self.channels, self.width, self.width)}")
        if feats.shape != (x.shape[0], N_FEATURES):
            raise ValueError(f"features shape {feats.shape} != {(x.shape[0], N_FEATURES)}")
        return x, feats

    def _run(self, x, feats, training, rng):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, feats, training, rng)
            caches.append(c)
        return x, caches

    def forward(self, x, feats, training: bool = False, rng=None) -> np.ndarray:
        """Class probabilities ``(N, 9)``; caches activations for :meth:`backward`."""
        x, feats = self._check_inputs(x, feats)
        if training and rng is None:
            rng = np.random.default_rng(self.seed)
        probs, caches = self._run(x, feats, training, rng)
        self._cache = (x, feats, probs, caches)
        return probs

    def predict(self, x, feats, batch_size: int = 256) -> np.ndarray:
        """Inference without dropout; keeps no state, safe to call concurrently."""
        x, feats = self._check_inputs(x, feats)
        out = [self._run(x[i:i + batch_size], feats[i:i + batch_size], False, None)[0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_outputs))

    def backward(self, targets) -> list:
        """Gradients of the mean cross-entropy of the cached forward pass.

        ``targets`` are class indices or one-hot rows. Returns one dict per
        layer, keyed like ``layer.params``.
        """
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        _, _, probs, caches = self._cache
        y = _as_indices(targets, len(probs))
        n = len(probs)
        p_t = probs[np.arange(n), y]
        dy = np.zeros_like(probs)
        dy[np.arange(n), y] = np.where(p_t > EPS, -1.0 / (n * np.maximum(p_t, EPS)), 0.0)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(dy, caches[i])
        return grads

    def step(self, grads, lr: float) -> None:
        for layer, g in zip(self.layers, grads):
            for name, dp in g.items():
                layer.params[name] -= lr * dp


def _as_indices(targets, n) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 2:
        if np.any(t.sum(axis=1) != 1):
            raise ValueError("target rows must be one-hot")
        t = t.argmax(axis=1)
    t = np.atleast_1d(t).astype(np.int64)
    if t.shape != (n,):
        raise ValueError("targets do not match batch size")
    return t


def build_default(width: int, seed: int = 0) -> Network:
    if width < 8:
        raise ValueError(f"width {width} too small for two 2x2 pooling stages (need >= 8)")
    return Network(width, DEFAULT_LAYERS, seed)


def forward(net: Network, image, features, training: bool = False, rng=None) -> np.ndarray:
    """Single-sample convenience wrapper: returns the 9 class probabilities."""
    return net.forward(image, features, training, rng)[0]


def loss(output, target) -> float:
    """Categorical cross-entropy ``-log(output[target])`` for one sample or the batch mean."""
    out = np.atleast_2d(np.asarray(output, dtype=np.float64))
    if np.any(out < 0) or not np.allclose(out.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("output is not a probability vector")
    y = _as_indices(target, len(out))
    return float(np.mean(-np.log(np.maximum(out[np.arange(len(out)), y], EPS))))


def backward(net: Network, image, features, target) -> list:
    """Gradients for the sample most recently passed through :func:`forward`."""
    if net._cache is None:
        raise RuntimeError("backward() called without a cached forward pass")
    x, f = net._check_inputs(image, features)
    if not (np.array_equal(x, net._cache[0]) and np.array_equal(f, net._cache[1])):
        raise RuntimeError("cached forward pass was for different inputs")
    return net.backward(target)


def predict(net: Network, image, features) -> np.ndarray:
    return net.predict(image, features)[0]


# ---------------------------------------------------------------- gradient checking

def relative_error(analytic, numeric) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm of the whole tensor
    (0 when both vanish)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)


def _numeric(f, arr, h):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def check_layer(layer: Layer, x, feats=None, h: float = 1e-5, seed: int = 0) -> dict:
    """Central-difference check of one built layer against the scalar
    ``sum(w * layer(x))`` for a fixed random ``w``. Returns relative errors for
    the input (``"x"``) and every parameter."""
    x = np.array(x, dtype=np.float64)
    y, cache = layer.forward(x, feats, False, None)
    w = np.random.default_rng(seed).standard_normal(y.shape)
    dx, grads = layer.backward(w, cache)

    def f():
        return float(np.sum(w * layer.forward(x, feats, False, None)[0]))

    errors = {"x": relative_error(dx, _numeric(f, x, h))}
    for name in sorted(layer.params):
        errors[name] = relative_error(grads[name], _numeric(f, layer.params[name], h))
    return errors


def check_network(net: Network, x, feats, targets, h: float = 1e-5) -> dict:
    """Central-difference check of the mean cross-entropy with dropout off.
    Returns ``{(layer_index, name): relative_error}``."""
    x, feats = net._check_inputs(x, feats)
    net.forward(x, feats, training=False)
    grads = net.backward(targets)
    net._cache = None

    def f():
        return loss(net._run(x, feats, False, None)[0], targets)

    return {(i, name): relative_error(grads[i][name], _numeric(f, p, h)) for i, name, p in net.parameters()}


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    validation_split: float = 0.1
    track_train_loss: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate > 0")
        if not 0.0 < self.validation_split < 1.0:
            raise ValueError("validation_split must lie in (0, 1)")


def train(net: Network, dataset, cfg: TrainConfig, progress=None):
    """Mini-batch gradient descent on a copy of ``net``.

    ``dataset`` is a list of :class:`LabeledSample` or a tuple ``(x, feats, y)``.
    Returns ``(trained_network, log)``; ``log`` has one dict per epoch with the
    mean mini-batch loss, the inference-mode training loss and the validation
    accuracy (``None`` when the split leaves no validation samples).
    """
    if isinstance(dataset, tuple):
        x, f, y = dataset
    else:
        if not dataset:
            raise ValueError("empty dataset")
        widths = {s.tci.width for s in dataset}
        if len(widths) != 1:
            raise ValueError(f"inconsistent image widths {sorted(widths)}")
        x, f, y = stack(dataset)
    if len(x) == 0:
        raise ValueError("empty dataset")
    x, f = net._check_inputs(x, f)
    y = _as_indices(y, len(x))

    net = net.copy()
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    perm = rng.permutation(len(x))
    n_val = int(len(x) * cfg.validation_split)
    val, tr = perm[:n_val], perm[n_val:]
    log = []
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(len(tr))]
        batch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            probs = net.forward(x[b], f[b], training=True, rng=rng)
            batch_losses.append(loss(probs, y[b]) * len(b))
            net.step(net.backward(y[b]), cfg.learning_rate)
        net._cache = None
        entry = {"epoch": epoch + 1, "loss": sum(batch_losses) / len(tr)}
        if cfg.track_train_loss:
            p = net.predict(x[tr], f[tr])
            entry["train_loss"] = loss(p, y[tr])
            entry["train_accuracy"] = float(np.mean(p.argmax(axis=1) == y[tr]))
        if n_val:
            entry["val_accuracy"] = float(np.mean(net.predict(x[val], f[val]).argmax(axis=1) == y[val]))
        else:
            entry["val_accuracy"] = None
        log.append(entry)
        if progress:
            progress(entry)
    return net, log


# ---------------------------------------------------------------- persistence

def save(net: Network, path) -> None:
    """Write ``DXNAT1``, a version, a JSON header and little-endian float64 parameters."""
    header = {
        "width": net.width,
        "channels": net.channels,
        "seed": net.seed,
        "layers": net.layer_specs(),
        "parameters": [[i, name, list(p.shape)] for i, name, p in net.parameters()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load(path) -> Network:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFileError(f"{path}: not a DXNAT model file (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", data, pos)
    except struct.error as exc:
        raise ModelFileError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported model version {version}")
    pos += struct.calcsize("<HI")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt header") from exc
    pos += hlen
    net = Network(header["width"], header["layers"], header["seed"], header["channels"], n_outputs=None)
    expected = [[i, name, list(p.shape)] for i, name, p in net.parameters()]
    if expected != header["parameters"]:
        raise ModelFileError(f"{path}: parameter layout does not match layer list")
    for i, name, shape in header["parameters"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(data):
            raise ModelFileError(f"{path}: truncated parameter data")
        net.layers[i].params[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += n
    if pos != len(data):
        raise ModelFileError(f"{path}: trailing bytes after parameters")
    return net


def load_architecture(path) -> list:
    """Layer list from a JSON architecture file (a list of layer dicts, or
    ``{"layers": [...]}``)."""
    spec = json.loads(Path(path).read_text())
    layers = spec["layers"] if isinstance(spec, dict) else spec
    for s in layers:
        layer_from_spec(s)  # validate
    return layers
