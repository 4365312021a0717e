"""Network definitions and forward evaluation under MC dropout.

Presets
-------
``mnist_cnn``
    conv32-relu-pool-dropout, conv64-relu-pool-dropout, dense128-relu-dropout,
    dense K.  Dropout rate 0.5.
``cifar_cnn``
    conv32, conv32, pool, conv64, conv64, pool, conv128, conv128, pool (ReLU
    after every conv, dropout after every pooled block), dense128-relu-dropout,
    dense K.  Dropout rate 0.4 by default (0.2 is the PathMNIST setting).
``desk_mlp``
    flatten, dense(hidden=64)-relu-dropout, dense K.  Not one of the published
    architectures; a small stand-in for fast tests on tiny synthetic images.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, FormatError

LAYER_KINDS = ("conv3x3", "dense", "relu", "maxpool2", "dropout", "flatten")

PRESET_RATES = {"mnist_cnn": 0.5, "cifar_cnn": 0.4, "desk_mlp": 0.5}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind in ("conv3x3", "dense") and self.size < 1:
            raise ConfigError(f"{self.kind} layer needs a positive size")


@dataclass(frozen=True)
class ArchPreset:
    name: str
    layers: tuple
    rate: float


def _conv_block(sizes, rate):
    out = []
    for s in sizes:
        out += [LayerSpec("conv3x3", s), LayerSpec("relu")]
    return out + [LayerSpec("maxpool2"), LayerSpec("dropout", rate=rate)]


def resolve_preset(name, n_classes, rate=None, hidden=None):
    """Resolve a preset name into its full layer list."""
    if name not in PRESET_RATES:
        raise ConfigError(f"unknown architecture preset {name!r}")
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    rate = PRESET_RATES[name] if rate is None else float(rate)
    if name == "mnist_cnn":
        layers = _conv_block([32], rate) + _conv_block([64], rate)
        hidden = 128 if hidden is None else hidden
    elif name == "cifar_cnn":
        layers = _conv_block([32, 32], rate) + _conv_block([64, 64], rate) + _conv_block([128, 128], rate)
        hidden = 128 if hidden is None else hidden
    else:
        layers = []
        hidden = 64 if hidden is None else hidden
    layers += [
        LayerSpec("flatten"),
        LayerSpec("dense", hidden),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=rate),
        LayerSpec("dense", n_classes),
    ]
    return ArchPreset(name, tuple(layers), rate)


@dataclass
class Network:
    layers: tuple
    params: list  # Tensor per weight/bias, declaration order
    n_classes: int
    input_shape: tuple  # (C, H, W)
    preset: str = ""
    _slots: list = field(default_factory=list, repr=False)  # per-layer (w_idx, b_idx) or None

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} values, got {flat.size}")
        i = 0
        for p in self.params:
            n = p.size
            p.data = flat[i:i + n].reshape(p.shape).copy()
            i += n

    def snapshot(self):
        return [p.data.copy() for p in self.params]

    def restore(self, snap):
        for p, d in zip(self.params, snap):
            p.data = d.copy()

    def grads(self):
        return [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]


def _build_params(layers, input_shape, n_classes, rng):
    C, H, W = input_shape
    shape = (C, H, W)
    params, slots = [], []
    for spec in layers:
        if spec.kind == "conv3x3":
            if len(shape) != 3:
                raise DimensionError("conv3x3 after flatten")
            fan_in = shape[0] * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.size, shape[0], 3, 3))
            b = np.zeros((1, 1, 1, spec.size))
            slots.append((len(params), len(params) + 1))
            params += [ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True)]
            shape = (spec.size, shape[1], shape[2])
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise DimensionError("dense layer needs a flatten before it")
            w = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=(shape[0], spec.size))
            b = np.zeros((1, spec.size))
            slots.append((len(params), len(params) + 1))
            params += [ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True)]
            shape = (spec.size,)
        else:
            slots.append(None)
            if spec.kind == "maxpool2":
                if shape[1] % 2 or shape[2] % 2:
                    raise DimensionError(f"maxpool2 on odd extent {shape[1:]}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
    if shape != (n_classes,):
        raise DimensionError(f"network output shape {shape} does not match {n_classes} classes")
    return params, slots


def build_network(preset, n_classes, seed, input_shape=(1, 28, 28), rate=None, hidden=None):
    """Build and He-normal initialise a network (zero biases)."""
    from .rng import stream

    if isinstance(preset, str):
        preset = resolve_preset(preset, n_classes, rate=rate, hidden=hidden)
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    rng = stream(seed, "init")
    params, slots = _build_params(preset.layers, tuple(input_shape), n_classes, rng)
    return Network(preset.layers, params, n_classes, tuple(input_shape), preset.name, slots)


def _check_batch(net, batch):
    x = ad.as_tensor(batch)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise DimensionError(f"batch shape {x.shape} does not match input shape {net.input_shape}")
    # activations run channels-last; flatten therefore orders features (h, w, c)
    return ad.transpose(x, (0, 2, 3, 1))


def forward_from(net, x, start=0, mode="off", rng=None, stop=None):
    """Run layers ``start:stop`` on a channels-last activation ``x``."""
    stop = len(net.layers) if stop is None else stop
    for spec, slot in zip(net.layers[start:stop], net._slots[start:stop]):
        if spec.kind == "conv3x3":
            x = ad.conv2d_nhwc(x, net.params[slot[0]], net.params[slot[1]])
        elif spec.kind == "dense":
            x = ad.add(ad.matmul(x, net.params[slot[0]]), net.params[slot[1]])
        elif spec.kind == "relu":
            x = ad.relu(x)
        elif spec.kind == "maxpool2":
            x = ad.maxpool2_nhwc(x)
        elif spec.kind == "dropout":
            x = ad.dropout(x, spec.rate, rng, mode)
        elif spec.kind == "flatten":
            x = ad.flatten(x)
    return x


def forward(net, batch, mode="off", rng=None):
    """Logits for ``batch`` (B x C x H x W array or Tensor).

    In ``train``/``eval_mc`` mode each call draws fresh dropout masks from
    ``rng``, i.e. evaluates one realisation of the weights under dropout.
    """
    return forward_from(net, _check_batch(net, batch), 0, mode, rng)


def forward_prefix(net, batch):
    """Activation after the layers preceding the first active dropout.

    Those layers are deterministic, so MC prediction computes them once and
    runs :func:`forward_from` per sample.  Returns ``(activation, start)``.
    """
    start = next((i for i, s in enumerate(net.layers) if s.kind == "dropout" and s.rate > 0), len(net.layers))
    return forward_from(net, _check_batch(net, batch), 0, "off", stop=start), start


def l2_norm_sq(net):
    """Sum of squares of every weight and bias, as a graph node."""
    total = None
    for p in net.params:
        term = ad.tsum(ad.mul(p, p))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.Tensor(0.0)


# ---------------------------------------------------------------------------
# checkpoint file
#
# little-endian:
#   b"FSEB" | u32 version | u32 n_classes | u32 C | u32 H | u32 W
#   u32 n_layers | n_layers x (u8 kind, u32 size, f64 rate)
#   u32 n_params | n_params x (u32 ndim, ndim x u32 dim, prod(dims) x f64)

MAGIC = b"FSEB"
VERSION = 1


def save_checkpoint(net, path):
    out = bytearray(MAGIC)
    out += struct.pack("<I4I", VERSION, net.n_classes, *net.input_shape)
    out += struct.pack("<I", len(net.layers))
    for spec in net.layers:
        out += struct.pack("<BId", LAYER_KINDS.index(spec.kind), spec.size, spec.rate)
    out += struct.pack("<I", len(net.params))
    for p in net.params:
        out += struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape)
        out += p.data.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, preset=""):
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        if buf[:4] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version, K, C, H, W = struct.unpack_from("<I4I", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 24
        (n_layers,) = struct.unpack_from("<I", buf, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            kind, size, rate = struct.unpack_from("<BId", buf, off)
            off += struct.calcsize("<BId")
            layers.append(LayerSpec(LAYER_KINDS[kind], size, rate))
        (n_params,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = []
        for _ in range(n_params):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(dims))
            if off + 8 * n > len(buf):
                raise FormatError(f"{path}: truncated parameter data")
            arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64))
            off += 8 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    params, slots = _build_params(layers, (C, H, W), K, np.random.default_rng(0))
    if len(params) != len(arrays) or any(p.shape != a.shape for p, a in zip(params, arrays)):
        raise FormatError(f"{path}: parameter table does not match layer table")
    for p, a in zip(params, arrays):
        p.data = a
    return Network(tuple(layers), params, K, (C, H, W), preset, slots)
