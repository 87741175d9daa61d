"""Grid detector: layer specs, config parsing/validation, parameter
initialization, the forward pass to an S x S grid of box predictions, and
decoding of that grid into boxes.

Head layout per cell: B blocks of (tx, ty, tw, th, tc) followed by
num_classes class logits. Decoding squashes tx, ty, tc through sigmoid
(cell-relative position and confidence in [0, 1]) and squares tw, th (the
network regresses square roots of the image-relative extents, keeping
w, h >= 0). Class scores go through softmax per cell, which for a single
class degenerates to a sigmoid on the lone logit.
"""

from __future__ import annotations

import enum
import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .activations import ActivationKind, sigmoid
from .boxes import BBox, nms
from .errors import ConfigError, UsageError

PRESETS = ("default", "desk")


class LayerKind(enum.Enum):
    CONV = "conv"
    MAXPOOL = "pool"
    FULLY_CONNECTED = "fc"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: ActivationKind = ActivationKind.IDENTITY
    window: int = 0


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int
    layers: tuple[LayerSpec, ...]
    grid_size: int
    boxes_per_cell: int
    num_classes: int

    @property
    def head_width(self) -> int:
        return self.boxes_per_cell * 5 + self.num_classes

    def conv_count(self) -> int:
        return sum(1 for l in self.layers if l.kind is LayerKind.CONV)


def spatial_trace(config: NetworkConfig) -> list[int]:
    """Spatial extent after each conv/pool layer; raises ConfigError on an
    impossible layer, naming it."""
    size = config.input_size
    trace = [size]
    for i, layer in enumerate(config.layers, start=1):
        if layer.kind is LayerKind.CONV:
            if layer.kernel > size + 2 * layer.padding:
                raise ConfigError(f"layer {i} (conv): kernel {layer.kernel} exceeds padded extent {size + 2 * layer.padding}")
            size = (size + 2 * layer.padding - layer.kernel) // layer.stride + 1
            trace.append(size)
        elif layer.kind is LayerKind.MAXPOOL:
            if layer.window > size:
                raise ConfigError(f"layer {i} (pool): window {layer.window} exceeds extent {size}")
            size = (size - layer.window) // layer.stride + 1
            trace.append(size)
    return trace


def validate_config(config: NetworkConfig) -> None:
    if config.input_size <= 0:
        raise ConfigError("input size must be positive")
    if config.boxes_per_cell < 1 or config.num_classes < 1:
        raise ConfigError("head needs at least one box per cell and one class")
    trace = spatial_trace(config)
    last_spatial = trace[-1]
    if last_spatial != config.grid_size:
        raise ConfigError(
            f"spatial trace {trace} ends at {last_spatial}, but the head declares grid size {config.grid_size}"
        )
    fcs = [l for l in config.layers if l.kind is LayerKind.FULLY_CONNECTED]
    if not fcs:
        raise ConfigError("network needs at least one fully connected layer before the head")
    want = config.grid_size * config.grid_size * config.head_width
    if fcs[-1].out_channels != want:
        raise ConfigError(
            f"last fc width {fcs[-1].out_channels} != S*S*(B*5+classes) = {want}"
        )


# ---------------------------------------------------------------------------
# config file format: one directive per line, '#' comments.
#   input <n>
#   conv <out_channels> <kernel> <stride> <padding> <activation>
#   pool <window> <stride>
#   fc <out>
#   head <S> <B> <classes>

def parse_network_config(text: str) -> NetworkConfig:
    input_size = None
    head = None
    layers: list[LayerSpec] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        d, args = parts[0], parts[1:]

        def ints(n):
            if len(args) != n:
                raise ConfigError(f"line {ln}: {d} takes {n} arguments, got {len(args)}")
            try:
                return [int(a) for a in args[:n]]
            except ValueError:
                raise ConfigError(f"line {ln}: non-integer argument in {line!r}") from None

        if d == "input":
            (input_size,) = ints(1)
        elif d == "conv":
            if len(args) != 5:
                raise ConfigError(f"line {ln}: conv takes 5 arguments, got {len(args)}")
            try:
                oc, k, s, p = (int(a) for a in args[:4])
            except ValueError:
                raise ConfigError(f"line {ln}: non-integer argument in {line!r}") from None
            try:
                act = ActivationKind.parse(args[4])
            except ValueError as e:
                raise ConfigError(f"line {ln}: {e}") from None
            if oc < 1 or k < 1 or s < 1 or p < 0:
                raise ConfigError(f"line {ln}: conv arguments out of range")
            layers.append(LayerSpec(LayerKind.CONV, out_channels=oc, kernel=k, stride=s, padding=p, activation=act))
        elif d == "pool":
            win, s = ints(2)
            if win < 1 or s < 1:
                raise ConfigError(f"line {ln}: pool arguments out of range")
            layers.append(LayerSpec(LayerKind.MAXPOOL, window=win, stride=s))
        elif d == "fc":
            (out,) = ints(1)
            if out < 1:
                raise ConfigError(f"line {ln}: fc width must be positive")
            layers.append(LayerSpec(LayerKind.FULLY_CONNECTED, out_channels=out))
        elif d == "head":
            s, b, c = ints(3)
            head = (s, b, c)
        else:
            raise ConfigError(f"line {ln}: unknown directive {d!r}")
    if input_size is None:
        raise ConfigError("config missing 'input' directive")
    if head is None:
        raise ConfigError("config missing 'head' directive")
    cfg = NetworkConfig(input_size=input_size, layers=tuple(layers), grid_size=head[0],
                        boxes_per_cell=head[1], num_classes=head[2])
    validate_config(cfg)
    return cfg


def load_network_config(source: str | Path) -> NetworkConfig:
    """Read a config from a file path, or from a named packaged preset."""
    if str(source) in PRESETS:
        text = importlib.resources.files("griddet").joinpath(f"configs/{source}.cfg").read_text()
    else:
        text = Path(source).read_text()
    return parse_network_config(text)


# ---------------------------------------------------------------------------

class Network:
    """A built, parameterized detector. Parameters are read-only during
    inference; a training step takes exclusive ownership."""

    def __init__(self, config: NetworkConfig, params: dict[str, T.Tensor], dtype):
        self.config = config
        self.params = params
        self.dtype = dtype

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise UsageError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise UsageError(f"checkpoint shape mismatch for {name}: {arr.shape} != {tuple(p.shape)}")
            p.data = arr

    def forward_batch(self, x: T.Tensor) -> T.Tensor:
        """images [N, 3, input, input] in [0,1] -> raw grid [N, S, S, head]."""
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise UsageError(
                f"expected input [N, 3, {cfg.input_size}, {cfg.input_size}], got {tuple(x.shape)}"
            )
        t = x
        conv_i = fc_i = 0
        for layer in cfg.layers:
            if layer.kind is LayerKind.CONV:
                conv_i += 1
                t = T.conv2d(t, self.params[f"conv{conv_i}.weight"], self.params[f"conv{conv_i}.bias"],
                             stride=layer.stride, padding=layer.padding)
                t = T.activation(t, layer.activation)
            elif layer.kind is LayerKind.MAXPOOL:
                t = T.maxpool2d(t, layer.window, layer.stride)
            elif layer.kind is LayerKind.FULLY_CONNECTED:
                fc_i += 1
                if t.data.ndim == 4:
                    n = t.shape[0]
                    t = T.reshape(t, (n, int(np.prod(t.shape[1:]))))
                t = T.fully_connected(t, self.params[f"fc{fc_i}.weight"], self.params[f"fc{fc_i}.bias"])
                if fc_i < self._fc_total:
                    t = T.relu(t)
            elif layer.kind is LayerKind.SOFTMAX:
                t = T.softmax(t)
        s, d = cfg.grid_size, cfg.head_width
        return T.reshape(t, (t.shape[0], s, s, d))

    @property
    def _fc_total(self) -> int:
        return sum(1 for l in self.config.layers if l.kind is LayerKind.FULLY_CONNECTED)


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> Network:
    """Allocate and initialize all parameters deterministically from seed.

    Weights draw uniform with a Kaiming-style bound sqrt(6/fan_in) on
    hidden layers (a plain sqrt(1/fan_in) bound shrinks activations ~3x
    per layer, which underflows a 16-layer stack); the final linear layer
    uses sqrt(1/fan_in) so the head starts near neutral. Biases start at
    zero.
    """
    validate_config(config)
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    channels = 3
    flat = None
    conv_i = fc_i = 0
    fc_total = sum(1 for l in config.layers if l.kind is LayerKind.FULLY_CONNECTED)
    size = config.input_size
    for layer in config.layers:
        if layer.kind is LayerKind.CONV:
            conv_i += 1
            fan_in = channels * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.out_channels, channels, layer.kernel, layer.kernel))
            params[f"conv{conv_i}.weight"] = T.Tensor(w.astype(dtype), name=f"conv{conv_i}.weight")
            params[f"conv{conv_i}.bias"] = T.Tensor(np.zeros(layer.out_channels, dtype=dtype), name=f"conv{conv_i}.bias")
            channels = layer.out_channels
            size = (size + 2 * layer.padding - layer.kernel) // layer.stride + 1
        elif layer.kind is LayerKind.MAXPOOL:
            size = (size - layer.window) // layer.stride + 1
        elif layer.kind is LayerKind.FULLY_CONNECTED:
            fc_i += 1
            if flat is None:
                flat = channels * size * size
            bound = np.sqrt(1.0 / flat) if fc_i == fc_total else np.sqrt(6.0 / flat)
            w = rng.uniform(-bound, bound, size=(flat, layer.out_channels))
            params[f"fc{fc_i}.weight"] = T.Tensor(w.astype(dtype), name=f"fc{fc_i}.weight")
            params[f"fc{fc_i}.bias"] = T.Tensor(np.zeros(layer.out_channels, dtype=dtype), name=f"fc{fc_i}.bias")
            flat = layer.out_channels
    return Network(config, params, dtype)


# ---------------------------------------------------------------------------

def forward(network: Network, image: T.Tensor) -> T.Tensor:
    """Single-image forward pass -> raw grid prediction [S, S, head]."""
    x = image
    if x.data.ndim == 3:
        x = T.reshape(x, (1,) + tuple(x.shape))
    grid = network.forward_batch(x)
    grid.assert_finite("grid prediction")
    return T.reshape(grid, tuple(grid.shape[1:]))


def decode_predictions(grid, conf_threshold: float, *, boxes_per_cell: int = 2,
                       num_classes: int = 1) -> list[BBox]:
    """Raw [S, S, B*5+C] grid -> boxes with confidence >= threshold.

    Cell-relative centers become image coordinates: cx = (col + x)/S.
    """
    if not 0 <= conf_threshold <= 1:
        raise UsageError(f"confidence threshold must lie in [0, 1], got {conf_threshold}")
    g = grid.data if isinstance(grid, T.Tensor) else np.asarray(grid)
    if g.ndim != 3 or g.shape[0] != g.shape[1] or g.shape[2] != boxes_per_cell * 5 + num_classes:
        raise UsageError(f"grid shape {g.shape} inconsistent with B={boxes_per_cell}, classes={num_classes}")
    s = g.shape[0]
    out: list[BBox] = []
    cls_logits = g[:, :, 5 * boxes_per_cell:]
    if num_classes == 1:
        cls_prob = sigmoid(cls_logits)
    else:
        shifted = cls_logits - cls_logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        cls_prob = e / e.sum(axis=-1, keepdims=True)
    for row in range(s):
        for col in range(s):
            for b in range(boxes_per_cell):
                o = 5 * b
                conf = float(sigmoid(g[row, col, o + 4]))
                if conf < conf_threshold:
                    continue
                x = float(sigmoid(g[row, col, o]))
                y = float(sigmoid(g[row, col, o + 1]))
                w = float(g[row, col, o + 2]) ** 2
                h = float(g[row, col, o + 3]) ** 2
                cid = int(np.argmax(cls_prob[row, col]))
                out.append(BBox(cx=(col + x) / s, cy=(row + y) / s, w=w, h=h,
                                confidence=conf, class_id=cid))
    return out


def detect(network: Network, image: T.Tensor, conf_threshold: float = 0.25,
           nms_threshold: float = 0.45) -> list[BBox]:
    """forward -> decode -> non-maximum suppression."""
    grid = forward(network, image)
    cfg = network.config
    boxes = decode_predictions(grid, conf_threshold, boxes_per_cell=cfg.boxes_per_cell,
                               num_classes=cfg.num_classes)
    return nms(boxes, nms_threshold) if boxes else []
