"""Darknet-style ``.cfg`` network descriptions.

    [net]
    batch=128
    learning_rate=0.1
    height=28
    width=28
    channels=1

    [convolutional]
    filters=8
    size=3
    stride=1
    pad=1
    batch_normalize=1
    activation=leaky

    [softmax]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

ACTIVATIONS = ("leaky", "relu", "linear")


class ConfigError(ValueError):
    def __init__(self, msg, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    size: int
    stride: int = 1
    pad: int = 0
    activation: str = "leaky"
    batch_normalize: bool = False

    kind = "convolutional"


@dataclass(frozen=True)
class MaxPoolSpec:
    size: int = 2
    stride: int = 2

    kind = "maxpool"


@dataclass(frozen=True)
class ConnectedSpec:
    outputs: int
    activation: str = "linear"
    batch_normalize: bool = False

    kind = "connected"


@dataclass(frozen=True)
class SoftmaxSpec:
    kind = "softmax"


@dataclass
class NetConfig:
    layers: list
    batch_size: int = 128
    learning_rate: float = 0.1
    max_iter: int = 500
    height: int = 0
    width: int = 0
    channels: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> Optional[tuple]:
        if self.height and self.width and self.channels:
            return (self.channels, self.height, self.width)
        return None

    def validate(self) -> "NetConfig":
        if self.batch_size < 1:
            raise ConfigError("batch must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        kinds = [spec.kind for spec in self.layers]
        if kinds.count("softmax") != 1 or kinds[-1] != "softmax":
            raise ConfigError("exactly one [softmax] section is required and it must be last")
        return self


# section -> {key: (field name, parser)}
_NET_KEYS = {
    "batch": ("batch_size", int),
    "learning_rate": ("learning_rate", float),
    "max_iter": ("max_iter", int),
    "max_batches": ("max_iter", int),
    "height": ("height", int),
    "width": ("width", int),
    "channels": ("channels", int),
}


def _activation(value: str) -> str:
    if value not in ACTIVATIONS:
        raise ValueError(f"unknown activation {value!r}")
    return value


def _flag(value: str) -> bool:
    if value not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {value!r}")
    return value == "1"


_LAYER_KEYS = {
    "convolutional": {
        "filters": ("filters", int),
        "size": ("size", int),
        "stride": ("stride", int),
        "pad": ("pad", int),
        "padding": ("pad", int),
        "activation": ("activation", _activation),
        "batch_normalize": ("batch_normalize", _flag),
    },
    "maxpool": {"size": ("size", int), "stride": ("stride", int)},
    "connected": {
        "output": ("outputs", int),
        "activation": ("activation", _activation),
        "batch_normalize": ("batch_normalize", _flag),
    },
    "softmax": {},
}

_SPEC_TYPES = {
    "convolutional": ConvSpec,
    "maxpool": MaxPoolSpec,
    "connected": ConnectedSpec,
    "softmax": SoftmaxSpec,
}


def _build_layer(section: str, values: dict, line: int):
    kwargs = dict(values)
    if section == "convolutional":
        # Darknet's pad=1 means "same" padding of size // 2.
        if kwargs.get("pad"):
            kwargs["pad"] = kwargs.get("size", 1) // 2
    try:
        spec = _SPEC_TYPES[section](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}] missing required key ({exc})", line) from None
    for name in ("filters", "size", "stride", "outputs"):
        if getattr(spec, name, 1) < 1:
            raise ConfigError(f"[{section}] {name} must be >= 1", line)
    return spec


def parse_config(text: str) -> NetConfig:
    net: dict = {}
    layers: list = []
    section = None
    section_line = 0
    values: dict = {}
    seen_net = False

    def close_section():
        if section is not None and section != "net":
            layers.append(_build_layer(section, values, section_line))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            close_section()
            section = line[1:-1].strip()
            if section not in _LAYER_KEYS and section != "net":
                raise ConfigError(f"unknown section [{section}]", lineno)
            if section == "net":
                if seen_net or layers:
                    raise ConfigError("[net] must appear once, first", lineno)
                seen_net = True
            section_line = lineno
            values = {}
            continue
        if section is None:
            raise ConfigError("key outside any section", lineno)
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        keys = _NET_KEYS if section == "net" else _LAYER_KEYS[section]
        if key not in keys:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        name, conv = keys[key]
        try:
            parsed = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        (net if section == "net" else values)[name] = parsed
    close_section()
    try:
        return NetConfig(layers=layers, **net).validate()
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> NetConfig:
    with open(path) as fh:
        return parse_config(fh.read())
