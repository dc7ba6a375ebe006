"""Layer specs, the three-part model, and its forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, conv2d, mean_pool2d, softmax


@dataclass(frozen=True)
class Affine:
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int = 3


@dataclass(frozen=True)
class MeanPool2d:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


_LAYER_KINDS = {"affine": Affine, "relu": ReLU, "tanh": Tanh, "conv2d": Conv2d, "pool": MeanPool2d, "flatten": Flatten}
_KIND_NAMES = {v: k for k, v in _LAYER_KINDS.items()}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    try:
        return _LAYER_KINDS[kind](**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def layer_to_dict(layer):
    out = {"kind": _KIND_NAMES[type(layer)]}
    out.update(layer.__dict__)
    return out


@dataclass(frozen=True)
class Architecture:
    """Feature extractor layer list plus linear-softmax heads.

    ``input_shape`` is ``(D,)`` for flat data or ``(C, H, W)`` for images. The
    extractor must end in a flat ``d``-dimensional output. The label predictor
    maps ``R^d`` to ``C`` classes and the style discriminator maps ``R^d`` to
    ``S`` styles, both affine followed by softmax.
    """

    input_shape: tuple
    extractor: tuple
    n_classes: int
    n_styles: int = 2
    taps: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "extractor", tuple(self.extractor))
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_styles < 1:
            raise ConfigError("n_styles must be >= 1")
        shapes = self.layer_shapes()
        if len(shapes[-1]) != 1:
            raise ConfigError(f"extractor must end flat, ends with shape {shapes[-1]}")
        if self.taps is None:
            object.__setattr__(self, "taps", self._default_taps())
        else:
            object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))

    @property
    def feature_dim(self):
        return self.layer_shapes()[-1][0]

    def layer_shapes(self):
        """Output shape (without batch) after every extractor layer."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.extractor):
            if isinstance(layer, Affine):
                if len(shape) != 1:
                    raise ShapeError(f"layer {i} (affine) needs flat input, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (conv2d) needs (C,H,W) input, got {shape}")
                c, h, w = shape
                if layer.kernel > min(h, w):
                    raise ShapeError(f"layer {i} (conv2d) kernel {layer.kernel} exceeds {h}x{w}")
                shape = (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
            elif isinstance(layer, MeanPool2d):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (pool) needs (C,H,W) input, got {shape}")
                c, h, w = shape
                if h < layer.size or w < layer.size:
                    raise ShapeError(f"layer {i} (pool) window exceeds {h}x{w}")
                shape = (c, h // layer.size, w // layer.size)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, (ReLU, Tanh)):
                pass
            else:
                raise ConfigError(f"layer {i}: unsupported layer {layer!r}")
            shapes.append(shape)
        return shapes

    def _default_taps(self):
        # output of the first two nonlinearities (end of the first two blocks)
        relus = [i for i, layer in enumerate(self.extractor) if isinstance(layer, ReLU)]
        if relus:
            return tuple(relus[:2])
        return (len(self.extractor) - 1,)

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "extractor": [layer_to_dict(l) for l in self.extractor],
            "n_classes": self.n_classes,
            "n_styles": self.n_styles,
            "taps": list(self.taps),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["extractor"] = tuple(layer_from_dict(l) for l in d.get("extractor", ()))
        return cls(**d)


def mlp_architecture(input_dim, hidden=(16,), feature_dim=8, n_classes=2, n_styles=2):
    layers = []
    for h in hidden:
        layers += [Affine(h), ReLU()]
    layers.append(Affine(feature_dim))
    return Architecture((input_dim,), tuple(layers), n_classes, n_styles)


def conv_architecture(input_shape=(3, 16, 16), channels=(4, 8), feature_dim=8, n_classes=2, n_styles=2,
                      bounded=True):
    """Two conv/ReLU/pool blocks, then an affine map to ``feature_dim``.

    ``bounded`` appends a tanh so features stay in [-1, 1]; without it the
    reversed discriminator loss can be driven up by inflating feature norms.
    """
    c1, c2 = channels
    layers = (
        Conv2d(c1, 3), ReLU(), MeanPool2d(2),
        Conv2d(c2, 3), ReLU(), MeanPool2d(2),
        Flatten(), Affine(feature_dim),
    ) + ((Tanh(),) if bounded else ())
    return Architecture(tuple(input_shape), layers, n_classes, n_styles)


@dataclass
class ModelParams:
    """Disjoint parameter sets: extractor, label predictor, style discriminator."""

    theta_f: dict = field(default_factory=dict)
    theta_y: dict = field(default_factory=dict)
    theta_s: dict = field(default_factory=dict)

    def groups(self):
        return {"theta_f": self.theta_f, "theta_y": self.theta_y, "theta_s": self.theta_s}

    def all_tensors(self):
        for group in (self.theta_f, self.theta_y, self.theta_s):
            yield from group.values()

    def zero_grad(self):
        for t in self.all_tensors():
            t.grad = None

    def copy(self):
        return ModelParams(
            *({k: Tensor(v.data.copy(), requires_grad=True, name=v.name) for k, v in g.items()}
              for g in (self.theta_f, self.theta_y, self.theta_s))
        )

    def state_arrays(self):
        return {f"{gname}.{k}": v.data for gname, g in self.groups().items() for k, v in g.items()}


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    theta_f = {}
    shape = arch.input_shape
    for i, (layer, out_shape) in enumerate(zip(arch.extractor, arch.layer_shapes())):
        if isinstance(layer, Affine):
            n_in = shape[0]
            theta_f[f"l{i}.W"] = _param(_glorot(rng, n_in, layer.out_features, (n_in, layer.out_features)), f"l{i}.W")
            theta_f[f"l{i}.b"] = _param(np.zeros(layer.out_features), f"l{i}.b")
        elif isinstance(layer, Conv2d):
            c_in, k = shape[0], layer.kernel
            fan_in, fan_out = c_in * k * k, layer.out_channels * k * k
            theta_f[f"l{i}.W"] = _param(_glorot(rng, fan_in, fan_out, (layer.out_channels, c_in, k, k)), f"l{i}.W")
            theta_f[f"l{i}.b"] = _param(np.zeros(layer.out_channels), f"l{i}.b")
        shape = out_shape
    d = arch.feature_dim
    theta_y = {
        "W": _param(_glorot(rng, d, arch.n_classes, (d, arch.n_classes)), "y.W"),
        "b": _param(np.zeros(arch.n_classes), "y.b"),
    }
    theta_s = {
        "W": _param(_glorot(rng, d, arch.n_styles, (d, arch.n_styles)), "s.W"),
        "b": _param(np.zeros(arch.n_styles), "s.b"),
    }
    return ModelParams(theta_f, theta_y, theta_s)


def extract(params, arch, x, return_layers=False):
    """Run the feature extractor.

    Returns the ``(batch, d)`` features, plus the list of every layer output
    when ``return_layers`` is set.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 2 or tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeError(f"input: expected (batch, {', '.join(map(str, arch.input_shape))}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("input: empty batch")
    h = x
    outputs = []
    for i, layer in enumerate(arch.extractor):
        if isinstance(layer, Affine):
            h = h @ params.theta_f[f"l{i}.W"] + params.theta_f[f"l{i}.b"]
        elif isinstance(layer, Conv2d):
            h = conv2d(h, params.theta_f[f"l{i}.W"], params.theta_f[f"l{i}.b"])
        elif isinstance(layer, ReLU):
            h = h.relu()
        elif isinstance(layer, Tanh):
            h = h.tanh()
        elif isinstance(layer, MeanPool2d):
            h = mean_pool2d(h, layer.size)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        outputs.append(h)
    if return_layers:
        return h, outputs
    return h


def head_logits(head, features):
    if features.ndim != 2 or features.shape[1] != head["W"].shape[0]:
        raise ShapeError(f"head: features {features.shape} vs weight {head['W'].shape}")
    return features @ head["W"] + head["b"]


def forward(params, arch, x):
    """Features and class probabilities for a batch."""
    features = extract(params, arch, x)
    probs = softmax(head_logits(params.theta_y, features))
    return features, probs
