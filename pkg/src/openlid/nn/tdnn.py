"""Time-delay neural network with posterior and representation outputs."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, EmptyInput, RegistryMismatch, ShapeError
from . import layers as L


@dataclass(frozen=True)
class TdnnConfig:
    input_dim: int = 16
    layer_dims: tuple[int, ...] = (256, 256, 256, 256, 256, 32)
    contexts: tuple[int, ...] = (3, 3, 3, 1, 1, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    strides: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    bn_eps: float = 1e-5

    def __post_init__(self):
        n = len(self.layer_dims)
        if n < 2:
            raise ConfigError("a TDNN needs at least two layers")
        for name in ("contexts", "dilations", "strides"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} must have one entry per layer")
        if any(s != 1 for s in self.strides):
            raise ConfigError("only stride 1 is supported")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def representation_dim(self) -> int:
        return self.layer_dims[-2]

    def output_length(self, t: int) -> int:
        for c, d in zip(self.contexts, self.dilations):
            t = L.conv_out_len(t, c, d)
        return t

    def representation_length(self, t: int) -> int:
        for c, d in zip(self.contexts[:-1], self.dilations[:-1]):
            t = L.conv_out_len(t, c, d)
        return t

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TdnnConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def small(cls, input_dim: int, layer_dims, contexts) -> "TdnnConfig":
        n = len(layer_dims)
        return cls(input_dim, tuple(layer_dims), tuple(contexts), (1,) * n, (1,) * n)


@dataclass
class TdnnModel:
    """Parameters are kept in ``params`` (trainable) and ``buffers``
    (batch-norm running statistics), both in declaration order."""

    config: TdnnConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    registry_hash: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: TdnnConfig, seed: int = 0, registry_hash: str = "",
             dtype=np.float32) -> "TdnnModel":
        """He-uniform conv weights, zero biases, unit BN scale and zero shift."""
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        in_dim = config.input_dim
        for i, (out_dim, ctx) in enumerate(zip(config.layer_dims, config.contexts)):
            fan_in = ctx * in_dim
            bound = np.sqrt(6.0 / fan_in)
            params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (ctx, in_dim, out_dim)).astype(dtype)
            params[f"conv{i}.bias"] = np.zeros(out_dim, dtype=dtype)
            params[f"bn{i}.gamma"] = np.ones(out_dim, dtype=dtype)
            params[f"bn{i}.beta"] = np.zeros(out_dim, dtype=dtype)
            buffers[f"bn{i}.running_mean"] = np.zeros(out_dim, dtype=dtype)
            buffers[f"bn{i}.running_var"] = np.ones(out_dim, dtype=dtype)
            in_dim = out_dim
        return cls(config, params, buffers, registry_hash)

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_dims)

    @property
    def dtype(self):
        return self.params["conv0.weight"].dtype

    def decay_mask(self) -> dict[str, bool]:
        """Weight decay applies to convolution weights only."""
        return {name: name.endswith(".weight") for name in self.params}

    def check_registry(self, registry_hash: str) -> None:
        if self.registry_hash and registry_hash != self.registry_hash:
            raise RegistryMismatch(
                "model was trained for a different in-set language ordering "
                f"({self.registry_hash[:12]} != {registry_hash[:12]})"
            )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for store in (self.params, self.buffers):
            for name, arr in store.items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self) -> "TdnnModel":
        return TdnnModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.registry_hash,
            dict(self.extra),
        )


def count_parameters(model_or_config) -> int:
    """Trainable element count: conv weights and biases plus BN scale/shift."""
    if isinstance(model_or_config, TdnnModel):
        return int(sum(p.size for p in model_or_config.params.values()))
    cfg = model_or_config
    total, in_dim = 0, cfg.input_dim
    for out_dim, ctx in zip(cfg.layer_dims, cfg.contexts):
        total += ctx * in_dim * out_dim + out_dim + 2 * out_dim
        in_dim = out_dim
    return total


def _as_batch(features, model: TdnnModel) -> tuple[np.ndarray, bool]:
    x = getattr(features, "frames", features)
    x = np.asarray(x, dtype=model.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.config.input_dim:
        raise ShapeError(f"expected (..., T, {model.config.input_dim}) features, got {x.shape}")
    if model.config.output_length(x.shape[1]) < 1:
        raise ShapeError(f"{x.shape[1]} frames are too few for the network context")
    return x, single


def forward_logits(model: TdnnModel, x: np.ndarray, *, train: bool, momentum: float = 0.1,
                   keep_cache: bool = False):
    """Run the stack on a (B, T, D) batch.

    Returns ``(logits, representation, caches)``: logits are the batch-normed
    outputs of the last layer, representation the post-ReLU activations of
    the layer before it.
    """
    cfg = model.config
    caches = []
    h = x
    rep = None
    for i in range(model.n_layers):
        p = model.params
        h, c_conv = L.conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], cfg.dilations[i])
        h, c_bn = L.batchnorm_forward(
            h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
            model.buffers[f"bn{i}.running_mean"], model.buffers[f"bn{i}.running_var"],
            train=train, eps=cfg.bn_eps, momentum=momentum,
        )
        c_relu = None
        if i < model.n_layers - 1:
            h, c_relu = L.relu_forward(h)
        if i == model.n_layers - 2:
            rep = h
        if keep_cache:
            caches.append((c_conv, c_bn, c_relu))
        else:
            del c_conv, c_bn
    return h, rep, caches


def backward(model: TdnnModel, dlogits: np.ndarray, caches) -> dict[str, np.ndarray]:
    grads = {}
    g = dlogits
    for i in reversed(range(model.n_layers)):
        c_conv, c_bn, c_relu = caches[i]
        if c_relu is not None:
            g = L.relu_backward(g, c_relu)
        g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = L.batchnorm_backward(g, c_bn)
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = L.conv_backward(g, c_conv)
    return {name: grads[name] for name in model.params}


def forward(model: TdnnModel, features, mode: str = "eval", *, registry_hash: str | None = None,
            momentum: float = 0.1) -> dict[str, np.ndarray]:
    """Posterior and representation frames for one matrix (T, D) or a batch.

    ``mode="train"`` normalizes with batch statistics (and updates the
    running averages); ``"eval"`` uses the frozen running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    if registry_hash is not None:
        model.check_registry(registry_hash)
    x, single = _as_batch(features, model)
    logits, rep, _ = forward_logits(model, x, train=mode == "train", momentum=momentum)
    post = L.softmax(logits.astype(np.float64))
    if single:
        post, rep = post[0], rep[0]
    return {"posterior_frames": post, "representation_frames": rep}


def average_posterior(posterior_frames) -> np.ndarray:
    """Time-average of frame posteriors (rows of a (T', C) matrix)."""
    p = np.asarray(posterior_frames, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EmptyInput("need at least one posterior frame")
    return p.mean(axis=0)
