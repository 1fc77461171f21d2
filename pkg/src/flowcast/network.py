"""Velocity-tendency network ``f_conv + gamma * f_att`` and the Gaussian emission head.

Both ResNets use 3x3 convolutions with circular longitude / reflective
latitude padding. The last stage of every network and the post-attention
projection start at zero, so an untrained model is pure advection with
frozen velocity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tc
from .embeddings import N_FEATURES
from .tensor import Tensor

SIGMA_FLOOR = 1e-6
CHECKPOINT_FORMAT = "flowcast-params/1"


@dataclass
class ModelConfig:
    K: int = 5
    n_features: int = N_FEATURES
    conv_blocks: tuple[int, ...] = (5, 3, 2)
    conv_widths: tuple[int, ...] = (32, 16)  # last stage width is 2K
    emission_blocks: tuple[int, ...] = (3, 2, 2)
    emission_widths: tuple[int, ...] = (32, 16)  # last stage width is 2K
    att_latent: int = 16
    kv_stride: int = 2
    use_attention: bool = True
    activation: str = "elu"
    dropout: float = 0.1
    dropout_in_integrand: bool = False
    gamma_init: float = 1.0
    pad_mode: str = "circular_x_reflect_y"

    def __post_init__(self):
        self.conv_blocks = tuple(self.conv_blocks)
        self.conv_widths = tuple(self.conv_widths)
        self.emission_blocks = tuple(self.emission_blocks)
        self.emission_widths = tuple(self.emission_widths)
        if len(self.conv_widths) != len(self.conv_blocks) - 1:
            raise ValueError("conv_widths must list every stage width except the output stage")
        if len(self.emission_widths) != len(self.emission_blocks) - 1:
            raise ValueError("emission_widths must list every stage width except the output stage")
        if self.activation not in tc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def full_scale(cls, K: int = 5, **kw) -> "ModelConfig":
        """Full-size widths (128, 64) for real reanalysis grids; the defaults are a small CPU model."""
        base = dict(conv_widths=(128, 64), emission_widths=(128, 64), att_latent=128)
        base.update(kw)
        return cls(K=K, **base)

    @property
    def velocity_in(self) -> int:
        return 5 * self.K + self.n_features

    @property
    def emission_in(self) -> int:
        return self.K + self.n_features

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class EmissionOutput:
    mu: Tensor
    sigma: Tensor


@dataclass
class NetParams:
    """Named trainable tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def count_by_group(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, t in self.tensors.items():
            group = name.split(".", 1)[0]
            out[group] = out.get(group, 0) + t.size
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                       for k, v in self.tensors.items()})

    @property
    def gamma(self) -> Tensor:
        return self.tensors["gamma"]

    # -- checkpoint I/O -----------------------------------------------
    def save(self, path) -> Path:
        """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64)."""
        path = Path(path)
        blob_path = path.with_suffix(path.suffix + ".bin")
        entries, offset, chunks = [], 0, []
        for name, t in self.tensors.items():
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": t.size})
            offset += t.size
            chunks.append(t.data.reshape(-1))
        blob = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
        blob_path.write_bytes(blob.tobytes())
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "dtype": "<f8",
            "blob": blob_path.name,
            "config": self.config.to_dict(),
            "n_params": self.count(),
            "params": entries,
        }
        path.write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "NetParams":
        path = Path(path)
        manifest = json.loads(path.read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        if manifest.get("dtype") != "<f8":
            raise ValueError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
        blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")
        total = sum(e["count"] for e in manifest["params"])
        if blob.size != total:
            raise ValueError(f"{path}: blob holds {blob.size} values, manifest expects {total}")
        tensors = {}
        for e in manifest["params"]:
            arr = blob[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
            tensors[e["name"]] = Tensor(arr.copy(), requires_grad=True, name=e["name"])
        return cls(ModelConfig.from_dict(manifest["config"]), tensors)


# ---------------------------------------------------------------------------
# construction


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(store: dict, rng, name: str, cin: int, cout: int, k: int, zero: bool = False,
              bias: bool = True) -> None:
    fan_in = cin * k * k
    w = np.zeros((cout, cin, k, k)) if zero else _uniform(rng, (cout, cin, k, k), fan_in)
    store[f"{name}.w"] = w
    if bias:
        store[f"{name}.b"] = np.zeros(cout) if zero else _uniform(rng, (cout,), fan_in)


def _add_resnet(store: dict, rng, prefix: str, cin: int, blocks, widths) -> None:
    last = len(blocks) - 1
    for s, (nb, width) in enumerate(zip(blocks, widths)):
        for j in range(nb):
            zero = s == last
            name = f"{prefix}.s{s}.b{j}"
            _add_conv(store, rng, f"{name}.conv1", cin, width, 3)
            _add_conv(store, rng, f"{name}.conv2", width, width, 3, zero=zero)
            if cin != width:
                _add_conv(store, rng, f"{name}.proj", cin, width, 1, zero=zero, bias=False)
            cin = width


def init_params(config: ModelConfig, rng: np.random.Generator) -> NetParams:
    """Uniform(+-1/sqrt(fan_in)) hidden weights; output stages zero."""
    out = 2 * config.K
    store: dict[str, np.ndarray] = {}
    _add_resnet(store, rng, "conv", config.velocity_in, config.conv_blocks,
                config.conv_widths + (out,))
    if config.use_attention:
        c, cl = config.velocity_in, config.att_latent
        for net in ("att.query", "att.key", "att.value"):
            _add_conv(store, rng, f"{net}.l0", c, cl, 3)
            _add_conv(store, rng, f"{net}.l1", cl, cl, 3)
        _add_conv(store, rng, "att.post", cl, out, 1, zero=True)
        store["gamma"] = np.array(config.gamma_init, dtype=float)
    _add_resnet(store, rng, "emission", config.emission_in, config.emission_blocks,
                config.emission_widths + (out,))
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in store.items()}
    return NetParams(config, tensors)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class RunMode:
    training: bool = False
    rng: np.random.Generator | None = None


EVAL = RunMode()


def _conv(x, params: NetParams, name: str, stride: int = 1) -> Tensor:
    b = params.tensors.get(f"{name}.b")
    return tc.conv2d(x, params[f"{name}.w"], b, stride=stride, pad_mode=params.config.pad_mode)


def resnet_forward(x, params: NetParams, prefix: str, blocks, dropout: float,
                   mode: RunMode = EVAL) -> Tensor:
    act = tc.ACTIVATIONS[params.config.activation]
    h = x
    for s, nb in enumerate(blocks):
        for j in range(nb):
            name = f"{prefix}.s{s}.b{j}"
            r = _conv(act(h), params, f"{name}.conv1")
            r = tc.dropout(act(r), dropout, mode.rng, mode.training)
            r = _conv(r, params, f"{name}.conv2")
            shortcut = _conv(h, params, f"{name}.proj") if f"{name}.proj.w" in params else h
            h = shortcut + r
    return h


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return tc.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return tc.reshape(x, x.shape[1:]) if squeeze else x


def velocity_inputs(u, grad_u, v, psi) -> Tensor:
    """Stack ``[u, du/dx, du/dy, v_x, v_y, psi]`` into ``[N, 5K+C, H, W]``.

    ``grad_u`` is a pair ``(du/dx, du/dy)``; ``v`` is ``[N, K, 2, H, W]``.
    """
    u, v, psi = tc.as_tensor(u), tc.as_tensor(v), tc.as_tensor(psi)
    dudx, dudy = grad_u
    parts = [u, dudx, dudy, v[..., 0, :, :], v[..., 1, :, :]]
    if psi.ndim == u.ndim - 1:
        psi = tc.broadcast_to(psi, u.shape[:-3] + psi.shape)
    return tc.concat(parts + [psi], axis=-3)


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.shape[-3] != expected:
        raise ValueError(f"{what}: expected {expected} input channels, got {x.shape[-3]}")


def f_conv_forward(x, params: NetParams, mode: RunMode = EVAL) -> Tensor:
    """Local ResNet on stacked inputs ``[N, 5K+C, H, W]`` -> ``[N, 2K, H, W]``."""
    cfg = params.config
    x, squeeze = _batched(tc.as_tensor(x))
    _check_channels(x, cfg.velocity_in, "f_conv")
    rate = cfg.dropout if cfg.dropout_in_integrand else 0.0
    return _unbatch(resnet_forward(x, params, "conv", cfg.conv_blocks, rate, mode), squeeze)


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T) v`` on ``[N, L, C]``, ``[N, M, C]``, ``[N, M, Cv]``; returns (out, weights)."""
    weights = tc.softmax(q @ tc.transpose(k, (0, 2, 1)), axis=-1)
    return weights @ v, weights


def f_att_forward(x, params: NetParams) -> Tensor:
    """Global attention over all grid positions -> ``[N, 2K, H, W]``.

    Keys and values come from two stride-``kv_stride`` convolutions, queries
    from two stride-1 convolutions. No positional encoding: the feature
    channels already carry position.
    """
    cfg = params.config
    act = tc.ACTIVATIONS[cfg.activation]
    x, squeeze = _batched(tc.as_tensor(x))
    _check_channels(x, cfg.velocity_in, "f_att")
    n, _, h, w = x.shape
    s = cfg.kv_stride
    q = _conv(act(_conv(x, params, "att.query.l0")), params, "att.query.l1")
    k = _conv(act(_conv(x, params, "att.key.l0", s)), params, "att.key.l1", s)
    v = _conv(act(_conv(x, params, "att.value.l0", s)), params, "att.value.l1", s)
    cl = cfg.att_latent
    m = k.shape[-2] * k.shape[-1]
    q = tc.transpose(tc.reshape(q, (n, cl, h * w)), (0, 2, 1))
    k = tc.transpose(tc.reshape(k, (n, cl, m)), (0, 2, 1))
    v = tc.transpose(tc.reshape(v, (n, cl, m)), (0, 2, 1))
    beta, _ = dot_product_attention(q, k, v)
    beta = tc.reshape(tc.transpose(beta, (0, 2, 1)), (n, cl, h, w))
    return _unbatch(_conv(beta, params, "att.post"), squeeze)


def velocity_tendency(x, params: NetParams, mode: RunMode = EVAL) -> Tensor:
    """``f_conv(x) + gamma * f_att(x)`` on stacked inputs."""
    out = f_conv_forward(x, params, mode)
    if params.config.use_attention:
        out = out + params.gamma * f_att_forward(x, params)
    return out


def emission_forward(u, psi, params: NetParams, mode: RunMode = EVAL) -> EmissionOutput:
    """Bias ``mu`` and scale ``sigma = softplus(.) + 1e-6`` from ``[u, psi]``."""
    cfg = params.config
    u, psi = tc.as_tensor(u), tc.as_tensor(psi)
    if psi.ndim == u.ndim - 1 and u.ndim == 4:
        psi = tc.broadcast_to(psi, u.shape[:1] + psi.shape)
    x = tc.concat([u, psi], axis=-3)
    x, squeeze = _batched(x)
    _check_channels(x, cfg.emission_in, "emission")
    out = resnet_forward(x, params, "emission", cfg.emission_blocks, cfg.dropout, mode)
    K = cfg.K
    mu = out[:, :K]
    sigma = tc.softplus(out[:, K:]) + SIGMA_FLOOR
    return EmissionOutput(_unbatch(mu, squeeze), _unbatch(sigma, squeeze))
