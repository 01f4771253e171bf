"""Convolutional embedding network and the temporal attention branch."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor

ATTENTION_NORMS = ("softmax", "sigmoid", "none")


@dataclass
class BackboneConfig:
    channels: tuple = (64, 128, 256)
    in_channels: int = 1
    kernel: int = 3
    pool: int = 4
    batchnorm: bool = True
    input_shape: tuple = (128, 160)
    # attention branch
    attention: bool = False
    att_channels: int = 256
    att_norm: str = "softmax"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"need at least one block with positive channels, got {self.channels}")
        if self.att_norm not in ATTENTION_NORMS:
            raise ValueError(f"unknown attention normalization {self.att_norm!r}")
        if self.att_channels <= 0:
            raise ValueError("att_channels must be positive")

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    def output_shape(self) -> tuple:
        """(M, F, T) after the conv stack, before the frequency average."""
        f, t = self.input_shape
        for _ in self.channels:
            f, t = _floor_pool(f, self.pool), _floor_pool(t, self.pool)
        return self.channels[-1], f, t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["input_shape"] = list(self.input_shape)
        return d


def _floor_pool(n: int, k: int) -> int:
    return n // k if n >= k else 1


def param_count(cfg: BackboneConfig) -> int:
    """Number of trainable scalars implied by ``cfg``."""
    k2 = cfg.kernel * cfg.kernel
    total, cin = 0, cfg.in_channels
    for cout in cfg.channels:
        total += cin * cout * k2 + cout
        if cfg.batchnorm:
            total += 2 * cout
        cin = cout
    if cfg.attention:
        ca = cfg.att_channels
        total += ca * k2 + ca  # 3×3 conv on the 1×M×T map
        if cfg.batchnorm:
            total += 2 * ca
        total += ca + 1  # 1×1 projection to one channel
    return total


class Backbone:
    """Embedding stack f_cnn plus the optional attention branch f_att.

    Parameters live in ``self.params`` (name -> Tensor); batchnorm running
    statistics live in ``self.bn`` and are part of the checkpoint.
    """

    def __init__(self, cfg: Optional[BackboneConfig] = None, seed: int = 0):
        self.cfg = cfg or BackboneConfig()
        self.training = True
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        rng = np.random.default_rng(seed)
        cin = self.cfg.in_channels
        for i, cout in enumerate(self.cfg.channels):
            self._conv(f"block{i}.conv", cin, cout, self.cfg.kernel, rng)
            if self.cfg.batchnorm:
                self._bn(f"block{i}.bn", cout)
            cin = cout
        if self.cfg.attention:
            ca = self.cfg.att_channels
            self._conv("att.conv", 1, ca, self.cfg.kernel, rng)
            if self.cfg.batchnorm:
                self._bn("att.bn", ca)
            self._conv("att.proj", ca, 1, 1, rng)

    def _conv(self, name, cin, cout, k, rng):
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor(rng.normal(0, std, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.bn[name] = BatchNormState(c, self.cfg.bn_momentum, self.cfg.bn_eps)

    # -- mode ------------------------------------------------------------------------
    def train(self) -> "Backbone":
        self.training = True
        return self

    def eval(self) -> "Backbone":
        self.training = False
        return self

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ---------------------------------------------------------------------
    def _block(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        x = T.conv2d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"])
        if self.cfg.batchnorm:
            x = T.batchnorm(x, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn[f"{name}.bn"], self.training)
        return T.relu(x)

    def embed(self, spec) -> Tensor:
        """Log-mel input (``F×T`` or ``N×F×T`` or ``N×1×F×T``) to feature maps ``N×M×T'``.

        A single unbatched spectrogram gives an unbatched ``M×T'`` map.
        """
        x = T.as_tensor(spec)
        single = x.ndim == 2
        if x.ndim == 2:
            x = x.reshape((1, 1) + x.shape)
        elif x.ndim == 3:
            x = x.reshape((x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or tuple(x.shape[2:]) != self.cfg.input_shape:
            raise ShapeError(
                f"backbone expects input {self.cfg.input_shape} with {self.cfg.in_channels} channel(s), got {spec_shape(spec)}"
            )
        for i in range(self.cfg.n_blocks):
            x = T.maxpool2d(self._block(x, f"block{i}"), self.cfg.pool, ceil_mode=False)
        feat = x.mean(axis=2)
        return feat.reshape(feat.shape[1:]) if single else feat

    def attention_logits(self, feat: Tensor) -> Tensor:
        if not self.cfg.attention:
            raise RuntimeError("this backbone has no attention branch")
        single = feat.ndim == 2
        x = feat.reshape((1 if single else feat.shape[0], 1) + feat.shape[-2:])
        x = self._block(x, "att")
        x = T.conv2d(x, self.params["att.proj.weight"], self.params["att.proj.bias"])
        logits = x.mean(axis=(1, 2))
        return logits.reshape(logits.shape[1:]) if single else logits

    def attend(self, feat: Tensor) -> Tensor:
        """Attention weights over the time segments of ``feat`` (``M×T`` or ``N×M×T``)."""
        logits = self.attention_logits(feat)
        if self.cfg.att_norm == "softmax":
            return T.softmax(logits, axis=-1)
        if self.cfg.att_norm == "sigmoid":
            return T.sigmoid(logits)
        return logits

    # -- state -----------------------------------------------------------------------
    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter and batchnorm statistic, as float32 arrays."""
        out = OrderedDict((k, v.data.astype(np.float32)) for k, v in self.params.items())
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean.astype(np.float32)
            out[f"{name}.running_var"] = st.running_var.astype(np.float32)
            out[f"{name}.initialized"] = np.array(float(st.initialized), dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing, extra = expected - set(arrays), set(arrays) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arrays[k], dtype=p.dtype)
        for name, st in self.bn.items():
            st.running_mean = arrays[f"{name}.running_mean"].astype(np.float32)
            st.running_var = arrays[f"{name}.running_var"].astype(np.float32)
            st.initialized = bool(arrays[f"{name}.initialized"])


def spec_shape(spec) -> tuple:
    return tuple(getattr(spec, "shape", np.shape(spec)))
