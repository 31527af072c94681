"""Encoders, linear heads, and attention transforms, with per-setting wiring.

The network has one feature encoder (a small MLP for vector data or a
four-block convolutional stack for 28x28 grayscale images), one linear head
per label level, and two residual transforms g (queries) and h (memory
slots) feeding the KNN scorer. Which heads contribute to which logits
depends on the training setting:

    supervised: coarse <- MLP, fine <- MLP + KNN
    meta:       coarse <- MLP + KNN, fine <- KNN

Logits from multiple heads combine by elementwise sum. With the KNN head
ablated the fine level falls back to its MLP; with the MLP head ablated a
level keeps whatever KNN part it has.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import memory as mem
from .autodiff import Tensor

SETTINGS = ("supervised", "meta")


def norm_groups(channels: int) -> int:
    """Largest divisor of ``channels`` that is at most min(8, channels)."""
    cap = min(8, channels)
    for g in range(cap, 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the feature encoder."""

    kind: str
    input_dim: int = 0
    hidden: tuple = ()
    out_dim: int = 0
    image_size: int = 28
    in_channels: int = 1
    channels: tuple = (8, 8, 8, 8)

    @classmethod
    def mlp(cls, input_dim: int, hidden=(32,), out_dim: int = 16) -> "EncoderConfig":
        if input_dim < 1 or out_dim < 1:
            raise ValueError("input_dim and out_dim must be >= 1")
        return cls(kind="mlp", input_dim=int(input_dim),
                   hidden=tuple(int(h) for h in hidden), out_dim=int(out_dim))

    @classmethod
    def conv4(cls, image_size: int = 28, in_channels: int = 1,
              channels=(8, 8, 8, 8)) -> "EncoderConfig":
        channels = tuple(int(c) for c in channels)
        if len(channels) != 4:
            raise ValueError("conv4 takes exactly four channel counts")
        size = int(image_size)
        for _ in range(4):
            size //= 2
        if size < 1:
            raise ValueError(f"image_size {image_size} too small for four poolings")
        return cls(kind="conv4", image_size=int(image_size),
                   in_channels=int(in_channels), channels=channels,
                   out_dim=channels[-1] * size * size)

    @property
    def feature_dim(self) -> int:
        return self.out_dim


@dataclass(frozen=True)
class HeadPlan:
    """Which parts feed each logit level; parts are 'mlp' and 'knn'."""

    fine_parts: tuple
    coarse_parts: tuple


def head_plan(setting: str, use_mlp: bool = True, use_knn: bool = True) -> HeadPlan:
    """Default wiring per setting, with ablation fallbacks."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got '{setting}'")
    if setting == "supervised":
        fine = tuple(p for p, on in (("mlp", use_mlp), ("knn", use_knn)) if on)
        coarse = ("mlp",) if use_mlp else ()
    else:
        fine = ("knn",) if use_knn else (("mlp",) if use_mlp else ())
        coarse = tuple(p for p, on in (("mlp", use_mlp), ("knn", use_knn)) if on)
    if not fine:
        raise ValueError("every head plan needs at least one fine-logit part")
    if not coarse:
        raise ValueError("every head plan needs at least one coarse-logit part")
    return HeadPlan(fine, coarse)


class ModelParams:
    """All trainable tensors, created in a fixed order from one init stream.

    Linear and convolution weights draw from uniform(-1/sqrt(fan_in),
    +1/sqrt(fan_in)); biases start at zero; each attention transform's final
    layer starts at zero so g and h begin as identity maps.
    """

    def __init__(self, encoder: EncoderConfig, num_fine: int, num_coarse: int,
                 setting: str = "supervised", attention: bool = True,
                 rng: np.random.Generator | None = None):
        if setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got '{setting}'")
        if num_fine < 1 or num_coarse < 1:
            raise ValueError("need at least one fine and one coarse class")
        self.encoder = encoder
        self.num_fine = int(num_fine)
        self.num_coarse = int(num_coarse)
        self.setting = setting
        self.attention = bool(attention)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tensors: dict[str, Tensor] = {}
        self._build(rng)

    def _weight(self, rng, name: str, shape, fan_in: int, zero: bool = False):
        scale = 1.0 / np.sqrt(fan_in)
        data = np.zeros(shape) if zero else rng.uniform(-scale, scale, size=shape)
        self.tensors[name] = Tensor(data, requires_grad=True)

    def _bias(self, name: str, n: int, value: float = 0.0):
        self.tensors[name] = Tensor(np.full(n, value), requires_grad=True)

    def _build(self, rng):
        enc = self.encoder
        if enc.kind == "mlp":
            widths = (enc.input_dim,) + enc.hidden + (enc.out_dim,)
            for i in range(len(widths) - 1):
                self._weight(rng, f"encoder.W{i}", (widths[i], widths[i + 1]), widths[i])
                self._bias(f"encoder.b{i}", widths[i + 1])
        elif enc.kind == "conv4":
            c_in = enc.in_channels
            for i, c_out in enumerate(enc.channels):
                fan_in = c_in * 9
                self._weight(rng, f"encoder.conv{i}.W", (c_out, c_in, 3, 3), fan_in)
                self._bias(f"encoder.conv{i}.b", c_out)
                self._bias(f"encoder.gn{i}.gamma", c_out, 1.0)
                self._bias(f"encoder.gn{i}.beta", c_out)
                c_in = c_out
        else:
            raise ValueError(f"unknown encoder kind '{enc.kind}'")
        d = enc.feature_dim
        self._weight(rng, "coarse_mlp.W", (d, self.num_coarse), d)
        self._bias("coarse_mlp.b", self.num_coarse)
        self._weight(rng, "fine_mlp.W", (d, self.num_fine), d)
        self._bias("fine_mlp.b", self.num_fine)
        if self.attention:
            for t in ("attn_g", "attn_h"):
                self._weight(rng, f"{t}.W1", (d, d), d)
                self._bias(f"{t}.b1", d)
                self._weight(rng, f"{t}.W2", (d, d), d, zero=True)
                self._bias(f"{t}.b2", d)
                self._bias(f"{t}.gamma", d, 1.0)
                self._bias(f"{t}.beta", d)

    def encode(self, x) -> Tensor:
        """Features for a batch: (B, input_dim) vectors or (B, C, H, W) images."""
        enc = self.encoder
        if enc.kind == "mlp":
            t = ad.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x)
            if t.ndim != 2 or t.shape[1] != enc.input_dim:
                raise ValueError(f"expected (B, {enc.input_dim}) inputs, got {t.shape}")
            n_layers = len(enc.hidden) + 1
            for i in range(n_layers):
                t = ad.relu(ad.add(ad.matmul(t, self.tensors[f"encoder.W{i}"]),
                                   self.tensors[f"encoder.b{i}"]))
            return t
        arr = x if isinstance(x, Tensor) else ad.as_tensor(np.asarray(x, dtype=np.float64))
        if arr.ndim != 4 or arr.shape[1] != enc.in_channels:
            raise ValueError(
                f"expected (B, {enc.in_channels}, {enc.image_size}, {enc.image_size}) "
                f"images, got {arr.shape}")
        t = arr
        for i, c_out in enumerate(enc.channels):
            t = ad.conv2d(t, self.tensors[f"encoder.conv{i}.W"],
                          self.tensors[f"encoder.conv{i}.b"], padding=1)
            t = ad.group_norm(t, self.tensors[f"encoder.gn{i}.gamma"],
                              self.tensors[f"encoder.gn{i}.beta"], norm_groups(c_out))
            t = ad.relu(t)
            t = ad.maxpool2d(t, 2)
        return ad.flatten_rows(t)

    def mlp_logits(self, head: str, features) -> Tensor:
        if head not in ("fine", "coarse"):
            raise ValueError(f"head must be 'fine' or 'coarse', got '{head}'")
        f = ad.as_tensor(features)
        w = self.tensors[f"{head}_mlp.W"]
        if f.ndim != 2 or f.shape[1] != w.shape[0]:
            raise ValueError(f"features {f.shape} do not match head input {w.shape[0]}")
        return ad.add(ad.matmul(f, w), self.tensors[f"{head}_mlp.b"])

    def _residual_transform(self, prefix: str, t: Tensor) -> Tensor:
        h1 = ad.relu(ad.add(ad.matmul(t, self.tensors[f"{prefix}.W1"]),
                            self.tensors[f"{prefix}.b1"]))
        h2 = ad.add(ad.matmul(h1, self.tensors[f"{prefix}.W2"]),
                    self.tensors[f"{prefix}.b2"])
        n = ad.group_norm(h2, self.tensors[f"{prefix}.gamma"],
                          self.tensors[f"{prefix}.beta"],
                          norm_groups(self.encoder.feature_dim))
        return ad.add(n, t)

    def transform_query(self, t) -> Tensor:
        """g: query-side attention transform (identity when attention is off)."""
        t = ad.as_tensor(t)
        return self._residual_transform("attn_g", t) if self.attention else t

    def transform_slots(self, t) -> Tensor:
        """h: slot-side attention transform (identity when attention is off)."""
        t = ad.as_tensor(t)
        return self._residual_transform("attn_h", t) if self.attention else t

    def named_tensors(self, prefixes=None) -> dict:
        if prefixes is None:
            return dict(self.tensors)
        return {n: t for n, t in self.tensors.items()
                if any(n.startswith(p) for p in prefixes)}

    def set_trainable(self, prefixes, flag: bool):
        for name, t in self.named_tensors(prefixes).items():
            t.requires_grad = flag

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, arrays: dict):
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, t in self.tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter '{name}': shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def combine_logits(parts) -> Tensor:
    """Elementwise sum of logit tensors; shapes must agree."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one logit tensor to combine")
    out = ad.as_tensor(parts[0])
    for p in parts[1:]:
        p = ad.as_tensor(p)
        if p.shape != out.shape:
            raise ValueError(f"cannot combine logits of shapes {out.shape} and {p.shape}")
        out = ad.add(out, p)
    return out


def forward_full(params: ModelParams, x, *, plan: HeadPlan,
                 fine_slots=None, coarse_slots=None, k: int = 1,
                 metric: str = "dot_cosine",
                 fine_ids=None, coarse_ids=None):
    """Fine and coarse logits for a batch under a head plan.

    ``fine_slots``/``coarse_slots``: per-class slot matrices for the KNN
    parts (required whenever the plan uses them). ``fine_ids``/``coarse_ids``
    restrict the MLP heads to a class subset (columns of the global heads),
    e.g. the classes of one episode; the returned logits then live in that
    local space. Returns (fine_logits, coarse_logits).
    """
    f = params.encode(x)
    g, h = params.transform_query, params.transform_slots

    def mlp_part(head, ids):
        logits = params.mlp_logits(head, f)
        return logits if ids is None else ad.take_cols(logits, np.asarray(ids, dtype=np.intp))

    fine_parts = []
    for part in plan.fine_parts:
        if part == "mlp":
            fine_parts.append(mlp_part("fine", fine_ids))
        else:
            if fine_slots is None:
                raise ValueError("plan uses a fine KNN part but fine_slots is None")
            fine_parts.append(mem.knn_logits(f, fine_slots, g, h, metric, k))
    coarse_parts = []
    for part in plan.coarse_parts:
        if part == "mlp":
            coarse_parts.append(mlp_part("coarse", coarse_ids))
        else:
            if coarse_slots is None:
                raise ValueError("plan uses a coarse KNN part but coarse_slots is None")
            coarse_parts.append(mem.knn_logits(f, coarse_slots, g, h, metric, k))
    return combine_logits(fine_parts), combine_logits(coarse_parts)
