"""Layers, autoregressive masks, the parameter store and the Adamax optimizer."""
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EvenKernel, NonFiniteGradient, ShapeMismatch


class ParameterStore:
    """Named trainable tensors plus their Adamax slots.

    Names iterate in lexicographic order so that serialization and optimizer
    updates never depend on construction order.
    """

    def __init__(self, seed: int = 0, dtype=None):
        self.seed = seed
        self.dtype = np.dtype(dtype or ad.get_default_dtype())
        self._rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.slots: Dict[str, Dict[str, object]] = {}

    def add(self, name: str, shape: Sequence[int], init: str = "he", fan_in: Optional[int] = None,
            value: float = 0.0, gain: float = 1.0) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "he":
            fan_in = fan_in or int(np.prod(shape[:-1])) or 1
            bound = gain * np.sqrt(6.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "constant":
            data = np.full(shape, value)
        else:
            raise ValueError(f"unknown init {init!r}")
        param = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = param
        self.slots[name] = {"m": np.zeros(shape, self.dtype), "u": np.zeros(shape, self.dtype), "t": 0}
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return [(name, self.params[name]) for name in self]

    def shape_table(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterStore) or list(self) != list(other):
            return False
        for name in self:
            if not np.array_equal(self.params[name].data, other.params[name].data):
                return False
            a, b = self.slots[name], other.slots[name]
            if a["t"] != b["t"] or not (np.array_equal(a["m"], b["m"]) and np.array_equal(a["u"], b["u"])):
                return False
        return True

    __hash__ = None


@dataclass(frozen=True)
class MaskSpec:
    """Autoregressive kernel mask over a raster scan with R, G, B sub-pixels.

    Channels are assigned to colour groups 0, 1, 2. With ``in_groups`` or
    ``out_groups`` left as None the channels are split into three contiguous
    blocks. Type "A" lets the centre tap see strictly earlier groups, type "B"
    also the same group.
    """

    mask_type: str
    kernel: Tuple[int, int]
    in_groups: Optional[Tuple[int, ...]] = None
    out_groups: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.mask_type not in ("A", "B"):
            raise ValueError("mask_type must be 'A' or 'B'")
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise EvenKernel(f"masked kernels must be odd-sized, got {kh}x{kw}")

    def build(self, in_channels: int, out_channels: int) -> np.ndarray:
        """0/1 mask shaped like a (kh, kw, in, out) kernel."""
        kh, kw = self.kernel
        gin = np.asarray(self.in_groups if self.in_groups is not None else channel_groups(in_channels))
        gout = np.asarray(self.out_groups if self.out_groups is not None else channel_groups(out_channels))
        if len(gin) != in_channels or len(gout) != out_channels:
            raise ShapeMismatch("group assignment does not match channel counts")
        mask = np.zeros((kh, kw, in_channels, out_channels))
        ch, cw = kh // 2, kw // 2
        mask[:ch] = 1
        mask[ch, :cw] = 1
        if self.mask_type == "A":
            centre = gin[:, None] < gout[None, :]
        else:
            centre = gin[:, None] <= gout[None, :]
        mask[ch, cw] = centre
        return mask


def channel_groups(channels: int) -> np.ndarray:
    """Contiguous R/G/B partition of ``channels``."""
    return np.arange(channels) * 3 // channels


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias``; a 1-d ``x`` is treated as a single row."""
    x = ad.as_tensor(x)
    weight = ad.as_tensor(weight, like=x)
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"dense: input width {x.shape[-1]} vs weight {weight.shape}")
    out = ad.matmul(x, weight)
    if bias is not None:
        out = out + bias
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def masked_conv2d(x, kernel, spec: MaskSpec, bias=None) -> Tensor:
    """Same-padded NHWC convolution whose (kh, kw, in, out) kernel is multiplied by ``spec``'s mask."""
    x = ad.as_tensor(x)
    kernel = ad.as_tensor(kernel, like=x)
    if kernel.ndim != 4:
        raise ShapeMismatch(f"kernel must be 4-d, got {kernel.shape}")
    if tuple(kernel.shape[:2]) != tuple(spec.kernel):
        raise ShapeMismatch(f"kernel extents {kernel.shape[:2]} differ from mask {spec.kernel}")
    mask = spec.build(kernel.shape[2], kernel.shape[3]).astype(kernel.dtype)
    # Rows below the centre are masked out entirely, so they are dropped and
    # the input is padded on the top only.
    ch, cw = spec.kernel[0] // 2, spec.kernel[1] // 2
    live = ad.slice_(kernel * mask, slice(0, ch + 1))
    out = ad.conv2d(x, live, padding=((ch, 0), (cw, cw)))
    if bias is not None:
        out = out + bias
    return out


def conditioning_conv2d(f_z, kernel, bias=None, target_extents: Optional[Tuple[int, int]] = None) -> Tensor:
    """Unmasked same-padded NHWC convolution of the conditioning stream."""
    f_z = ad.as_tensor(f_z)
    kernel = ad.as_tensor(kernel, like=f_z)
    if target_extents is not None and tuple(f_z.shape[1:3]) != tuple(target_extents):
        raise ShapeMismatch(f"conditioning extents {f_z.shape[1:3]} differ from target {target_extents}")
    kh, kw = kernel.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise EvenKernel("conditioning kernels must be odd-sized")
    out = ad.conv2d(f_z, kernel, padding=kh // 2)
    if bias is not None:
        out = out + bias
    return out


def conv2d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Plain NHWC convolution with "same"-style padding of ``k // 2``."""
    out = ad.conv2d(x, kernel, stride=stride, padding=kernel.shape[0] // 2)
    if bias is not None:
        out = out + bias
    return out


def adamax_step(store: ParameterStore, grads: Mapping[str, np.ndarray], lr: float = 0.002,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One Adamax update of every parameter that has an entry in ``grads``.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    contains NaN or infinity.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    for name in store:
        g = grads.get(name)
        if g is None:
            continue
        param = store.params[name]
        slot = store.slots[name]
        g = np.asarray(g, dtype=param.dtype)
        t = slot["t"] + 1
        m = beta1 * slot["m"] + (1 - beta1) * g
        u = np.maximum(beta2 * slot["u"], np.abs(g))
        param.data = param.data - lr * (m / (1 - beta1 ** t)) / (u + eps)
        slot["m"], slot["u"], slot["t"] = m, u, t
    return store


class Adamax:
    def __init__(self, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, store: ParameterStore, names: Optional[Sequence[str]] = None) -> None:
        """Update from the ``grad`` fields currently held by the store."""
        chosen = list(store) if names is None else names
        grads = {n: store.params[n].grad for n in chosen if store.params[n].grad is not None}
        adamax_step(store, grads, self.lr, self.beta1, self.beta2, self.eps)
