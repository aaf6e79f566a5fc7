"""Deblurring/reblurring generator and patch discriminator, written functionally.

Every network is a pure function of a :class:`ParamSet` (an ordered
name -> tensor map) and an NCHW batch, so the meta-learning loops can
evaluate the same architecture under several parameter snapshots.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .imaging import SIGNED, ImageTensor

IN_EPS = 1e-5
LEAKY_SLOPE = 0.2
INIT_STD = 0.02

STAGE_TAGS = ("theta_0", "theta_T", "theta_F", "theta_M", "theta_k",
              "omega_0", "omega_T", "disc")


@dataclass(frozen=True)
class GeneratorSpec:
    """c7s1-w0, d-w0, d-w1, residual blocks at w2, u-w1, u-w0, c7s1-3 (Tanh).

    ``residual`` adds the input image to the Tanh head and clamps to [-1, 1],
    the global skip of the DeblurGAN generator.
    """
    name: str = "full"
    widths: tuple[int, int, int] = (64, 128, 256)
    n_res: int = 9
    residual: bool = True

    @property
    def kind(self) -> str:
        return "generator"


@dataclass(frozen=True)
class DiscriminatorSpec:
    name: str = "full"
    widths: tuple[int, int, int, int] = (64, 128, 256, 512)

    @property
    def kind(self) -> str:
        return "discriminator"


FULL_GENERATOR = GeneratorSpec()
TOY_GENERATOR = GeneratorSpec(name="toy", widths=(4, 8, 16), n_res=1)
SMALL_GENERATOR = GeneratorSpec(name="small", widths=(16, 32, 64), n_res=3)
FULL_DISCRIMINATOR = DiscriminatorSpec()
TOY_DISCRIMINATOR = DiscriminatorSpec(name="toy", widths=(4, 8, 16, 32))
SMALL_DISCRIMINATOR = DiscriminatorSpec(name="small", widths=(8, 16, 32, 64))

GENERATOR_SPECS = {s.name: s for s in (FULL_GENERATOR, TOY_GENERATOR, SMALL_GENERATOR)}
DISCRIMINATOR_SPECS = {s.name: s for s in (FULL_DISCRIMINATOR, TOY_DISCRIMINATOR, SMALL_DISCRIMINATOR)}


class ParamSet:
    """Ordered, named parameter collection with a fixed shape inventory."""

    def __init__(self, entries: Mapping[str, torch.Tensor], stage_tag: str, arch: str):
        if stage_tag not in STAGE_TAGS:
            raise InvalidInputError(f"unknown stage tag {stage_tag!r}")
        self._entries = OrderedDict((k, v) for k, v in entries.items())
        self.stage_tag = stage_tag
        self.arch = arch

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._entries.values())

    def as_dict(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self._entries)

    def inventory(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._entries.items()]

    def num_params(self) -> int:
        return sum(v.numel() for v in self._entries.values())

    def replace(self, tensors: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
                stage_tag: str | None = None) -> "ParamSet":
        """New ParamSet with the same inventory and different values."""
        if isinstance(tensors, Mapping):
            new = OrderedDict((k, tensors[k]) for k in self._entries)
        else:
            new = OrderedDict(zip(self._entries, tensors))
            if len(new) != len(self._entries):
                raise InvalidInputError("tensor count does not match inventory")
        for k, v in new.items():
            if tuple(v.shape) != tuple(self._entries[k].shape):
                raise InvalidInputError(f"shape of {k} changed: {tuple(v.shape)}")
        return ParamSet(new, stage_tag or self.stage_tag, self.arch)

    def detached(self, stage_tag: str | None = None) -> "ParamSet":
        return self.replace({k: v.detach().clone() for k, v in self._entries.items()}, stage_tag)

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return self.replace({k: v.to(dtype) for k, v in self._entries.items()})

    def requires_grad_(self) -> "ParamSet":
        for v in self._entries.values():
            v.requires_grad_(True)
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self._entries.items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        return (self.inventory() == other.inventory()
                and all(torch.equal(self[k], other[k]) for k in self))

    def __repr__(self) -> str:
        return f"ParamSet(arch={self.arch!r}, stage={self.stage_tag!r}, n={self.num_params()})"


# ---------------------------------------------------------------------------
# parameter inventories


def _conv(inv, name, cin, cout, k, bias):
    inv.append((f"{name}.w", (cout, cin, k, k), "conv"))
    if bias:
        inv.append((f"{name}.b", (cout,), "zero"))


def _convt(inv, name, cin, cout, k):
    inv.append((f"{name}.w", (cin, cout, k, k), "conv"))


def _norm(inv, name, c):
    inv.append((f"{name}.g", (c,), "one"))
    inv.append((f"{name}.beta", (c,), "zero"))


def generator_inventory(spec: GeneratorSpec) -> list[tuple[str, tuple[int, ...], str]]:
    # convs followed by IN carry no bias: IN cancels it exactly.
    w0, w1, w2 = spec.widths
    inv: list = []
    _conv(inv, "head", 3, w0, 7, False)
    _norm(inv, "head.in", w0)
    _conv(inv, "down1", w0, w0, 3, False)
    _norm(inv, "down1.in", w0)
    _conv(inv, "down2", w0, w1, 3, False)
    _norm(inv, "down2.in", w1)
    for i in range(spec.n_res):
        cin = w1 if i == 0 else w2
        _conv(inv, f"res{i}.conv1", cin, w2, 3, False)
        _norm(inv, f"res{i}.in1", w2)
        _conv(inv, f"res{i}.conv2", w2, w2, 3, False)
        _norm(inv, f"res{i}.in2", w2)
        if cin != w2:
            _conv(inv, f"res{i}.proj", cin, w2, 1, True)
    _convt(inv, "up1", w2 if spec.n_res else w1, w1, 3)
    _norm(inv, "up1.in", w1)
    _convt(inv, "up2", w1, w0, 3)
    _norm(inv, "up2.in", w0)
    _conv(inv, "tail", w0, 3, 7, True)
    if spec.residual:
        # a zero output conv makes the residual generator start as the identity
        inv[-2] = (inv[-2][0], inv[-2][1], "zero")
    return inv


def discriminator_inventory(spec: DiscriminatorSpec) -> list[tuple[str, tuple[int, ...], str]]:
    inv: list = []
    cin = 3
    for i, w in enumerate(spec.widths):
        _conv(inv, f"down{i}", cin, w, 4, False)
        _norm(inv, f"down{i}.in", w)
        cin = w
    _conv(inv, "flat", cin, cin, 4, False)
    _norm(inv, "flat.in", cin)
    _conv(inv, "score", cin, 1, 4, True)
    return inv


def _inventory(spec):
    if isinstance(spec, GeneratorSpec):
        return generator_inventory(spec)
    if isinstance(spec, DiscriminatorSpec):
        return discriminator_inventory(spec)
    raise InvalidInputError(f"not a network spec: {spec!r}")


def arch_name(spec) -> str:
    return f"{spec.kind}/{spec.name}"


def init_params(spec, seed: int, stage_tag: str | None = None,
                dtype: torch.dtype = torch.float32) -> ParamSet:
    """Seeded init: conv weights N(0, 0.02), IN gain 1, all biases 0.

    Residual generators get a zero output conv, so they start as the identity.
    """
    if stage_tag is None:
        stage_tag = "theta_0" if isinstance(spec, GeneratorSpec) else "disc"
    rng = np.random.default_rng(seed)
    entries = OrderedDict()
    for name, shape, kind in _inventory(spec):
        if kind == "conv":
            arr = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        entries[name] = torch.as_tensor(arr, dtype=dtype)
    return ParamSet(entries, stage_tag, arch_name(spec))


def count_params(spec) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in _inventory(spec)))


# ---------------------------------------------------------------------------
# layers


def instance_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
                  eps: float = IN_EPS) -> torch.Tensor:
    """Per-sample, per-channel normalization over the spatial axes.

    A 1x1 spatial map has zero variance, so the output collapses to ``bias``.
    """
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    xn = (x - mean) / torch.sqrt(var + eps)
    return xn * gain.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)


def _conv_in(p, name, x, stride, padding, act):
    y = F.conv2d(x, p[f"{name}.w"], None, stride=stride, padding=padding)
    y = instance_norm(y, p[f"{name}.in.g"], p[f"{name}.in.beta"])
    return act(y)


def residual_block(p: Mapping[str, torch.Tensor], name: str, x: torch.Tensor) -> torch.Tensor:
    """``skip(x) + IN(conv(ReLU(IN(conv(x)))))``; skip is a 1x1 projection when widths differ."""
    w1 = p[f"{name}.conv1.w"]
    if x.shape[1] != w1.shape[1]:
        raise InvalidInputError(f"{name}: input has {x.shape[1]} channels, block expects {w1.shape[1]}")
    h = F.conv2d(x, w1, None, padding=1)
    h = F.relu(instance_norm(h, p[f"{name}.in1.g"], p[f"{name}.in1.beta"]))
    h = F.conv2d(h, p[f"{name}.conv2.w"], None, padding=1)
    h = instance_norm(h, p[f"{name}.in2.g"], p[f"{name}.in2.beta"])
    if f"{name}.proj.w" in p:
        x = F.conv2d(x, p[f"{name}.proj.w"], p[f"{name}.proj.b"])
    return x + h


def _n_res(p: Mapping[str, torch.Tensor]) -> int:
    n = 0
    while f"res{n}.conv1.w" in p:
        n += 1
    return n


def generator_apply(params: ParamSet | Mapping[str, torch.Tensor], x: torch.Tensor,
                    residual: bool | None = None) -> torch.Tensor:
    """Generator forward on an N x 3 x H x W signed-range batch."""
    if residual is None:
        residual = _spec_residual(params) if isinstance(params, ParamSet) else True
    p = params.as_dict() if isinstance(params, ParamSet) else params
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidInputError(f"expected N x 3 x H x W batch, got {tuple(x.shape)}")
    h, w = x.shape[2], x.shape[3]
    if h % 4 or w % 4:
        raise InvalidInputError(f"generator input {h}x{w} must be divisible by 4")
    y = _conv_in(p, "head", x, 1, 3, F.relu)
    y = _conv_in(p, "down1", y, 2, 1, F.relu)
    y = _conv_in(p, "down2", y, 2, 1, F.relu)
    for i in range(_n_res(p)):
        y = residual_block(p, f"res{i}", y)
    y = F.conv_transpose2d(y, p["up1.w"], None, stride=2, padding=1, output_padding=1)
    y = F.relu(instance_norm(y, p["up1.in.g"], p["up1.in.beta"]))
    y = F.conv_transpose2d(y, p["up2.w"], None, stride=2, padding=1, output_padding=1)
    y = F.relu(instance_norm(y, p["up2.in.g"], p["up2.in.beta"]))
    y = torch.tanh(F.conv2d(y, p["tail.w"], p["tail.b"], padding=3))
    if residual:
        y = torch.clamp(x + y, -1.0, 1.0)
    return y


def discriminator_apply(params: ParamSet | Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Patch scores in (0, 1), shape N x 1 x H/16 x W/16."""
    p = params.as_dict() if isinstance(params, ParamSet) else params
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidInputError(f"expected N x 3 x H x W batch, got {tuple(x.shape)}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise InvalidInputError(f"discriminator input {x.shape[2]}x{x.shape[3]} must be divisible by 16")
    lrelu = lambda t: F.leaky_relu(t, LEAKY_SLOPE)  # noqa: E731
    y = x
    i = 0
    while f"down{i}.w" in p:
        y = _conv_in(p, f"down{i}", y, 2, 1, lrelu)
        i += 1
    # stride-1 4x4 convs keep H/16 with asymmetric (1, 2) padding
    y = _conv_in(p, "flat", F.pad(y, (1, 2, 1, 2)), 1, 0, lrelu)
    y = F.conv2d(F.pad(y, (1, 2, 1, 2)), p["score.w"], p["score.b"])
    return torch.sigmoid(y)


# ---------------------------------------------------------------------------
# image-level entry points


def image_to_batch(img: ImageTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = img.to_signed().data
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), dtype=dtype).unsqueeze(0)


def batch_to_image(x: torch.Tensor, index: int = 0) -> ImageTensor:
    arr = x[index].detach().cpu().numpy().transpose(1, 2, 0)
    return ImageTensor(arr, SIGNED)


def _check_rgb(img: ImageTensor):
    if img.channels != 3:
        raise InvalidInputError(f"expected an RGB image, got {img.channels} channels")


def _spec_residual(params: ParamSet) -> bool:
    name = params.arch.split("/", 1)[-1]
    spec = GENERATOR_SPECS.get(name)
    return True if spec is None else spec.residual


def deblur_forward(theta: ParamSet, img: ImageTensor) -> ImageTensor:
    _check_rgb(img)
    dtype = theta.tensors()[0].dtype
    with torch.no_grad():
        out = generator_apply(theta, image_to_batch(img, dtype))
    return batch_to_image(out)


def reblur_forward(omega: ParamSet, img: ImageTensor) -> ImageTensor:
    return deblur_forward(omega, img)


def discriminator_forward(d: ParamSet, img: ImageTensor) -> np.ndarray:
    """Score map of shape (H/16, W/16, 1)."""
    _check_rgb(img)
    dtype = d.tensors()[0].dtype
    with torch.no_grad():
        out = discriminator_apply(d, image_to_batch(img, dtype))
    return out[0].numpy().transpose(1, 2, 0)
