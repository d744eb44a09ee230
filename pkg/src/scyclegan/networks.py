"""The six differentiable networks: dual-input U-Net generators, U-Net
segmentors, and patch discriminators.

Networks are plain parameter lists plus a functional forward, not Module
subclasses. That keeps parameter order, serialization, freezing, and
ensembled finite-difference evaluation (`torch.func.vmap` over stacked
parameter vectors) completely explicit.

Architecture notes
------------------
* U-Net: three encoder stages of two 3x3 convs each (reflection padding),
  instance norm + ReLU, 2x average-pool downsampling; a two-conv bottleneck;
  decoder mirrors with nearest upsampling and skip concatenation. Generator
  head is a 3x3 conv + tanh; segmentor head is a 3x3 conv + softmax.
* Discriminator: 4x4 convs (zero padding), stride 2 on all but the last
  width, instance norm except on the first stage, LeakyReLU(0.2), then a
  stride-1 conv to a 1-channel patch score map (the 70x70-receptive-field
  patch design).
* Initialization: every conv weight ~ N(0, 0.02^2) from a seeded generator;
  biases start at zero. Instance norm is non-affine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, UsageError

INIT_STD = 0.02
INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

GENERATOR, SEGMENTOR, DISCRIMINATOR = "generator", "segmentor", "discriminator"

_DTYPES = {"single": torch.float32, "double": torch.float64}


def torch_dtype(precision: str) -> torch.dtype:
    if precision not in _DTYPES:
        raise ConfigError(f"precision must be 'single' or 'double', got {precision!r}")
    return _DTYPES[precision]


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 8  # 3 image channels + one-hot mask planes
    out_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256)
    bottleneck: int = 512

    def __post_init__(self):
        _check_unet(self.in_channels, self.out_channels, self.widths, self.bottleneck)


@dataclass(frozen=True)
class SegmentorConfig:
    in_channels: int = 3
    num_classes: int = 5
    widths: tuple[int, ...] = (64, 128, 256)
    bottleneck: int = 512

    def __post_init__(self):
        _check_unet(self.in_channels, self.num_classes, self.widths, self.bottleneck)

    @property
    def out_channels(self) -> int:
        return self.num_classes


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        if self.in_channels < 1 or not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid discriminator config {self}")


def _check_unet(cin, cout, widths, bottleneck):
    if cin < 1 or cout < 1 or not widths or any(w < 1 for w in widths) or bottleneck < 1:
        raise ConfigError(
            f"invalid U-Net config: in={cin} out={cout} widths={widths} bottleneck={bottleneck}"
        )


def generator_config_for_classes(num_classes: int, **kw) -> GeneratorConfig:
    return GeneratorConfig(in_channels=3 + num_classes, **kw)


# ---------------------------------------------------------------------------
# Parameter layout


def _unet_conv_plan(cin, cout, widths, bottleneck):
    plan = []
    c = cin
    for i, w in enumerate(widths):
        plan.append((f"enc{i}.conv0", c, w))
        plan.append((f"enc{i}.conv1", w, w))
        c = w
    plan.append(("bottleneck.conv0", c, bottleneck))
    plan.append(("bottleneck.conv1", bottleneck, bottleneck))
    c = bottleneck
    for i in reversed(range(len(widths))):
        w = widths[i]
        plan.append((f"dec{i}.conv0", c + w, w))
        plan.append((f"dec{i}.conv1", w, w))
        c = w
    plan.append(("head.conv", c, cout))
    return plan


def _disc_conv_plan(cfg: DiscriminatorConfig):
    plan = []
    c = cfg.in_channels
    last = len(cfg.widths) - 1
    for i, w in enumerate(cfg.widths):
        stride = 1 if i == last else 2
        plan.append((f"stage{i}.conv", c, w, stride))
        c = w
    plan.append(("head.conv", c, 1, 1))
    return plan


def _conv_plan(kind, cfg):
    if kind == DISCRIMINATOR:
        return [(n, ci, co) for n, ci, co, _ in _disc_conv_plan(cfg)]
    kernel_cfgs = _unet_conv_plan(cfg.in_channels, cfg.out_channels, cfg.widths, cfg.bottleneck)
    return kernel_cfgs


def _param_shapes(kind, cfg):
    k = 4 if kind == DISCRIMINATOR else 3
    shapes = []
    for name, ci, co in _conv_plan(kind, cfg):
        shapes.append((name + ".weight", (co, ci, k, k)))
        shapes.append((name + ".bias", (co,)))
    return shapes


class NetworkHandle:
    """A parameterized differentiable function: ordered parameter tensors,
    a trainable/frozen mode flag, and forward-contract metadata."""

    def __init__(self, kind, config, seed, precision, params, names):
        self.kind = kind
        self.config = config
        self.seed = seed
        self.precision = precision
        self.params = params
        self.names = names
        self.mode = "trainable"

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.precision)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    @property
    def out_channels(self) -> int:
        return 1 if self.kind == DISCRIMINATOR else self.config.out_channels

    @property
    def head(self) -> str:
        return {GENERATOR: "tanh", SEGMENTOR: "softmax", DISCRIMINATOR: "linear"}[self.kind]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def build_network(kind: str, config, seed: int, precision: str = "single") -> NetworkHandle:
    """Deterministically initialize a network of the given kind."""
    if kind not in (GENERATOR, SEGMENTOR, DISCRIMINATOR):
        raise ConfigError(f"unknown network kind {kind!r}")
    dtype = torch_dtype(precision)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    params, names = [], []
    for name, shape in _param_shapes(kind, config):
        if name.endswith(".weight"):
            t = torch.empty(shape, dtype=dtype).normal_(0.0, INIT_STD, generator=gen)
            t = t.to(memory_format=torch.channels_last)
        else:
            t = torch.zeros(shape, dtype=dtype)
        t.requires_grad_(True)
        params.append(t)
        names.append(name)
    return NetworkHandle(kind, config, seed, precision, params, names)


def build_generator(cfg: GeneratorConfig, seed: int, precision: str = "single") -> NetworkHandle:
    return build_network(GENERATOR, cfg, seed, precision)


def build_segmentor(cfg: SegmentorConfig, seed: int, precision: str = "single") -> NetworkHandle:
    return build_network(SEGMENTOR, cfg, seed, precision)


def build_discriminator(cfg: DiscriminatorConfig, seed: int, precision: str = "single") -> NetworkHandle:
    return build_network(DISCRIMINATOR, cfg, seed, precision)


# ---------------------------------------------------------------------------
# Functional forwards


def _pad1(x):
    # Reflection padding; degenerate 1-px maps (mini configs) fall back to
    # replication, which is the only defined border rule at that size.
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        return F.pad(x, (1, 1, 1, 1), mode="replicate")
    return F.pad(x, (1, 1, 1, 1), mode="reflect")


def _inorm(x):
    m = x.mean(dim=(-2, -1), keepdim=True)
    v = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (x - m) * torch.rsqrt(v + INSTANCE_NORM_EPS)


def _unet_apply(cfg, params, x, head: str):
    it = iter(params)

    def block(x):
        x = F.conv2d(_pad1(x), next(it), next(it))
        return torch.relu(_inorm(x))

    skips = []
    for _ in cfg.widths:
        x = block(block(x))
        skips.append(x)
        x = F.avg_pool2d(x, 2)
    x = block(block(x))
    for skip in reversed(skips):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, skip], dim=1)
        x = block(block(x))
    x = F.conv2d(_pad1(x), next(it), next(it))
    if head == "tanh":
        return torch.tanh(x)
    return torch.softmax(x, dim=1)


def _disc_apply(cfg, params, x):
    it = iter(params)
    last = len(cfg.widths) - 1
    for i in range(len(cfg.widths)):
        stride = 1 if i == last else 2
        x = F.conv2d(x, next(it), next(it), stride=stride, padding=1)
        if i > 0:
            x = _inorm(x)
        x = F.leaky_relu(x, LEAKY_SLOPE)
    return F.conv2d(x, next(it), next(it), stride=1, padding=1)


def _check_image(x, channels, name="image"):
    if not isinstance(x, torch.Tensor):
        raise ShapeError(f"{name} must be a torch tensor, got {type(x).__name__}")
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != channels:
        raise ShapeError(
            f"{name} must have shape (1, {channels}, H, W), got {tuple(x.shape)}"
        )


def apply_network(net: NetworkHandle, x: torch.Tensor, params=None) -> torch.Tensor:
    """Forward pass; `params` substitutes the stored tensors (for ensembled
    finite-difference evaluation) without touching the handle."""
    params = net.params if params is None else params
    if net.kind == DISCRIMINATOR:
        return _disc_apply(net.config, params, x)
    return _unet_apply(net.config, params, x, "tanh" if net.kind == GENERATOR else "softmax")


def generator_forward(net: NetworkHandle, image: torch.Tensor, mask_planes: torch.Tensor, params=None) -> torch.Tensor:
    """Translate an image conditioned on its one-hot semantic planes."""
    if net.kind != GENERATOR:
        raise UsageError(f"generator_forward on a {net.kind}")
    mask_channels = net.config.in_channels - 3
    _check_image(image, 3)
    _check_image(mask_planes, mask_channels, "mask_planes")
    if image.shape[2:] != mask_planes.shape[2:]:
        raise ShapeError(
            f"image {tuple(image.shape[2:])} and mask {tuple(mask_planes.shape[2:])} "
            "spatial dims differ"
        )
    _check_unet_spatial(net, image)
    return apply_network(net, torch.cat([image, mask_planes.to(image.dtype)], dim=1), params)


def segmentor_forward(net: NetworkHandle, image: torch.Tensor, params=None) -> torch.Tensor:
    """Per-pixel class distribution (planes sum to 1) for an image."""
    if net.kind != SEGMENTOR:
        raise UsageError(f"segmentor_forward on a {net.kind}")
    _check_image(image, net.config.in_channels)
    _check_unet_spatial(net, image)
    return apply_network(net, image, params)


def _check_unet_spatial(net, image):
    factor = 2 ** len(net.config.widths)
    h, w = image.shape[2], image.shape[3]
    if h % factor or w % factor or h < factor or w < factor:
        raise ShapeError(
            f"U-Net input dims must be positive multiples of {factor}, got {h}x{w}"
        )


def discriminator_output_size(cfg: DiscriminatorConfig, h: int, w: int) -> tuple[int, int]:
    """Patch-map size from the 4x4 conv stack arithmetic; errors if any layer
    output would be empty (the default stack needs at least 24x24 input)."""
    h0, w0 = h, w
    for _, _, _, stride in _disc_conv_plan(cfg):
        h = (h + 2 - 4) // stride + 1
        w = (w + 2 - 4) // stride + 1
        if h < 1 or w < 1:
            raise ShapeError(
                f"input {h0}x{w0} too small for the discriminator conv stack"
            )
    return h, w


def discriminator_forward(net: NetworkHandle, image: torch.Tensor, params=None) -> torch.Tensor:
    """Raw patch score map (squashing happens inside the log-mode losses)."""
    if net.kind != DISCRIMINATOR:
        raise UsageError(f"discriminator_forward on a {net.kind}")
    _check_image(image, net.config.in_channels)
    discriminator_output_size(net.config, image.shape[2], image.shape[3])
    return apply_network(net, image, params)


# ---------------------------------------------------------------------------
# Mode, parameter vector access, serialization


def set_mode(net: NetworkHandle, mode: str) -> None:
    if mode not in ("trainable", "frozen"):
        raise UsageError(f"mode must be 'trainable' or 'frozen', got {mode!r}")
    net.mode = mode
    for p in net.params:
        p.requires_grad_(mode == "trainable")


def parameters(net: NetworkHandle) -> np.ndarray:
    """Ordered flat copy of all parameters."""
    chunks = [p.detach().contiguous().view(-1).numpy().copy() for p in net.params]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def load_parameters(net: NetworkHandle, vector: np.ndarray) -> None:
    """Inverse of :func:`parameters`; exact round-trip."""
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.size != net.param_count:
        raise ShapeError(
            f"parameter vector length {vector.size} != network count {net.param_count}"
        )
    offset = 0
    with torch.no_grad():
        for p in net.params:
            n = p.numel()
            chunk = torch.from_numpy(np.ascontiguousarray(vector[offset : offset + n]))
            p.copy_(chunk.view(p.shape).to(p.dtype))
            offset += n


def state_arrays(net: NetworkHandle) -> dict[str, np.ndarray]:
    """Named parameter arrays in declaration order (for checkpoints)."""
    return {
        f"{i:03d}:{name}": p.detach().contiguous().numpy().copy()
        for i, (name, p) in enumerate(zip(net.names, net.params))
    }


def load_state_arrays(net: NetworkHandle, arrays: dict[str, np.ndarray]) -> None:
    expected = [f"{i:03d}:{name}" for i, name in enumerate(net.names)]
    if list(arrays.keys()) != expected:
        raise ShapeError("checkpoint arrays do not match the network's parameter list")
    with torch.no_grad():
        for key, p in zip(expected, net.params):
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeError(f"array {key} has shape {arr.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))


def config_to_dict(kind: str, cfg) -> dict:
    d = {"kind": kind}
    if kind == DISCRIMINATOR:
        d.update(in_channels=cfg.in_channels, widths=list(cfg.widths))
    elif kind == GENERATOR:
        d.update(
            in_channels=cfg.in_channels,
            out_channels=cfg.out_channels,
            widths=list(cfg.widths),
            bottleneck=cfg.bottleneck,
        )
    else:
        d.update(
            in_channels=cfg.in_channels,
            num_classes=cfg.num_classes,
            widths=list(cfg.widths),
            bottleneck=cfg.bottleneck,
        )
    return d


def config_from_dict(d: dict):
    kind = d["kind"]
    if kind == DISCRIMINATOR:
        cfg = DiscriminatorConfig(in_channels=d["in_channels"], widths=tuple(d["widths"]))
    elif kind == GENERATOR:
        cfg = GeneratorConfig(
            in_channels=d["in_channels"],
            out_channels=d["out_channels"],
            widths=tuple(d["widths"]),
            bottleneck=d["bottleneck"],
        )
    elif kind == SEGMENTOR:
        cfg = SegmentorConfig(
            in_channels=d["in_channels"],
            num_classes=d["num_classes"],
            widths=tuple(d["widths"]),
            bottleneck=d["bottleneck"],
        )
    else:
        raise ConfigError(f"unknown network kind {kind!r} in checkpoint")
    return kind, cfg
