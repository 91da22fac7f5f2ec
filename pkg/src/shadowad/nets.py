"""Encoder-decoder networks with skip connections, Adam, and checkpoints.

Both networks are U-Nets: ``depth`` encoder blocks (stride-2 conv, norm,
leaky ReLU) followed by ``depth - 1`` decoder blocks (nearest 2x upsample,
conv, norm, leaky ReLU, concatenate the encoder feature of the same size) and
a final upsample + conv head that also sees the network input. That gives one
skip connection per level.

The attenuator (4 -> 3 channels) is residual: its head is added to the RGB
part of the input and the sum is clamped to the valid log range. The head
starts at zero, so an untrained attenuator returns its input unchanged.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from shadowad.errors import DataError, ModelMismatchError, NumericalError, ValidationError
from shadowad.physics import LOG_FLOOR

MAGIC = b"SHADOWAD"
FORMAT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


def configure_threads():
    n = os.environ.get("SHADOWAD_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ValidationError(f"SHADOWAD_THREADS must be an integer, got {n!r}") from None


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 1
    leaky_slope: float = 0.2
    norm: str = "batch"
    output_activation: str = "sigmoid"
    residual: bool = False
    max_channels: int = 128

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be positive")
        if self.norm not in ("batch", "none"):
            raise ValidationError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValidationError("output_activation must be 'sigmoid' or 'identity'")
        if self.residual and self.in_channels < self.out_channels:
            raise ValidationError("a residual net needs in_channels >= out_channels")

    def widths(self):
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.depth)]

    def to_dict(self):
        return asdict(self)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def kind(self) -> str:
        if (self.in_channels, self.out_channels) == (4, 3):
            return "attenuator"
        if (self.in_channels, self.out_channels) == (3, 1):
            return "detector"
        return "other"


def attenuator_config(depth=3, base_channels=16, **kw) -> UNetConfig:
    return UNetConfig(depth=depth, base_channels=base_channels, in_channels=4, out_channels=3,
                      output_activation="identity", residual=True, **kw)


def detector_config(depth=3, base_channels=16, **kw) -> UNetConfig:
    return UNetConfig(depth=depth, base_channels=base_channels, in_channels=3, out_channels=1,
                      output_activation="sigmoid", **kw)


def full_scale_detector_config() -> UNetConfig:
    """Full-size detector: seven skip levels at 256x256 input."""
    return detector_config(depth=7, base_channels=64, max_channels=512)


def full_scale_attenuator_config() -> UNetConfig:
    return attenuator_config(depth=7, base_channels=64, max_channels=512)


class Block(nn.Module):
    def __init__(self, cin, cout, config: UNetConfig, stride):
        super().__init__()
        kernel = 4 if stride == 2 else 3
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=1)
        self.norm = (
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM)
            if config.norm == "batch"
            else nn.Identity()
        )
        self.slope = config.leaky_slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = [config.in_channels] + config.widths()
        self.enc = nn.ModuleList(
            Block(widths[i], widths[i + 1], config, stride=2) for i in range(config.depth)
        )
        self.dec = nn.ModuleList()
        for level in range(config.depth, 1, -1):
            cin = widths[level] if level == config.depth else 2 * widths[level]
            self.dec.append(Block(cin, widths[level - 1], config, stride=1))
        head_in = (2 * widths[1] if config.depth > 1 else widths[1]) + config.in_channels
        self.head = nn.Conv2d(head_in, config.out_channels, 3, padding=1)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def forward(self, x):
        check_input(self.config, x)
        skips = [x]
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
        for j, block in enumerate(self.dec):
            h = block(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips[-2 - j]], dim=1)
        h = self.head(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), x], dim=1))
        if self.config.residual:
            h = torch.clamp(x[:, : self.config.out_channels] + h, LOG_FLOOR, 0.0)
        if self.config.output_activation == "sigmoid":
            h = torch.sigmoid(h)
        return h


def check_input(config: UNetConfig, x: torch.Tensor):
    if x.ndim != 4:
        raise ValidationError(f"input must be N x C x H x W, got {tuple(x.shape)}")
    if x.shape[1] != config.in_channels:
        raise ValidationError(f"expected {config.in_channels} input channels, got {x.shape[1]}")
    step = 2**config.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ValidationError(f"spatial dims {tuple(x.shape[2:])} not divisible by {step}")


def init_params(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> UNet:
    """Build a network with conv kernels ~ N(0, 0.02), zero biases, unit norm scales.

    A residual network gets an all-zero head.
    """
    net = UNet(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("conv.weight") or name == "head.weight":
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * INIT_STD)
            elif name.endswith("norm.weight"):
                p.fill_(1.0)
            else:
                p.zero_()
        if config.residual:
            net.head.weight.zero_()
            net.head.bias.zero_()
    return net


def param_count(config: UNetConfig) -> int:
    return sum(p.numel() for p in UNet(config).parameters())


def unet_forward(net: UNet, x: torch.Tensor, mode: str = "train") -> torch.Tensor:
    """Run ``net`` on ``x``. ``train`` uses batch statistics and records the
    graph for :func:`backward`; ``infer`` uses running statistics, no graph."""
    if mode == "train":
        net.train()
        return net(x)
    if mode == "infer":
        net.eval()
        with torch.no_grad():
            return net(x)
    raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")


def backward(net: UNet, x: torch.Tensor, output: torch.Tensor, grad_output: torch.Tensor):
    """Gradients of ``sum(output * grad_output)`` w.r.t. every parameter and ``x``.

    ``x`` must have been created with ``requires_grad=True`` before the forward.
    Returns ``(param_grads: dict[name, Tensor], input_grad)``.
    """
    if output.grad_fn is None:
        raise ValidationError("backward called without a recorded train-mode forward")
    names, params = zip(*net.named_parameters())
    inputs = list(params) + ([x] if x.requires_grad else [])
    grads = torch.autograd.grad(output, inputs, grad_output, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(inputs, grads)]
    param_grads = dict(zip(names, grads[: len(params)]))
    input_grad = grads[len(params)] if x.requires_grad else None
    return param_grads, input_grad


class frozen_running_stats:
    """Context manager restoring norm running statistics on exit."""

    def __init__(self, net: nn.Module):
        self.net = net

    def __enter__(self):
        self.saved = {k: v.clone() for k, v in self.net.named_buffers()}
        return self.net

    def __exit__(self, *exc):
        with torch.no_grad():
            for k, v in self.net.named_buffers():
                v.copy_(self.saved[k])
        return False


# -------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(net: nn.Module, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update of ``net`` in place.

    Raises :class:`NumericalError` before touching anything if a gradient is
    not finite.
    """
    params = dict(net.named_parameters())
    if set(grads) != set(params):
        raise ValidationError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-state.lr)


# ------------------------------------------------------------------- checkpoints


def _write_tensors(fh, tensors: dict):
    fh.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError(f"truncated checkpoint: {self.path}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode()
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
        return out


def save_checkpoint(net: UNet, path, adam: AdamState | None = None) -> None:
    """Write ``net`` (and optionally its optimizer state) in the binary format:

    magic, format version, fingerprint, config JSON, tensor table, then an
    Adam flag followed by step, hyperparameters and the m/v tensor tables.
    """
    config_json = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    state = {k: v for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")}
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(net.fingerprint.encode())
            fh.write(struct.pack("<I", len(config_json)))
            fh.write(config_json)
            _write_tensors(fh, state)
            fh.write(struct.pack("<B", adam is not None))
            if adam is not None:
                fh.write(struct.pack("<Q", adam.step))
                fh.write(struct.pack("<4d", adam.lr, adam.beta1, adam.beta2, adam.eps))
                _write_tensors(fh, adam.m)
                _write_tensors(fh, adam.v)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected: UNetConfig | None = None, kind: str | None = None):
    """Load ``(net, adam_state_or_None)``; verify fingerprint and, if given,
    the expected config or network kind ("attenuator"/"detector")."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"not a checkpoint: {path}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    fingerprint = r.take(16).decode()
    (n,) = r.unpack("<I")
    config = UNetConfig(**json.loads(r.take(n)))
    if config.fingerprint != fingerprint:
        raise ModelMismatchError(f"fingerprint does not match stored config in {path}")
    if expected is not None and expected.fingerprint != fingerprint:
        raise ModelMismatchError(f"checkpoint {path} has a different architecture")
    if kind is not None and config.kind != kind:
        raise ModelMismatchError(f"checkpoint {path} holds a {config.kind}, expected a {kind}")
    net = UNet(config)
    state = r.tensors()
    own = {k for k in net.state_dict() if not k.endswith("num_batches_tracked")}
    if set(state) != own:
        raise ModelMismatchError(f"parameter names in {path} do not match the architecture")
    net.load_state_dict(state, strict=False)
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        (step,) = r.unpack("<Q")
        lr, b1, b2, eps = r.unpack("<4d")
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=r.tensors(), v=r.tensors())
    if r.pos != len(buf):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return net, adam


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def to_nchw(images: np.ndarray) -> torch.Tensor:
    """``N x H x W x C`` numpy -> ``N x C x H x W`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(images, -1, 1), dtype=np.float32))


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().numpy(), 1, -1).astype(np.float64)
