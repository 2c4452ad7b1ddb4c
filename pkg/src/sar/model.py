"""3D U-Net encoder/decoder with the scale head and the modality discriminator."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from sar.errors import CheckpointError, ShapeError

CHECKPOINT_FORMAT = "sar-checkpoint"
CHECKPOINT_VERSION = 1
N_SCALES = 3


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor; parameter count is a pure function of it."""

    depth: int = 4
    base_channels: int = 16
    input_shape: tuple[int, int, int] = (64, 64, 32)
    in_channels: int = 1
    sa_hidden: int = 64
    mial_channels: int = 32
    mial_stages: int = 3
    mial_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        div = 2 ** (self.depth - 1)
        if any(n % div for n in self.input_shape):
            raise ValueError(f"input_shape {self.input_shape} must be divisible by {div} for depth {self.depth}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(n // 2**i for n in self.input_shape) for i in range(self.depth)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Arch:
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass
class EncoderFeatures:
    levels: list[torch.Tensor] = field(default_factory=list)

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.levels[-1]


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.coeff * grad, None


def grad_reverse(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the gradient by ``-coeff`` on the way back."""
    return _GradReverse.apply(x, coeff)


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm3d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv3d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm3d(c_out),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        ch = arch.channels
        self.stages = nn.ModuleList(
            [conv_block(arch.in_channels, ch[0])] + [conv_block(ch[i - 1], ch[i]) for i in range(1, arch.depth)]
        )

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        expected = (self.arch.in_channels, *self.arch.input_shape)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"encoder input: expected (batch, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        levels = []
        h = x
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = F.max_pool3d(h, 2)
            h = stage(h)
            levels.append(h)
        return EncoderFeatures(levels)


def _check_features(features: EncoderFeatures, arch: Arch, who: str) -> None:
    if len(features.levels) != arch.depth:
        raise ShapeError(f"{who}: expected {arch.depth} feature levels, got {len(features.levels)}")
    for i, (f, c, s) in enumerate(zip(features.levels, arch.channels, arch.level_shapes())):
        if tuple(f.shape[1:]) != (c, *s):
            raise ShapeError(f"{who}: level {i} expected (batch, {c}, {', '.join(map(str, s))}), got {tuple(f.shape)}")


class Decoder(nn.Module):
    """Upsample, concatenate the skip, convolve; ``head`` maps to output channels."""

    def __init__(self, arch: Arch, out_channels: int = 1):
        super().__init__()
        self.arch = arch
        ch = arch.channels
        self.stages = nn.ModuleList([conv_block(ch[i + 1] + ch[i], ch[i]) for i in reversed(range(arch.depth - 1))])
        self.head = nn.Conv3d(ch[0], out_channels, 1)

    def body(self, features: EncoderFeatures) -> torch.Tensor:
        _check_features(features, self.arch, "decoder")
        levels = features.levels
        h = levels[-1]
        for stage, skip in zip(self.stages, reversed(levels[:-1])):
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = stage(torch.cat([h, skip], dim=1))
        return h

    def forward(self, features: EncoderFeatures) -> torch.Tensor:
        return self.head(self.body(features))


class ScaleHead(nn.Module):
    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        # Pooled BN features vary little between samples; re-standardize them.
        self.norm = nn.BatchNorm1d(arch.channels[-1])
        self.fc1 = nn.Linear(arch.channels[-1], arch.sa_hidden)
        self.fc2 = nn.Linear(arch.sa_hidden, N_SCALES)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        c = self.arch.channels[-1]
        if bottleneck.dim() != 5 or bottleneck.shape[1] != c:
            raise ShapeError(f"scale head: expected (batch, {c}, X, Y, Z), got {tuple(bottleneck.shape)}")
        pooled = bottleneck.mean(dim=(2, 3, 4))
        return self.fc2(F.relu(self.fc1(self.norm(pooled))))


class Discriminator(nn.Module):
    """Modality discriminator densely connected to the encoder.

    Stage ``s`` convolves (stride 2) the concatenation of stage ``s-1``'s
    output with encoder level ``s`` average-pooled to the same grid. The
    pooled last stage and the pooled bottleneck feed two linear layers.
    """

    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        ch = arch.channels
        convs = []
        prev = 0
        for s in range(arch.mial_stages):
            c_in = prev + (ch[s] if s < arch.depth else 0)
            convs.append(nn.Conv3d(c_in, arch.mial_channels, 3, stride=2, padding=1))
            prev = arch.mial_channels
        self.convs = nn.ModuleList(convs)
        self.norm = nn.BatchNorm1d(arch.mial_channels + ch[-1])
        self.fc1 = nn.Linear(arch.mial_channels + ch[-1], arch.mial_hidden)
        self.fc2 = nn.Linear(arch.mial_hidden, 1)

    def forward(self, features: EncoderFeatures, dense: bool = True) -> torch.Tensor:
        """Probability that each sample is CT, shape ``(batch,)``.

        ``dense=False`` zeroes the encoder inputs of stages after the first.
        """
        _check_features(features, self.arch, "discriminator")
        levels = features.levels
        h = None
        for s, conv in enumerate(self.convs):
            parts = [] if h is None else [h]
            if s < len(levels):
                size = levels[0].shape[2:] if h is None else h.shape[2:]
                lvl = levels[s]
                if tuple(lvl.shape[2:]) != tuple(size):
                    lvl = F.adaptive_avg_pool3d(lvl, size)
                if not dense and s > 0:
                    lvl = torch.zeros_like(lvl)
                parts.append(lvl)
            h = F.leaky_relu(conv(torch.cat(parts, dim=1)), 0.2)
        pooled = torch.cat([h.mean(dim=(2, 3, 4)), levels[-1].mean(dim=(2, 3, 4))], dim=1)
        logit = self.fc2(F.relu(self.fc1(self.norm(pooled))))
        return torch.sigmoid(logit).squeeze(1)


class SARNet(nn.Module):
    """Pre-training network: encoder E, decoder D, scale head S, discriminator M."""

    kind = "pretrain"

    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch, out_channels=1)
        self.scale_head = ScaleHead(arch)
        self.discriminator = Discriminator(arch)

    def group_modules(self) -> dict[str, nn.Module]:
        return {"E": self.encoder, "D": self.decoder, "S": self.scale_head, "M": self.discriminator}

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {k: list(m.parameters()) for k, m in self.group_modules().items()}

    def forward(self, x_hat: torch.Tensor, reversal: float = 1.0) -> dict:
        features = self.encoder(x_hat)
        recon = torch.sigmoid(self.decoder(features))
        logits = self.scale_head(features.bottleneck)
        reversed_features = EncoderFeatures([grad_reverse(f, reversal) for f in features.levels])
        d = self.discriminator(reversed_features)
        return {"features": features, "recon": recon, "scale_logits": logits, "d": d}


class SegNet(nn.Module):
    """Fine-tuning network: the same encoder/decoder with an n-class softmax head."""

    kind = "segment"

    def __init__(self, arch: Arch, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {n_classes}")
        self.arch = arch
        self.n_classes = n_classes
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch, out_channels=n_classes)

    def group_modules(self) -> dict[str, nn.Module]:
        return {"E": self.encoder, "D": self.decoder}

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


# --- construction ---------------------------------------------------------


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def init_pretrain_model(arch: Arch, seed: int = 0) -> SARNet:
    return _seeded(seed, lambda: SARNet(arch))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def encoder_forward(x: torch.Tensor, model) -> EncoderFeatures:
    return model.encoder(x)


def decoder_forward(features: EncoderFeatures, model: SARNet) -> torch.Tensor:
    return torch.sigmoid(model.decoder(features))


def sa_forward(bottleneck: torch.Tensor, model: SARNet) -> torch.Tensor:
    return model.scale_head(bottleneck)


def mial_forward(features: EncoderFeatures, model: SARNet, dense: bool = True) -> torch.Tensor:
    return model.discriminator(features, dense=dense)


def seg_forward(x: torch.Tensor, model: SegNet, n_classes: int | None = None) -> torch.Tensor:
    if n_classes is not None and n_classes != model.n_classes:
        raise ValueError(f"model scores {model.n_classes} classes, asked for {n_classes}")
    return model(x)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(model: nn.Module, path, meta: dict | None = None) -> Path:
    """Write named parameter arrays per group plus the arch; atomic via rename."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "arch": model.arch.to_dict(),
        "n_classes": getattr(model, "n_classes", None),
        "groups": {k: {n: t.detach().clone() for n, t in m.state_dict().items()} for k, m in model.group_modules().items()},
        "meta": dict(meta or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(exc).__name__})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    for key in ("kind", "arch", "groups"):
        if key not in payload:
            raise CheckpointError(f"{path}: missing field {key!r}")
    return payload


def _load_group(module: nn.Module, state: dict, group: str, path, skip_prefix: str | None = None) -> None:
    own = module.state_dict()
    if skip_prefix is not None:
        state = {k: v for k, v in state.items() if not k.startswith(skip_prefix)}
        own = {k: v for k, v in own.items() if not k.startswith(skip_prefix)}
    if set(state) != set(own):
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        raise CheckpointError(f"{path}: group {group} mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"{path}: group {group} tensor {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    module.load_state_dict(state, strict=skip_prefix is None)


def load_checkpoint(path):
    """Rebuild the model stored in ``path`` (``SARNet`` or ``SegNet``) and its metadata."""
    payload = read_checkpoint(path)
    try:
        arch = Arch.from_dict(payload["arch"])
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad arch descriptor ({exc})") from exc
    if payload["kind"] == SARNet.kind:
        model = SARNet(arch)
    elif payload["kind"] == SegNet.kind:
        model = SegNet(arch, int(payload["n_classes"]))
    else:
        raise CheckpointError(f"{path}: unknown model kind {payload['kind']!r}")
    groups = payload["groups"]
    for name, module in model.group_modules().items():
        if name not in groups:
            raise CheckpointError(f"{path}: missing parameter group {name}")
        _load_group(module, groups[name], name, path)
    return model, payload.get("meta", {})


def init_seg_model(arch: Arch, n_classes: int, seed: int = 0, checkpoint=None) -> SegNet:
    """Fresh segmentation net; with ``checkpoint``, E and D (minus the head) are transferred."""
    model = _seeded(seed, lambda: SegNet(arch, n_classes))
    if checkpoint is None:
        return model
    payload = read_checkpoint(checkpoint)
    if Arch.from_dict(payload["arch"]) != arch:
        raise CheckpointError(f"{checkpoint}: checkpoint arch {payload['arch']} incompatible with {arch.to_dict()}")
    groups = payload["groups"]
    for name in ("E", "D"):
        if name not in groups:
            raise CheckpointError(f"{checkpoint}: missing parameter group {name}")
    _load_group(model.encoder, groups["E"], "E", checkpoint)
    _load_group(model.decoder, groups["D"], "D", checkpoint, skip_prefix="head.")
    return model
