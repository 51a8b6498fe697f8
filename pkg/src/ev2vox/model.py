"""Encoder-decoder reconstruction network assembled from nn layers.

The encoder is a residual 3D network: a strided stem (plus optional max
pool), stages of bottleneck blocks (1x1x1 reduce, 3x3x3 spatial, 1x1x1
expand, additive shortcut), then a nearest-neighbor resize that pins the
output to a fixed hidden volume regardless of how the strides divided the
input. The decoder runs a small UNet over that volume: strided
convolutions down, transposed convolutions up with channel-concatenated
skips, and a sigmoid head that emits one occupancy probability per cell.

Forward and backward are hand-threaded through the layer objects in
reverse order; there is no graph machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ChannelMismatch, CheckpointMismatch, ConfigError, ResolutionMismatch, ShapeMismatch

EXPANSION = 4
LOSS_CLAMP = 1e-7


@dataclass(frozen=True)
class StemConfig:
    kernel: tuple[int, int, int] = (7, 7, 7)
    stride: tuple[int, int, int] = (2, 2, 2)
    channels: int = 64
    pool: bool = True


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    channels: int  # bottleneck width; blocks emit EXPANSION * channels
    stride: tuple[int, int, int] = (1, 1, 1)


@dataclass(frozen=True)
class EncoderConfig:
    stem: StemConfig
    stages: tuple[StageConfig, ...]
    hidden_spatial: tuple[int, int, int] = (32, 32, 32)
    norm: str = "batch"
    in_channels: int = 1
    paper_scale: bool = False

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        if any(d <= 0 for d in self.hidden_spatial):
            raise ConfigError(f"hidden_spatial must be positive, got {self.hidden_spatial}")

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels * EXPANSION

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(
            stem=StemConfig(),
            stages=(
                StageConfig(3, 64, (1, 1, 1)),
                StageConfig(8, 128, (2, 2, 2)),
                StageConfig(36, 256, (2, 2, 2)),
                StageConfig(3, 512, (2, 2, 2)),
            ),
            hidden_spatial=(32, 32, 32),
            paper_scale=True,
        )

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls(
            stem=StemConfig(kernel=(3, 3, 3), stride=(1, 2, 2), channels=8, pool=False),
            stages=(
                StageConfig(1, 8, (1, 1, 1)),
                StageConfig(1, 16, (2, 2, 2)),
            ),
            hidden_spatial=(8, 8, 8),
        )

    def to_dict(self) -> dict:
        return {
            "stem": {
                "kernel": list(self.stem.kernel),
                "stride": list(self.stem.stride),
                "channels": self.stem.channels,
                "pool": self.stem.pool,
            },
            "stages": [
                {"blocks": s.blocks, "channels": s.channels, "stride": list(s.stride)}
                for s in self.stages
            ],
            "hidden_spatial": list(self.hidden_spatial),
            "norm": self.norm,
            "in_channels": self.in_channels,
            "paper_scale": self.paper_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        stem = StemConfig(
            kernel=tuple(d["stem"]["kernel"]),
            stride=tuple(d["stem"]["stride"]),
            channels=int(d["stem"]["channels"]),
            pool=bool(d["stem"]["pool"]),
        )
        stages = tuple(
            StageConfig(int(s["blocks"]), int(s["channels"]), tuple(s["stride"]))
            for s in d["stages"]
        )
        return cls(
            stem=stem,
            stages=stages,
            hidden_spatial=tuple(d["hidden_spatial"]),
            norm=d.get("norm", "batch"),
            in_channels=int(d.get("in_channels", 1)),
            paper_scale=bool(d.get("paper_scale", False)),
        )


@dataclass(frozen=True)
class DecoderConfig:
    levels: int = 3
    channels: tuple[int, ...] = (64, 128, 256)
    norm: str = "batch"

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"decoder needs at least one level, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(
                f"decoder channel schedule {self.channels} does not match {self.levels} levels"
            )

    @classmethod
    def paper(cls) -> "DecoderConfig":
        return cls()

    @classmethod
    def toy(cls) -> "DecoderConfig":
        return cls(levels=2, channels=(16, 32))

    def to_dict(self) -> dict:
        return {"levels": self.levels, "channels": list(self.channels), "norm": self.norm}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(
            levels=int(d["levels"]),
            channels=tuple(d["channels"]),
            norm=d.get("norm", "batch"),
        )


class ConvNormRelu:
    """conv -> norm -> relu, the workhorse unit of both halves."""

    def __init__(self, cin, cout, kernel, stride, padding, norm_kind, name, seed, dtype):
        self.conv = nn.Conv3d(
            cin, cout, kernel, stride=stride, padding=padding,
            name=f"{name}.conv", seed=seed, dtype=dtype,
        )
        self.norm = nn.make_norm(norm_kind, cout, f"{name}.norm", dtype=dtype)
        self.relu = nn.ReLU()

    def forward(self, x, remember=True):
        return self.relu.forward(
            self.norm.forward(self.conv.forward(x, remember), remember), remember
        )

    def backward(self, g):
        return self.conv.backward(self.norm.backward(self.relu.backward(g)))

    def parameters(self):
        return self.conv.parameters() + self.norm.parameters()

    def buffers(self):
        return self.norm.buffers()

    def norms(self):
        return [self.norm]


class Bottleneck:
    """Residual block: 1-reduce, 3-spatial (carries the stride), 1-expand."""

    def __init__(self, cin, width, stride, norm_kind, name, seed, dtype):
        cout = width * EXPANSION
        self.conv1 = nn.Conv3d(cin, width, 1, name=f"{name}.conv1", seed=seed, dtype=dtype)
        self.norm1 = nn.make_norm(norm_kind, width, f"{name}.norm1", dtype=dtype)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv3d(
            width, width, 3, stride=stride, padding=1,
            name=f"{name}.conv2", seed=seed, dtype=dtype,
        )
        self.norm2 = nn.make_norm(norm_kind, width, f"{name}.norm2", dtype=dtype)
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv3d(width, cout, 1, name=f"{name}.conv3", seed=seed, dtype=dtype)
        self.norm3 = nn.make_norm(norm_kind, cout, f"{name}.norm3", dtype=dtype)
        self.relu3 = nn.ReLU()
        if cin != cout or tuple(stride) != (1, 1, 1):
            self.proj_conv = nn.Conv3d(
                cin, cout, 1, stride=stride, name=f"{name}.proj.conv", seed=seed, dtype=dtype
            )
            self.proj_norm = nn.make_norm(norm_kind, cout, f"{name}.proj.norm", dtype=dtype)
        else:
            self.proj_conv = None
            self.proj_norm = None
        self.out_channels = cout

    def forward(self, x, remember=True):
        h = self.relu1.forward(self.norm1.forward(self.conv1.forward(x, remember), remember), remember)
        h = self.relu2.forward(self.norm2.forward(self.conv2.forward(h, remember), remember), remember)
        h = self.norm3.forward(self.conv3.forward(h, remember), remember)
        if self.proj_conv is not None:
            shortcut = self.proj_norm.forward(self.proj_conv.forward(x, remember), remember)
        else:
            shortcut = x
        return self.relu3.forward(h + shortcut, remember)

    def backward(self, g):
        g = self.relu3.backward(g)
        gm = self.conv3.backward(self.norm3.backward(g))
        gm = self.conv2.backward(self.norm2.backward(self.relu2.backward(gm)))
        gm = self.conv1.backward(self.norm1.backward(self.relu1.backward(gm)))
        if self.proj_conv is not None:
            gs = self.proj_conv.backward(self.proj_norm.backward(g))
        else:
            gs = g
        return gm + gs

    def parameters(self):
        out = (
            self.conv1.parameters() + self.norm1.parameters()
            + self.conv2.parameters() + self.norm2.parameters()
            + self.conv3.parameters() + self.norm3.parameters()
        )
        if self.proj_conv is not None:
            out += self.proj_conv.parameters() + self.proj_norm.parameters()
        return out

    def buffers(self):
        out = self.norm1.buffers() + self.norm2.buffers() + self.norm3.buffers()
        if self.proj_norm is not None:
            out += self.proj_norm.buffers()
        return out

    def norms(self):
        out = [self.norm1, self.norm2, self.norm3]
        if self.proj_norm is not None:
            out.append(self.proj_norm)
        return out


class Encoder:
    def __init__(self, cfg: EncoderConfig, seed: int, dtype):
        self.cfg = cfg
        self.stem = ConvNormRelu(
            cfg.in_channels, cfg.stem.channels, cfg.stem.kernel, cfg.stem.stride,
            tuple(k // 2 for k in cfg.stem.kernel), cfg.norm,
            "encoder.stem", seed, dtype,
        )
        self.pool = nn.MaxPool3d(3, stride=2, padding=1) if cfg.stem.pool else None
        self.blocks: list[Bottleneck] = []
        cin = cfg.stem.channels
        for si, stage in enumerate(cfg.stages):
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else (1, 1, 1)
                block = Bottleneck(
                    cin, stage.channels, stride, cfg.norm,
                    f"encoder.stage{si}.block{bi}", seed, dtype,
                )
                self.blocks.append(block)
                cin = block.out_channels
        self.resize = nn.AdaptiveResize3d(cfg.hidden_spatial)
        self.out_channels = cin

    def forward(self, x, remember=True):
        h = self.stem.forward(x, remember)
        if self.pool is not None:
            h = self.pool.forward(h, remember)
        for block in self.blocks:
            h = block.forward(h, remember)
        return self.resize.forward(h, remember)

    def backward(self, g):
        g = self.resize.backward(g)
        for block in reversed(self.blocks):
            g = block.backward(g)
        if self.pool is not None:
            g = self.pool.backward(g)
        return self.stem.backward(g)

    def parameters(self):
        out = self.stem.parameters()
        for block in self.blocks:
            out += block.parameters()
        return out

    def buffers(self):
        out = self.stem.buffers()
        for block in self.blocks:
            out += block.buffers()
        return out

    def norms(self):
        out = self.stem.norms()
        for block in self.blocks:
            out += block.norms()
        return out


class UpBlock:
    """deconv up, norm+relu, concat the saved skip, fuse back down."""

    def __init__(self, cin, cout, norm_kind, name, seed, dtype):
        self.deconv = nn.Deconv3d(
            cin, cout, 2, stride=2, name=f"{name}.deconv", seed=seed, dtype=dtype
        )
        self.norm = nn.make_norm(norm_kind, cout, f"{name}.norm", dtype=dtype)
        self.relu = nn.ReLU()
        self.fuse = ConvNormRelu(
            2 * cout, cout, 3, 1, 1, norm_kind, f"{name}.fuse", seed, dtype
        )
        self.cout = cout

    def forward(self, x, skip, remember=True):
        up = self.relu.forward(
            self.norm.forward(self.deconv.forward(x, remember), remember), remember
        )
        return self.fuse.forward(nn.concat_channels([up, skip]), remember)

    def backward(self, g):
        g = self.fuse.backward(g)
        g_up, g_skip = nn.split_channels(g, [self.cout, self.cout])
        g_x = self.deconv.backward(self.norm.backward(self.relu.backward(g_up)))
        return g_x, g_skip

    def parameters(self):
        return self.deconv.parameters() + self.norm.parameters() + self.fuse.parameters()

    def buffers(self):
        return self.norm.buffers() + self.fuse.buffers()

    def norms(self):
        return [self.norm] + self.fuse.norms()


class Decoder:
    def __init__(self, cfg: DecoderConfig, in_channels: int, hidden_spatial, seed: int, dtype):
        self.cfg = cfg
        ch = cfg.channels
        factor = 2 ** (cfg.levels - 1)
        if any(d % factor for d in hidden_spatial):
            raise ConfigError(
                f"hidden volume {hidden_spatial} is not divisible by 2^{cfg.levels - 1}; "
                f"the up path could not restore it"
            )
        self.entry = ConvNormRelu(
            in_channels, ch[0], 1, 1, 0, cfg.norm, "decoder.entry", seed, dtype
        )
        self.downs = [
            ConvNormRelu(ch[i - 1], ch[i], 3, 2, 1, cfg.norm, f"decoder.down{i}", seed, dtype)
            for i in range(1, cfg.levels)
        ]
        self.ups = [
            UpBlock(ch[i], ch[i - 1], cfg.norm, f"decoder.up{i}", seed, dtype)
            for i in range(cfg.levels - 1, 0, -1)
        ]
        self.head = nn.Conv3d(ch[0], 1, 1, name="decoder.head.conv", seed=seed, dtype=dtype)
        self.sigmoid = nn.Sigmoid()

    def forward(self, hidden, remember=True):
        feats = [self.entry.forward(hidden, remember)]
        for down in self.downs:
            feats.append(down.forward(feats[-1], remember))
        h = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = up.forward(h, skip, remember)
        return self.sigmoid.forward(self.head.forward(h, remember), remember)

    def backward(self, g):
        g = self.head.backward(self.sigmoid.backward(g))
        # ups[j] consumed feats[levels-2-j] as its skip, and each feats[i]
        # with i < levels-1 feeds both the next down and one up block, so
        # its gradient has two contributions.
        skip_grads = {}
        for j in range(len(self.ups) - 1, -1, -1):
            g, g_skip = self.ups[j].backward(g)
            skip_grads[self.cfg.levels - 2 - j] = g_skip
        for i in range(self.cfg.levels - 1, 0, -1):
            g = self.downs[i - 1].backward(g)
            g = g + skip_grads[i - 1]
        return self.entry.backward(g)

    def parameters(self):
        out = self.entry.parameters()
        for down in self.downs:
            out += down.parameters()
        for up in self.ups:
            out += up.parameters()
        out += self.head.parameters()
        return out

    def buffers(self):
        out = self.entry.buffers()
        for down in self.downs:
            out += down.buffers()
        for up in self.ups:
            out += up.buffers()
        return out

    def norms(self):
        out = self.entry.norms()
        for down in self.downs:
            out += down.norms()
        for up in self.ups:
            out += up.norms()
        return out


class E2VModel:
    """The full reconstruction network with hand-threaded backward.

    forward() takes a batch of event-frame stacks shaped (N, 1, D, H, W)
    and returns per-cell occupancy probabilities shaped (N, R, R, R).
    backward() takes gradients of the loss with respect to those
    probabilities and accumulates parameter gradients in place.
    """

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int, dtype):
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(enc_cfg, seed, dtype)
        self.decoder = Decoder(dec_cfg, self.encoder.out_channels, enc_cfg.hidden_spatial, seed, dtype)
        self.training = True
        names = [p.name for p in self.parameters()] + [n for n, _ in self.buffers()]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ChannelMismatch(f"duplicate state names in model: {sorted(dupes)}")

    @property
    def resolution(self) -> int:
        d, h, w = self.enc_cfg.hidden_spatial
        if not (d == h == w):
            raise ConfigError(f"hidden volume {self.enc_cfg.hidden_spatial} is not cubic")
        return d

    def forward(self, frames: np.ndarray, remember: bool = True) -> np.ndarray:
        hidden = self.encoder.forward(frames, remember)
        vol = self.decoder.forward(hidden, remember)
        return vol[:, 0]

    def backward(self, grad_probs: np.ndarray) -> np.ndarray:
        g = self.decoder.backward(grad_probs[:, None].astype(self.dtype, copy=False))
        return self.encoder.backward(g)

    def parameters(self) -> list[nn.Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return self.encoder.buffers() + self.decoder.buffers()

    def norms(self):
        return self.encoder.norms() + self.decoder.norms()

    def train(self) -> "E2VModel":
        self.training = True
        for norm in self.norms():
            norm.training = True
        return self

    def eval(self) -> "E2VModel":
        self.training = False
        for norm in self.norms():
            norm.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.value) for p in self.parameters()] + list(self.buffers())

    def load_state(self, entries: dict[str, np.ndarray]):
        """Install parameter and buffer values from a checkpoint dict."""
        own = {p.name: p for p in self.parameters()}
        buf_names = {name for name, _ in self.buffers()}
        expected = set(own) | buf_names
        got = set(entries)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise CheckpointMismatch(
                f"checkpoint does not match model: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, p in own.items():
            value = entries[name]
            if value.shape != p.value.shape:
                raise CheckpointMismatch(
                    f"{name}: checkpoint shape {value.shape} != model shape {p.value.shape}"
                )
            p.value = value.astype(self.dtype)
        for norm in self.norms():
            names = [name for name, _ in norm.buffers()]
            if not names:
                continue
            mean_name, var_name = names
            for name in names:
                if entries[name].size != norm.channels:
                    raise CheckpointMismatch(
                        f"{name}: checkpoint has {entries[name].size} values, "
                        f"model expects {norm.channels}"
                    )
            norm.load_buffers(entries[mean_name], entries[var_name])


def build_model(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0,
                dtype=np.float32) -> E2VModel:
    return E2VModel(enc_cfg, dec_cfg, seed, dtype)


def encode(model: E2VModel, frames: np.ndarray, remember: bool = False) -> np.ndarray:
    """Run only the encoder: frames (N, 1, D, H, W) -> hidden (N, C, *hidden_spatial)."""
    return model.encoder.forward(frames, remember)


def decode(model: E2VModel, hidden: np.ndarray, remember: bool = False) -> np.ndarray:
    """Run only the decoder: hidden volume -> probabilities (N, R, R, R)."""
    return model.decoder.forward(hidden, remember)[:, 0]


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to pred.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs so a
    saturated sigmoid cannot produce an infinite loss. The gradient uses
    the clamped value in the same way, (p - v) / (p (1 - p)) / N.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ResolutionMismatch(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    if pred.size == 0:
        raise ShapeMismatch("cannot take a loss over zero voxels")
    p = np.clip(pred.astype(np.float64), LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    v = target.astype(np.float64)
    n = p.size
    loss = -float(np.sum(v * np.log(p) + (1.0 - v) * np.log1p(-p))) / n
    grad = (p - v) / (p * (1.0 - p)) / n
    return loss, grad


def count_parameters(model: E2VModel) -> int:
    return sum(p.value.size for p in model.parameters())


def frames_to_input(stacks, dtype=np.float32) -> np.ndarray:
    """Stack FrameStack objects into a model input batch (N, 1, D, H, W)."""
    arrs = [np.asarray(getattr(s, "frames", s)) for s in stacks]
    first = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != first:
            raise ShapeMismatch(f"frame stacks disagree in shape: {first} vs {a.shape}")
    return np.stack(arrs)[:, None].astype(dtype)


def model_config_dict(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int) -> dict:
    return {"encoder": enc_cfg.to_dict(), "decoder": dec_cfg.to_dict(), "seed": seed}


def model_from_config_dict(d: dict, dtype=np.float32) -> E2VModel:
    return build_model(
        EncoderConfig.from_dict(d["encoder"]),
        DecoderConfig.from_dict(d["decoder"]),
        seed=int(d.get("seed", 0)),
        dtype=dtype,
    )
