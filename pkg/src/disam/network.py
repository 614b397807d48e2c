"""Per-domain encoders, decoders and PatchGAN discriminators.

Each environmental domain owns one encoder, one decoder and one discriminator.
Translating an image from domain ``i`` to domain ``j`` is
``decode(j, encode(i, x))``; the latent content code produced by ``encode`` is
the feature map used for retrieval.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datamodel import ImageSample
from .errors import CorruptCheckpoint, InvalidConfig, ShapeMismatch, VersionMismatch

CKPT_MAGIC = b"DISAMCKPT"
CKPT_VERSION = 1
STAGES = ("coarse", "fine")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 64
    base_channels: int = 16
    latent_channels: int = 64
    n_res_blocks_total: int = 4
    n_domains: int = 3
    disc_layers: int = 3
    seed: int = 0
    # start every domain's encoder/decoder from one common draw, so the
    # per-domain latent spaces begin aligned; discriminators stay independent
    shared_init: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 4:
            raise InvalidConfig(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.n_res_blocks_total < 0 or self.n_res_blocks_total % 2:
            raise InvalidConfig("n_res_blocks_total must be even")
        if self.n_domains < 2:
            raise InvalidConfig("need at least 2 domains")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        if self.disc_layers < 1 or self.image_size % (2 ** self.disc_layers):
            raise InvalidConfig("image_size must be divisible by 2**disc_layers")

    @property
    def latent_shape(self):
        s = self.image_size // 4
        return (self.latent_channels, s, s)

    @property
    def patch_size(self):
        return self.image_size // 2 ** self.disc_layers

    # fields that change tensor shapes; a checkpoint must agree on all of them
    ARCH_FIELDS = ("image_size", "base_channels", "latent_channels",
                   "n_res_blocks_total", "n_domains", "disc_layers")


def _conv_block(cin, cout, **kw):
    return [nn.Conv2d(cin, cout, **kw), nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        layers = [nn.ReflectionPad2d(3), *_conv_block(3, b, kernel_size=7)]
        layers += _conv_block(b, 2 * b, kernel_size=3, stride=2, padding=1)
        layers += _conv_block(2 * b, cfg.latent_channels, kernel_size=3, stride=2, padding=1)
        layers += [ResidualBlock(cfg.latent_channels) for _ in range(cfg.n_res_blocks_total // 2)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        layers = [ResidualBlock(cfg.latent_channels) for _ in range(cfg.n_res_blocks_total // 2)]
        for cin, cout in ((cfg.latent_channels, 2 * b), (2 * b, b)):
            layers += [
                nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(b, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, z):
        return self.model(z)


class Discriminator(nn.Module):
    """PatchGAN: ``disc_layers`` stride-2 convolutions, then a 1-channel score map.

    There is no final sigmoid; scores are used with least-squares GAN losses.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        layers = [nn.Conv2d(3, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        cin = b
        for k in range(1, cfg.disc_layers):
            cout = b * min(2 ** k, 8)
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _init_weights(module, generator):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        with torch.no_grad():
            module.weight.normal_(0.0, 0.02, generator=generator)
            if module.bias is not None:
                module.bias.zero_()


class ModelBundle(nn.Module):
    """All per-domain networks plus the training position (epoch, stage)."""

    def __init__(self, config: NetworkConfig, epoch: int = 0, stage: str = "coarse"):
        super().__init__()
        if stage not in STAGES:
            raise InvalidConfig(f"unknown stage {stage!r}")
        self.config = config
        self.epoch = epoch
        self.stage = stage
        self.encoders = nn.ModuleList(Encoder(config) for _ in range(config.n_domains))
        self.decoders = nn.ModuleList(Decoder(config) for _ in range(config.n_domains))
        self.discriminators = nn.ModuleList(Discriminator(config) for _ in range(config.n_domains))

    def generator_parameters(self):
        return list(self.encoders.parameters()) + list(self.decoders.parameters())

    def discriminator_parameters(self):
        return list(self.discriminators.parameters())

    def fingerprint(self):
        """Short hash of all parameter values; identifies the producing model."""
        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def init_bundle(config: NetworkConfig) -> ModelBundle:
    """Build a bundle with N(0, 0.02) conv weights; deterministic in ``config.seed``."""
    bundle = ModelBundle(config)
    gen = torch.Generator().manual_seed(config.seed)
    for module in bundle.modules():
        _init_weights(module, gen)
    if config.shared_init:
        for k in range(1, config.n_domains):
            bundle.encoders[k].load_state_dict(bundle.encoders[0].state_dict())
            bundle.decoders[k].load_state_dict(bundle.decoders[0].state_dict())
    return bundle


def _check_domain(bundle, domain):
    if not 0 <= int(domain) < bundle.config.n_domains:
        raise ShapeMismatch(f"domain {domain} out of range for {bundle.config.n_domains} domains")
    return int(domain)


def _as_batch(x, shape, what):
    if isinstance(x, ImageSample):
        x = x.pixels
    if not torch.is_tensor(x):
        x = np.asarray(x)
        # ImageSample pixels are read-only; torch wants a writable buffer
        x = torch.from_numpy(x if x.flags.writeable else x.copy())
    single = x.dim() == len(shape)
    if single:
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != tuple(shape):
        raise ShapeMismatch(f"{what}: expected trailing shape {tuple(shape)}, got {tuple(x.shape[1:])}")
    return x, single


def _param_dtype(module):
    return next(module.parameters()).dtype


def encode(bundle: ModelBundle, domain, img):
    """Latent content code of ``img`` under the encoder of ``domain``.

    Accepts an ImageSample, a (3, H, W) raster or a (B, 3, H, W) batch and
    returns a tensor of matching rank.
    """
    d = _check_domain(bundle, domain)
    s = bundle.config.image_size
    x, single = _as_batch(img, (3, s, s), "encode")
    enc = bundle.encoders[d]
    z = enc(x.to(_param_dtype(enc)))
    return z[0] if single else z


def decode(bundle: ModelBundle, domain, z):
    d = _check_domain(bundle, domain)
    z, single = _as_batch(z, bundle.config.latent_shape, "decode")
    dec = bundle.decoders[d]
    x = dec(z.to(_param_dtype(dec)))
    return x[0] if single else x


def discriminate(bundle: ModelBundle, domain, img):
    """Patch score grid of shape (image_size / 2**disc_layers) squared."""
    d = _check_domain(bundle, domain)
    s = bundle.config.image_size
    x, single = _as_batch(img, (3, s, s), "discriminate")
    disc = bundle.discriminators[d]
    out = disc(x.to(_param_dtype(disc)))[:, 0]
    return out[0] if single else out


def translate(bundle: ModelBundle, source, target, img):
    return decode(bundle, target, encode(bundle, source, img))


# -- checkpoints -------------------------------------------------------------

def _write_str(buf, s):
    data = s.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _pack_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("unexpected end of checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensors(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            name = self.string()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)
            out[name] = torch.from_numpy(arr.astype(np.float32))
        return out


def save_checkpoint(bundle: ModelBundle, path, extra_tensors=None, extra_state=None):
    """Write ``bundle`` atomically (write to temp file, then rename).

    ``extra_tensors`` (e.g. optimizer moments) and the JSON-able
    ``extra_state`` (e.g. RNG state) let a trainer resume exactly.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = {
        "config": asdict(bundle.config),
        "epoch": bundle.epoch,
        "stage": bundle.stage,
        "extra": extra_state or {},
    }
    _write_str(buf, json.dumps(header, sort_keys=True))
    _pack_tensors(buf, bundle.state_dict())
    _pack_tensors(buf, extra_tensors or {})
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_checkpoint(path, config: NetworkConfig | None = None):
    """Return ``(bundle, extra_tensors, extra_state)`` from a checkpoint file.

    If ``config`` is given, its architecture fields must match the file's.
    """
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(CKPT_MAGIC) + 4 + 32:
        raise CorruptCheckpoint(f"{path}: truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(len(CKPT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CKPT_VERSION}")
    header = json.loads(r.string())
    known = {f.name for f in fields(NetworkConfig)}
    saved = NetworkConfig(**{k: v for k, v in header["config"].items() if k in known})
    if config is not None:
        diff = [k for k in NetworkConfig.ARCH_FIELDS if getattr(config, k) != getattr(saved, k)]
        if diff:
            raise VersionMismatch(
                f"{path}: checkpoint architecture differs in {', '.join(diff)}"
            )
    params = r.tensors()
    extra = r.tensors()
    bundle = ModelBundle(saved, epoch=header["epoch"], stage=header["stage"])
    try:
        bundle.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    return bundle, extra, header["extra"]


def load_checkpoint(path, config: NetworkConfig | None = None) -> ModelBundle:
    return read_checkpoint(path, config)[0]
