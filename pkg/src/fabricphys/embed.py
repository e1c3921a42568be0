"""Physics-similarity embedding network and triplet training.

The network maps one normalised depth image to a point on the 2D physics
similarity map (PSM). Distances on the map are squared Euclidean (PSD).
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError, NumericError, TrainingError

log = logging.getLogger(__name__)

PARAMS_MAGIC = b"PSNT"
PARAMS_VERSION = 1


class PSMPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 256
    channels: tuple = (8, 16, 32, 64)
    kernel_size: int = 3
    pool: int = 2
    fc_widths: tuple = (256, 64)
    output_dim: int = 2
    margin: float = 1.0
    batch_size: int = 32
    lr: float = 1e-2
    lr_step: int = 8
    lr_decay: float = 0.1
    epochs: int = 30
    prelu_init: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.output_dim != 2:
            raise ConfigError("the similarity map is 2D; output_dim must be 2")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        sizes = (self.input_size, self.kernel_size, self.pool, self.batch_size, self.epochs,
                 *self.channels, *self.fc_widths)
        if any(int(s) <= 0 for s in sizes) or not self.channels or len(self.fc_widths) != 2:
            raise ConfigError("layer sizes must be positive; fc_widths needs two hidden widths")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.input_size % self.pool ** len(self.channels):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by pool^{len(self.channels)}")

    @property
    def feature_size(self) -> int:
        return self.input_size // self.pool ** len(self.channels)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


class PhySNet(nn.Module):
    """[conv -> PReLU -> maxpool] x L, flatten, [linear -> PReLU] x 2, linear -> 2."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        layers, c_in = [], 1
        for c_out in config.channels:
            layers += [nn.Conv2d(c_in, c_out, config.kernel_size, padding=config.kernel_size // 2),
                       nn.PReLU(init=config.prelu_init),
                       nn.MaxPool2d(config.pool)]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        flat = c_in * config.feature_size ** 2
        w1, w2 = config.fc_widths
        self.head = nn.Sequential(
            nn.Linear(flat, w1), nn.PReLU(init=config.prelu_init),
            nn.Linear(w1, w2), nn.PReLU(init=config.prelu_init),
            nn.Linear(w2, config.output_dim))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        return self.head(torch.flatten(self.features(images), 1))


def build_net(config: NetConfig) -> PhySNet:
    """Fresh network with seeded fan-in uniform initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return PhySNet(config)


def _as_batch(net: PhySNet, images) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images), dtype=next(net.parameters()).dtype)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    size = net.config.input_size
    if t.dim() != 3 or t.shape[-2:] != (size, size):
        raise InvalidInputError(f"expected {size}x{size} image(s), got shape {tuple(t.shape)}")
    return t


def embed_images(net: PhySNet, images, batch_size: int = 256) -> np.ndarray:
    """(N, 2) map coordinates for a stack of normalised depth images."""
    batch = _as_batch(net, images)
    net.eval()
    with torch.no_grad():
        out = [net(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    return torch.cat(out).double().numpy()


def forward(net: PhySNet, image) -> PSMPoint:
    x, y = embed_images(net, image)[0]
    return PSMPoint(float(x), float(y))


def embed_sequence(net: PhySNet, frames) -> PSMPoint:
    """Centroid of the per-frame points of a depth sequence."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or len(frames) == 0:
        raise InvalidInputError("need a non-empty (T, H, W) sequence")
    pts = embed_images(net, frames)
    # fixed-order accumulation keeps the centroid independent of float summation tricks
    cx, cy = np.sort(pts[:, 0]).sum() / len(pts), np.sort(pts[:, 1]).sum() / len(pts)
    return PSMPoint(float(cx), float(cy))


def psd(p, q):
    """Squared Euclidean distance between map points (last axis = coordinates)."""
    if isinstance(p, torch.Tensor) or isinstance(q, torch.Tensor):
        return ((p - q) ** 2).sum(-1)
    d = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    out = (d ** 2).sum(-1)
    return float(out) if np.ndim(out) == 0 else out


def triplet_loss(anchor, positive, negative, margin: float = 1.0):
    """max(0, PSD(positive, anchor) - PSD(negative, anchor) + margin)."""
    if margin <= 0:
        raise ConfigError("margin must be positive")
    pp = psd(positive, anchor)
    npd = psd(negative, anchor)
    if isinstance(pp, torch.Tensor):
        return torch.clamp(pp - npd + margin, min=0.0)
    out = np.maximum(0.0, pp - npd + margin)
    return float(out) if np.ndim(out) == 0 else out


def batch_loss(net: PhySNet, anchors, positives, negatives, margin: float) -> torch.Tensor:
    n = len(anchors)
    out = net(torch.cat([anchors, positives, negatives]))
    return triplet_loss(out[:n], out[n:2 * n], out[2 * n:], margin).mean()


def _layer_name(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


def gradients(net: PhySNet, anchors, positives, negatives, margin: float | None = None,
              scale: float = 1.0) -> dict[str, torch.Tensor]:
    """d(scale * mean triplet loss)/d(parameter) for every named parameter."""
    margin = net.config.margin if margin is None else margin
    a, p, n = (_as_batch(net, x) for x in (anchors, positives, negatives))
    if len(a) == 0:
        raise InvalidInputError("empty triplet batch")
    for name, param in net.named_parameters():
        if not torch.all(torch.isfinite(param)):
            raise NumericError(f"non-finite gradient in layer {_layer_name(name)} "
                               "(its parameters are non-finite)")
    net.zero_grad()
    loss = scale * batch_loss(net, a, p, n, margin)
    loss.backward()
    grads = {}
    for name, param in net.named_parameters():
        grads[name] = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
    # non-finite values flow backwards, so the deepest bad layer is where they start
    for name in reversed(list(grads)):
        if not torch.all(torch.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient in layer {_layer_name(name)}")
    return grads


def lr_at_epoch(config: NetConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_step)


@dataclass
class TrainResult:
    net: PhySNet
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def train(config: NetConfig, manifest, triplets_per_epoch: int | None = None,
          holdout_camera: int | None = None, store=None) -> TrainResult:
    """Adam + step decay on randomly sampled triplets.

    One epoch is ``triplets_per_epoch`` triplets (default: number of training
    samples). Samples from ``holdout_camera`` are excluded from training.
    """
    from .dataset import ImageStore, TripletSampler

    store = store or ImageStore(manifest)
    keep = np.array([holdout_camera is None or s.camera_index != holdout_camera
                     for s in manifest.samples])
    train_idx = np.flatnonzero(keep)
    sampler = TripletSampler(manifest.labels[train_idx])
    per_epoch = triplets_per_epoch or len(train_idx)

    net = build_net(config)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step, gamma=config.lr_decay)
    result = TrainResult(net)
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        for epoch in range(config.epochs):
            net.train()
            lr = opt.param_groups[0]["lr"]
            total, count = 0.0, 0
            for start in range(0, per_epoch, config.batch_size):
                size = min(config.batch_size, per_epoch - start)
                trip = train_idx[sampler.batch(rng, size)]
                imgs = [torch.from_numpy(store.stack(trip[:, k])) for k in range(3)]
                loss = batch_loss(net, *imgs, config.margin)
                if not torch.isfinite(loss):
                    raise TrainingError(epoch, "non-finite loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * size
                count += size
            sched.step()
            mean = total / count
            result.history.append({"epoch": epoch, "lr": lr, "loss": mean})
            log.info("epoch %d lr %.1e loss %.5f", epoch, lr, mean)
    finally:
        torch.use_deterministic_algorithms(prev_det)
    net.eval()
    return result


def save_net(net: PhySNet, path) -> None:
    """Header (magic, version, config digest, config JSON) then float32 LE tensor blocks."""
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    state = net.state_dict()
    parts = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION), net.config.digest(),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        enc = name.encode()
        parts += [struct.pack("<H", len(enc)), enc, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_net(path) -> PhySNet:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise InvalidInputError(f"{path}: not a network parameter file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != PARAMS_VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    digest = data[8:40]
    (clen,) = struct.unpack_from("<I", data, 40)
    config = NetConfig.from_dict(json.loads(data[44:44 + clen]))
    if config.digest() != digest:
        raise InvalidInputError(f"{path}: config digest mismatch")
    off = 44 + clen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + nlen].decode()
        off += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    net = PhySNet(config)
    net.load_state_dict(state)
    net.eval()
    return net
