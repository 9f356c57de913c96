"""Generator/discriminator networks and the discriminator's embedding function.

The discriminator factors into a conv feature stack (the embedding backbone,
64*7*7 = 3136 features at 28×28 input) and a discriminating affine head with a
logistic output. Embeddings are tapped after the final leaky rectifier, either
flattened as-is or passed through a trainable linear projection.

Parameter files use a self-describing container: a magic string, a JSON header
with a format version and per-tensor name/shape/dtype records, then the raw
little-endian float32 payloads in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
import torch.nn as nn

NOISE_DIM = 100
IMAGE_SIDE = 28
CONV_FEATURES = 64 * 7 * 7
LEAKY_SLOPE = 0.2

_PARAM_MAGIC = b"IBNP"
_PARAM_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input batch has the wrong dimensions."""


class ParamLoadError(RuntimeError):
    """Raised when a parameter file is corrupt or does not match the network."""


class Generator(nn.Module):
    """Maps 100-dim noise to a 28×28×1 image in [-1, 1] (tanh output)."""

    def __init__(self):
        super().__init__()
        self.fc = nn.Sequential(
            nn.Linear(NOISE_DIM, 7 * 7 * 512),
            nn.BatchNorm1d(7 * 7 * 512),
            nn.ReLU(),
        )
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(512, 256, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(256),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.ConvTranspose2d(256, 128, 3, stride=1, padding=1),
            nn.BatchNorm2d(128),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.ConvTranspose2d(128, 64, 3, stride=1, padding=1),
            nn.BatchNorm2d(64),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.ConvTranspose2d(64, 1, 3, stride=2, padding=1, output_padding=1),
            nn.Tanh(),
        )

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.ndim != 2 or noise.shape[1] != NOISE_DIM:
            raise ShapeError(f"expected (N, {NOISE_DIM}) noise, got {tuple(noise.shape)}")
        h = self.fc(noise)
        return self.deconv(h.view(-1, 512, 7, 7))


class Discriminator(nn.Module):
    """Conv stack 1→8→16→32→64 plus a logistic real/fake head.

    Stride/padding (1,2,1,2 with padding 1 throughout) gives spatial maps
    28→28→14→14→7, so the flattened feature width is 64*7*7 = 3136.
    """

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=1, padding=1),
            nn.BatchNorm2d(8),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.BatchNorm2d(16),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(16, 32, 3, stride=1, padding=1),
            nn.BatchNorm2d(32),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.head = nn.Linear(CONV_FEATURES, 1)

    def conv_features(self, images: torch.Tensor) -> torch.Tensor:
        """Flattened post-rectifier conv features, (N, 3136)."""
        if images.ndim != 4 or images.shape[1:] != (1, IMAGE_SIDE, IMAGE_SIDE):
            raise ShapeError(
                f"expected (N, 1, {IMAGE_SIDE}, {IMAGE_SIDE}) images, got {tuple(images.shape)}"
            )
        return self.features(images).flatten(1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Real-image probabilities, (N,) values strictly inside (0, 1)."""
        return torch.sigmoid(self.head(self.conv_features(images))).squeeze(1)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.conv_features(images)).squeeze(1)


class EmbeddingHead(nn.Module):
    """Final embedding map: identity flatten (d=3136) or a linear projection."""

    def __init__(self, mode: str = "projected", d_proj: int = 128):
        super().__init__()
        if mode not in ("flatten", "projected"):
            raise ValueError(f"unknown embedding head mode {mode!r}")
        self.mode = mode
        if mode == "projected":
            if d_proj < 2:
                raise ValueError("projection dimension must be >= 2")
            self.proj = nn.Linear(CONV_FEATURES, d_proj)
            self.d = d_proj
        else:
            self.proj = None
            self.d = CONV_FEATURES

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != CONV_FEATURES:
            raise ShapeError(f"expected (N, {CONV_FEATURES}) features, got {tuple(features.shape)}")
        return features if self.proj is None else self.proj(features)


def init_dcgan_weights(module: nn.Module, seed: int | None = None) -> None:
    """Normal(0, 0.02) conv/affine weights; batch-norm scale N(1, 0.02), offsets 0."""
    if seed is not None:
        torch.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) numpy batch → (N, C, H, W) float32 torch batch."""
    if images.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got shape {images.shape}")
    return torch.from_numpy(images.transpose(0, 3, 1, 2).copy()).float()


def embed(
    discriminator: Discriminator, head: EmbeddingHead, images: torch.Tensor
) -> torch.Tensor:
    """Embed an image batch: conv features then the embedding head, (N, d)."""
    return head(discriminator.conv_features(images))


@torch.no_grad()
def embed_numpy(
    discriminator: Discriminator, head: EmbeddingHead, images: np.ndarray
) -> np.ndarray:
    """Evaluation-mode embedding of a numpy image batch, returned as float64."""
    was_training = (discriminator.training, head.training)
    discriminator.eval()
    head.eval()
    out = embed(discriminator, head, images_to_tensor(images))
    discriminator.train(was_training[0])
    head.train(was_training[1])
    return out.numpy().astype(np.float64)


def save_params(module: nn.Module, path) -> None:
    """Persist all parameters and buffers (batch-norm statistics included)."""
    state = module.state_dict()
    records = []
    payloads = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        records.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps(
        {
            "format_version": _PARAM_VERSION,
            "topology": type(module).__name__,
            "tensors": records,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_PARAM_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in payloads:
            f.write(blob)


def load_params(module: nn.Module, path) -> None:
    """Restore a `save_params` file; topology must match the target module."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != _PARAM_MAGIC:
        raise ParamLoadError(f"{path} is not a parameter file (bad magic)")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + header_len:
        raise ParamLoadError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(data[12 : 12 + header_len])
    except json.JSONDecodeError as exc:
        raise ParamLoadError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != _PARAM_VERSION:
        raise ParamLoadError(
            f"{path}: format version {header.get('format_version')} != {_PARAM_VERSION}"
        )

    state = module.state_dict()
    records = header["tensors"]
    names = [r["name"] for r in records]
    if names != list(state.keys()) or any(
        tuple(r["shape"]) != tuple(state[r["name"]].shape) for r in records
    ):
        raise ParamLoadError(
            f"{path}: tensor records do not match {type(module).__name__} topology"
        )

    offset = 12 + header_len
    new_state = {}
    for record in records:
        count = int(np.prod(record["shape"])) if record["shape"] else 1
        end = offset + 4 * count
        if end > len(data):
            raise ParamLoadError(f"{path} is truncated (incomplete payload)")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(record["shape"])
        target_dtype = state[record["name"]].dtype
        new_state[record["name"]] = torch.from_numpy(arr.copy()).to(target_dtype)
        offset = end
    module.load_state_dict(new_state)
