"""Convolutional descriptor extractors for 2D frames and 3D volumes.

Both nets share one architecture parameterized by dimensionality: three
stride-2 residual stages followed by one stride-1 decoder residual stage with
a projection skip, then a 1x1 head producing 32-d descriptors on a 1/8-
resolution grid.  All convolutions are bias-free; normalization is non-affine
instance norm.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .cmt import read_cmt, write_cmt
from .engine import Tensor
from .geometry import RigidPose

STRIDE_PX = 8
STANDARD_CHANNELS = (16, 32, 64, 64)
SMALL_CHANNELS = (8, 16, 32, 32)


@dataclass
class NetworkConfig:
    variant: str = "standard"
    input_channels: int = 1
    descriptor_dim: int = 32
    stage_channels: tuple[int, int, int, int] = STANDARD_CHANNELS
    leaky_slope: float = 0.01
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.descriptor_dim < 1 or self.input_channels < 1:
            raise ValueError("descriptor_dim and input_channels must be positive")

    @classmethod
    def from_variant(cls, variant: str, **kw) -> "NetworkConfig":
        channels = {"standard": STANDARD_CHANNELS, "small": SMALL_CHANNELS}
        if variant not in channels:
            raise ValueError(f"unknown variant {variant!r}, expected one of {sorted(channels)}")
        return cls(variant=variant, stage_channels=channels[variant], **kw)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "input_channels": self.input_channels,
                "descriptor_dim": self.descriptor_dim,
                "stage_channels": list(self.stage_channels),
                "leaky_slope": self.leaky_slope, "norm_epsilon": self.norm_epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(variant=d["variant"], input_channels=d["input_channels"],
                   descriptor_dim=d["descriptor_dim"],
                   stage_channels=tuple(d["stage_channels"]),
                   leaky_slope=d["leaky_slope"], norm_epsilon=d["norm_epsilon"])


def residual_block_forward(x: Tensor, w1: Tensor, w2: Tensor,
                           skip: Tensor | None = None, stride: int = 1,
                           slope: float = 0.01, eps: float = 1e-5) -> Tensor:
    """conv-norm-act-conv-norm inner path added to an identity or 1x1 shortcut."""
    c_in = x.shape[1]
    c_out = w1.shape[0]
    if skip is None and (stride != 1 or c_in != c_out):
        raise ValueError("identity shortcut requires stride 1 and equal channel counts")
    h = engine.instance_norm(engine.conv(x, w1, stride), eps)
    h = engine.leaky_relu(h, slope)
    h = engine.instance_norm(engine.conv(h, w2, 1), eps)
    sc = x if skip is None else engine.conv(x, skip, stride)
    return engine.add(h, sc)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FeatureNet:
    """Descriptor extractor; ``dimensionality`` is 2 (frames) or 3 (volumes)."""

    def __init__(self, config: NetworkConfig, dimensionality: int, seed: int = 0):
        if dimensionality not in (2, 3):
            raise ValueError(f"dimensionality must be 2 or 3, got {dimensionality}")
        self.config = config
        self.dimensionality = dimensionality
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed, dimensionality])
        k3 = (3,) * dimensionality
        k1 = (1,) * dimensionality
        c_prev = config.input_channels
        for name, c_out in zip(("enc1", "enc2", "enc3", "dec"), config.stage_channels):
            self.params[f"{name}.w1"] = engine.parameter(_he_uniform(rng, (c_out, c_prev) + k3))
            self.params[f"{name}.w2"] = engine.parameter(_he_uniform(rng, (c_out, c_out) + k3))
            self.params[f"{name}.skip"] = engine.parameter(_he_uniform(rng, (c_out, c_prev) + k1))
            c_prev = c_out
        self.params["head.w"] = engine.parameter(
            _he_uniform(rng, (config.descriptor_dim, c_prev) + k1))

    def forward(self, x: Tensor) -> Tensor:
        """(1, C, *spatial) -> (1, descriptor_dim, *spatial_ceil_div_8)."""
        if x.ndim != self.dimensionality + 2:
            raise ValueError(f"expected {self.dimensionality + 2}-d input, got shape {x.shape}")
        cfg = self.config
        h = x
        for name, stride in (("enc1", 2), ("enc2", 2), ("enc3", 2), ("dec", 1)):
            h = residual_block_forward(
                h, self.params[f"{name}.w1"], self.params[f"{name}.w2"],
                self.params[f"{name}.skip"], stride, cfg.leaky_slope, cfg.norm_epsilon)
            h = engine.leaky_relu(h, cfg.leaky_slope)
        return engine.conv(h, self.params["head.w"], 1)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"parameter {name!r} shape {arrays[name].shape} "
                                 f"!= expected {p.data.shape}")
            p.data = np.asarray(arrays[name], dtype=engine.get_dtype())


@dataclass
class DescriptorGrid:
    """Dense descriptors on the 8-px cell lattice of a source image.

    ``descriptors`` is (n_cells, descriptor_dim) in row-major cell order and
    stays a Tensor so losses can backpropagate into the network.  ``pose``
    maps source pixel coordinates (in mm, i.e. index * spacing) into world
    space for 2D frames or MR space for 3D volumes.
    """

    grid_dims: tuple[int, ...]
    descriptor_dim: int
    descriptors: Tensor
    spacing_mm: tuple[float, ...]
    pose: RigidPose
    stride_px: int = STRIDE_PX

    def __post_init__(self):
        if len(self.grid_dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got dims {self.grid_dims}")
        if len(self.spacing_mm) != len(self.grid_dims):
            raise ValueError("spacing_mm must match grid dimensionality")
        if self.descriptors.shape != (self.n_cells, self.descriptor_dim):
            raise ValueError(f"descriptor tensor shape {self.descriptors.shape} != "
                             f"({self.n_cells}, {self.descriptor_dim})")

    @property
    def dimensionality(self) -> int:
        return len(self.grid_dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.grid_dims))


def pad_to_multiple(image: np.ndarray, multiple: int = STRIDE_PX) -> np.ndarray:
    pads = [(0, (-n) % multiple) for n in image.shape]
    if not any(hi for _, hi in pads):
        return image
    return np.pad(image, pads)


def extract_features(image: np.ndarray, net: FeatureNet,
                     spacing_mm, pose: RigidPose | None = None) -> DescriptorGrid:
    """Run the net on one image and return its cropped descriptor grid.

    The image is end-padded to a multiple of 8 per axis; the grid is cropped
    back to floor(extent / 8) cells so every kept cell has full 8-px support.
    """
    img = np.asarray(image)
    if img.ndim != net.dimensionality:
        raise ValueError(f"image rank {img.ndim} != net dimensionality {net.dimensionality}")
    if any(n < STRIDE_PX for n in img.shape):
        raise ValueError(f"every image extent must be >= {STRIDE_PX}, got {img.shape}")
    spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64),
                                                      (img.ndim,)))
    padded = pad_to_multiple(img)
    x = engine.tensor(padded[None, None])
    raw = net.forward(x)
    keep = tuple(n // STRIDE_PX for n in img.shape)
    d = net.config.descriptor_dim
    trimmed = engine.crop(raw, (0, 0) + (0,) * img.ndim, (1, d) + keep)
    flat = engine.reshape(trimmed, (d, int(np.prod(keep))))
    desc = engine.transpose(flat)
    return DescriptorGrid(grid_dims=keep, descriptor_dim=d, descriptors=desc,
                          spacing_mm=spacing,
                          pose=pose if pose is not None else RigidPose.identity())


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor | np.ndarray],
                    manifest: dict) -> None:
    """Write one tensor container per parameter plus a manifest.json."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, value in sorted(params.items()):
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        fname = f"{name}.cmt"
        write_cmt(out / fname, arr)
        files[name] = fname
    doc = dict(manifest)
    doc["params"] = files
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    arrays = {name: read_cmt(root / fname) for name, fname in manifest["params"].items()}
    return arrays, manifest
