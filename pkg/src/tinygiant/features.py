"""Frozen toy patch encoders, region pooling, and the on-disk feature cache.

The encoders stand in for pretrained ViT backbones: an image is cut into
non-overlapping patches, each patch is linearly projected, and the global
feature is a linear map of the mean patch embedding.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .masks import PatchGrid, RegionIndexSet, downsample_mask

CACHE_MAGIC = b"TGFC"
CACHE_VERSION = 1


class EncoderInputError(ValueError):
    pass


class CacheMissError(KeyError):
    pass


class CacheFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityEncoderConfig:
    modality: str = "rgb"
    image_size: int = 224
    patch_size: int = 14
    embed_dim: int = 32
    # multiplies raw pixel values (RGB 0..255, depth in meters) before projection
    input_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def patch_grid(self, source_size: tuple[int, int]) -> PatchGrid:
        return PatchGrid.square(self.image_size, self.patch_size, source_size)


RGB_DEFAULT = ModalityEncoderConfig("rgb", 224, 14, 32, 1.0 / 255.0)
DEPTH_DEFAULT = ModalityEncoderConfig("depth", 384, 16, 32, 0.1)


@dataclass
class ToyEncoder:
    config: ModalityEncoderConfig
    patch_weight: np.ndarray  # (3*p*p, embed_dim)
    patch_bias: np.ndarray  # (embed_dim,)
    global_weight: np.ndarray  # (embed_dim, embed_dim)
    global_bias: np.ndarray

    @classmethod
    def init(cls, config: ModalityEncoderConfig, rng: np.random.Generator) -> "ToyEncoder":
        fan_in = 3 * config.patch_size**2
        return cls(
            config,
            rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, config.embed_dim)),
            rng.normal(0.0, 0.1, config.embed_dim),
            rng.normal(0.0, 1.0 / np.sqrt(config.embed_dim), (config.embed_dim, config.embed_dim)),
            rng.normal(0.0, 0.1, config.embed_dim),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        m = self.config.modality
        return {
            f"{m}.patch_weight": self.patch_weight,
            f"{m}.patch_bias": self.patch_bias,
            f"{m}.global_weight": self.global_weight,
            f"{m}.global_bias": self.global_bias,
        }


def replicate_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 2:
        depth = depth[None]
    if depth.shape[0] != 1:
        raise EncoderInputError(f"depth map must have one channel, got {depth.shape[0]}")
    return np.repeat(depth, 3, axis=0)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[:, rows[:, None], cols[None, :]]


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(3, H, W) -> (N, 3*p*p), patches in row-major grid order."""
    c, h, w = image.shape
    g_r, g_c = h // patch, w // patch
    x = image.reshape(c, g_r, patch, g_c, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(g_r * g_c, c * patch * patch)


def encode(image: np.ndarray, encoder: ToyEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Return (global feature, patch embeddings) for a 3-channel image."""
    cfg = encoder.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise EncoderInputError(f"{cfg.modality} encoder expects a (3, H, W) image, got {image.shape}")
    if image.shape[1:] != (cfg.image_size, cfg.image_size):
        raise EncoderInputError(
            f"{cfg.modality} encoder expects {cfg.image_size}x{cfg.image_size} pixels, got {image.shape[1]}x{image.shape[2]}"
        )
    patches = patchify(image * cfg.input_scale, cfg.patch_size)
    embeddings = patches @ encoder.patch_weight + encoder.patch_bias
    global_feature = embeddings.mean(axis=0) @ encoder.global_weight + encoder.global_bias
    return global_feature, embeddings


def pool_region(embeddings: np.ndarray, indices: RegionIndexSet | Sequence[int]) -> np.ndarray:
    """Arithmetic mean of the patch rows named by ``indices``."""
    idx = indices.indices if isinstance(indices, RegionIndexSet) else indices
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot pool an empty region")
    if idx.min() < 0 or idx.max() >= embeddings.shape[0]:
        raise IndexError(f"patch index out of range for {embeddings.shape[0]} patches")
    return embeddings[idx].sum(axis=0) / idx.size


@dataclass
class FeatureRecord:
    """Cached inputs for one sample: global features plus per-region pooled features."""

    sample_id: str
    f_rgb: np.ndarray
    f_depth: np.ndarray
    region_rgb: list[np.ndarray]
    region_depth: list[np.ndarray]

    @property
    def num_regions(self) -> int:
        return len(self.region_rgb)


def extract_record(
    sample_id: str,
    rgb: np.ndarray,
    depth: np.ndarray,
    masks: Sequence[np.ndarray],
    rgb_encoder: ToyEncoder,
    depth_encoder: ToyEncoder,
    threshold: float = 0.5,
) -> FeatureRecord:
    """Global and region features for one sample; ``masks`` are decoded pixel grids.

    Images are resized (nearest neighbour) to each encoder's input size first.
    """
    f_rgb, e_rgb = encode(resize_image(rgb, rgb_encoder.config.image_size), rgb_encoder)
    f_depth, e_depth = encode(resize_image(replicate_depth(depth), depth_encoder.config.image_size), depth_encoder)
    reg_rgb, reg_depth = [], []
    for j, pixels in enumerate(masks):
        source = tuple(pixels.shape)
        p_rgb = downsample_mask(pixels, rgb_encoder.config.patch_grid(source), threshold, region_id=j)
        p_depth = downsample_mask(pixels, depth_encoder.config.patch_grid(source), threshold, region_id=j)
        reg_rgb.append(pool_region(e_rgb, p_rgb))
        reg_depth.append(pool_region(e_depth, p_depth))
    return FeatureRecord(sample_id, f_rgb, f_depth, reg_rgb, reg_depth)


# feature cache -----------------------------------------------------------------
#
# b"TGFC" u32 version, then records:
#   u32 id length, id, u32 dim + f64 rgb global, u32 dim + f64 depth global,
#   u32 R, R x (u32 dim + f64 rgb region, u32 dim + f64 depth region)
# then the index: per record (u32 id length, id, u64 offset),
# and a trailer: u64 index offset, u32 record count.


def _pack_vec(buf: io.BytesIO, v: np.ndarray) -> None:
    v = np.ascontiguousarray(v, dtype="<f8").reshape(-1)
    buf.write(struct.pack("<I", v.size))
    buf.write(v.tobytes())


def _pack_record(rec: FeatureRecord) -> bytes:
    for arr in [rec.f_rgb, rec.f_depth, *rec.region_rgb, *rec.region_depth]:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite features for sample {rec.sample_id}")
    buf = io.BytesIO()
    raw = rec.sample_id.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    _pack_vec(buf, rec.f_rgb)
    _pack_vec(buf, rec.f_depth)
    buf.write(struct.pack("<I", rec.num_regions))
    for a, b in zip(rec.region_rgb, rec.region_depth):
        _pack_vec(buf, a)
        _pack_vec(buf, b)
    return buf.getvalue()


def cache_write(records: Iterable[FeatureRecord], path) -> None:
    """Write all records to one cache file (single writer, atomic replace)."""
    body = io.BytesIO()
    body.write(CACHE_MAGIC)
    body.write(struct.pack("<I", CACHE_VERSION))
    index: list[tuple[str, int]] = []
    for rec in records:
        index.append((rec.sample_id, body.tell()))
        body.write(_pack_record(rec))
    index_offset = body.tell()
    for sample_id, offset in index:
        raw = sample_id.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<Q", offset))
    body.write(struct.pack("<QI", index_offset, len(index)))
    atomic_write_bytes(path, body.getvalue())


class FeatureCache:
    """Random-access reader over a cache file."""

    def __init__(self, path):
        self.path = Path(path)
        self._payload = self.path.read_bytes()
        p = self._payload
        if len(p) < 20 or p[:4] != CACHE_MAGIC:
            raise CacheFormatError(f"{self.path} is not a feature cache (bad magic)")
        (version,) = struct.unpack_from("<I", p, 4)
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{self.path}: unsupported cache version {version}")
        try:
            index_offset, count = struct.unpack_from("<QI", p, len(p) - 12)
            pos = index_offset
            self._offsets: dict[str, int] = {}
            for _ in range(count):
                (n,) = struct.unpack_from("<I", p, pos)
                sid = p[pos + 4 : pos + 4 + n].decode("utf-8")
                (offset,) = struct.unpack_from("<Q", p, pos + 4 + n)
                self._offsets[sid] = offset
                pos += 12 + n
        except (struct.error, UnicodeDecodeError) as exc:
            raise CacheFormatError(f"{self.path}: corrupted index ({exc})") from exc
        if pos != len(p) - 12:
            raise CacheFormatError(f"{self.path}: corrupted index")

    def ids(self) -> list[str]:
        return list(self._offsets)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def _vec(self, pos: int) -> tuple[np.ndarray, int]:
        (n,) = struct.unpack_from("<I", self._payload, pos)
        v = np.frombuffer(self._payload, dtype="<f8", count=n, offset=pos + 4).astype(np.float64)
        return v, pos + 4 + 8 * n

    def read(self, sample_id: str) -> FeatureRecord:
        if sample_id not in self._offsets:
            raise CacheMissError(f"sample {sample_id!r} is not in cache {self.path}")
        pos = self._offsets[sample_id]
        p = self._payload
        try:
            (n,) = struct.unpack_from("<I", p, pos)
            sid = p[pos + 4 : pos + 4 + n].decode("utf-8")
            if sid != sample_id:
                raise CacheFormatError(f"{self.path}: index points at {sid!r} for {sample_id!r}")
            pos += 4 + n
            f_rgb, pos = self._vec(pos)
            f_depth, pos = self._vec(pos)
            (r,) = struct.unpack_from("<I", p, pos)
            pos += 4
            reg_rgb, reg_depth = [], []
            for _ in range(r):
                a, pos = self._vec(pos)
                b, pos = self._vec(pos)
                reg_rgb.append(a)
                reg_depth.append(b)
        except (struct.error, ValueError) as exc:
            if isinstance(exc, CacheFormatError):
                raise
            raise CacheFormatError(f"{self.path}: corrupted record for {sample_id!r}") from exc
        return FeatureRecord(sample_id, f_rgb, f_depth, reg_rgb, reg_depth)


def cache_read(path, sample_id: str) -> FeatureRecord:
    return FeatureCache(path).read(sample_id)
