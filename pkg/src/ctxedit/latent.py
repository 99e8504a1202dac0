"""Visual codec: lossless latent transform, mask resize, patchify.

The "latent" here is an invertible space-to-depth rearrangement rather
than a learned autoencoder, so codec round-trips are bit-exact and codec
bugs can never masquerade as model error.  The mask is downsampled to the
latent grid and rides along as one extra channel through patchify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DOWNSAMPLE = 2   # spatial factor between pixels and latent grid
DEFAULT_PATCH = 2        # patch edge on the latent grid
DEFAULT_VISUAL_CAP = 1024
EXTENDED_VISUAL_CAP = 4096


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    downsample: int = DEFAULT_DOWNSAMPLE
    patch: int = DEFAULT_PATCH
    visual_cap: int = DEFAULT_VISUAL_CAP

    def latent_channels(self, image_channels: int) -> int:
        return image_channels * self.downsample * self.downsample

    def token_dim(self, image_channels: int) -> int:
        # +1 for the mask channel that is concatenated onto the latent
        return (self.latent_channels(image_channels) + 1) * self.patch * self.patch

    def tokens_per_frame(self, height: int, width: int) -> int:
        f, p = self.downsample, self.patch
        if height % (f * p) or width % (f * p):
            raise CodecError(f"{height}x{width} not divisible by downsample*patch={f * p}")
        return (height // (f * p)) * (width // (f * p))


def encode_latent(image: np.ndarray, factor: int = DEFAULT_DOWNSAMPLE) -> np.ndarray:
    """Space-to-depth: (H, W, C) -> (H/f, W/f, C*f*f), information preserving."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise CodecError(f"expected HxWxC image, got shape {img.shape}")
    h, w, c = img.shape
    if h % factor or w % factor:
        raise CodecError(f"image {h}x{w} not divisible by factor {factor}")
    blocks = img.reshape(h // factor, factor, w // factor, factor, c)
    # latent channel layout: (channel, block-row, block-col), channel-major
    return np.ascontiguousarray(
        blocks.transpose(0, 2, 4, 1, 3).reshape(h // factor, w // factor, c * factor * factor)
    )


def decode_latent(latent: np.ndarray, factor: int = DEFAULT_DOWNSAMPLE) -> np.ndarray:
    """Exact inverse of encode_latent.  No clamping: callers clamp only at
    final image emission."""
    lat = np.asarray(latent)
    if lat.ndim != 3:
        raise CodecError(f"expected hxwxC latent, got shape {lat.shape}")
    h, w, ch = lat.shape
    if ch % (factor * factor):
        raise CodecError(f"latent channels {ch} not a multiple of factor^2={factor * factor}")
    c = ch // (factor * factor)
    blocks = lat.reshape(h, w, c, factor, factor)
    return np.ascontiguousarray(
        blocks.transpose(0, 3, 1, 4, 2).reshape(h * factor, w * factor, c)
    )


def downsample_mask(mask: np.ndarray, factor: int = DEFAULT_DOWNSAMPLE) -> np.ndarray:
    """Max over each f x f pixel block: a latent cell is marked if any of
    its pixels is, so edit regions never shrink."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise CodecError(f"expected HxW mask, got shape {m.shape}")
    h, w = m.shape
    if h % factor or w % factor:
        raise CodecError(f"mask {h}x{w} not divisible by factor {factor}")
    return m.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def latent_stack(image: np.ndarray, mask: np.ndarray, factor: int = DEFAULT_DOWNSAMPLE) -> np.ndarray:
    """Latent image with its downsampled mask concatenated channel-wise."""
    lat = encode_latent(image, factor)
    m = downsample_mask(mask, factor)
    if m.shape != lat.shape[:2]:
        raise CodecError(f"mask grid {m.shape} does not match latent grid {lat.shape[:2]}")
    return np.concatenate([lat, m[:, :, None].astype(lat.dtype)], axis=2)


def split_stack(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return stack[:, :, :-1], stack[:, :, -1]


def patchify(stack: np.ndarray, patch: int = DEFAULT_PATCH) -> tuple[np.ndarray, int, int]:
    """Flatten a latent(+mask) grid into a row-major 1-D token sequence.

    Returns (tokens, grid_h, grid_w) where tokens has shape
    (grid_h * grid_w, patch * patch * channels).
    """
    arr = np.asarray(stack)
    if arr.ndim != 3:
        raise CodecError(f"expected hxwxC stack, got shape {arr.shape}")
    h, w, c = arr.shape
    if h % patch or w % patch:
        raise CodecError(f"grid {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = arr.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch * c)), gh, gw


def unpatchify(tokens: np.ndarray, grid_h: int, grid_w: int, channels: int, patch: int = DEFAULT_PATCH) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.shape != (grid_h * grid_w, patch * patch * channels):
        raise CodecError(
            f"token array {toks.shape} does not match grid {grid_h}x{grid_w}, "
            f"patch {patch}, channels {channels}"
        )
    tiles = toks.reshape(grid_h, grid_w, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(grid_h * patch, grid_w * patch, channels))


def frame_to_tokens(
    image: np.ndarray, mask: np.ndarray, config: CodecConfig
) -> tuple[np.ndarray, int, int]:
    """Image+mask -> token sequence on the latent patch grid."""
    return patchify(latent_stack(image, mask, config.downsample), config.patch)


def tokens_to_image(
    tokens: np.ndarray, grid_h: int, grid_w: int, image_channels: int, config: CodecConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Token sequence -> (image, latent-resolution mask).  Values are not
    clamped; callers clamp at final emission."""
    channels = config.latent_channels(image_channels) + 1
    stack = unpatchify(tokens, grid_h, grid_w, channels, config.patch)
    lat, mask = split_stack(stack)
    return decode_latent(lat, config.downsample), mask
