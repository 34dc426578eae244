"""Deterministic image ingestion: orient, crop, downscale, convert to sRGB, re-encode."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

from PIL import Image, ImageCms, ImageOps, UnidentifiedImageError

from .errors import DecodeError

SUPPORTED_FORMATS = ("JPEG", "PNG")
MEDIA_TYPE = "image/jpeg"


@dataclass(frozen=True)
class PreprocessConfig:
    max_side: int = 896
    center_crop: bool = False
    jpeg_quality: int = 90

    def __post_init__(self):
        if self.max_side < 64:
            raise ValueError(f"max_side must be >= 64, got {self.max_side}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be in 1..100, got {self.jpeg_quality}")


@dataclass(frozen=True)
class PreparedImage:
    """Encoded image ready to send to a backend."""

    data: bytes
    media_type: str = MEDIA_TYPE
    width: int = 0
    height: int = 0

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


_SRGB = None


def _srgb_profile():
    global _SRGB
    if _SRGB is None:
        _SRGB = ImageCms.createProfile("sRGB")
    return _SRGB


def _to_srgb(img: Image.Image) -> Image.Image:
    icc = img.info.get("icc_profile")
    if icc and img.mode in ("RGB", "RGBA", "CMYK", "L"):
        try:
            src = ImageCms.ImageCmsProfile(io.BytesIO(icc))
            img = ImageCms.profileToProfile(img, src, _srgb_profile(), outputMode="RGB")
        except (ImageCms.PyCMSError, OSError):
            pass
    if img.mode in ("RGBA", "LA") or (img.mode == "P" and "transparency" in img.info):
        rgba = img.convert("RGBA")
        background = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
        img = Image.alpha_composite(background, rgba)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return img


def _center_square(img: Image.Image) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def target_size(width: int, height: int, max_side: int) -> tuple[int, int]:
    longest = max(width, height)
    if longest <= max_side:
        return width, height
    scale = max_side / longest
    return max(1, round(width * scale)), max(1, round(height * scale))


def preprocess(image: bytes, config: PreprocessConfig | None = None) -> PreparedImage:
    """Decode JPEG/PNG bytes and return a normalized JPEG.

    Raises DecodeError on unsupported or corrupt input.
    """
    config = config or PreprocessConfig()
    try:
        img = Image.open(io.BytesIO(image))
        fmt = img.format
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from None
    if fmt not in SUPPORTED_FORMATS:
        raise DecodeError(f"unsupported image format {fmt!r}")

    img = ImageOps.exif_transpose(img)
    img = _to_srgb(img)
    if config.center_crop:
        img = _center_square(img)
    size = target_size(*img.size, config.max_side)
    if size != img.size:
        img = img.resize(size, Image.Resampling.BILINEAR)

    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=config.jpeg_quality, optimize=False, progressive=False)
    return PreparedImage(buf.getvalue(), MEDIA_TYPE, img.width, img.height)


def preprocess_file(path, config: PreprocessConfig | None = None) -> PreparedImage:
    with open(path, "rb") as fh:
        return preprocess(fh.read(), config)
