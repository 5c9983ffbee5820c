"""Raster I/O and geometry helpers plus the training-set augmentations.

All filters replicate the border pixels (edge clamping). Buffers are
``uint8`` arrays of shape ``(height, width, channels)`` in RGB order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .annotations import BoxOutOfBoundsError, LabeledBox


class ImageError(ValueError):
    pass


class UnreadableImageError(ImageError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


SUPPORTED_FORMATS = {"PNG", "JPEG", "PPM"}


@dataclass(frozen=True)
class ImageBuffer:
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageError(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError("image must be at least 1x1")
        if px.dtype != np.uint8:
            if px.size and (np.nanmin(px) < 0 or np.nanmax(px) > 255 or not np.all(np.isfinite(px))):
                raise ImageError("intensities must lie in [0, 255]")
            px = np.rint(px).astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def load_image(path: str | Path) -> ImageBuffer:
    path = Path(path)
    if not path.is_file():
        raise UnreadableImageError(f"{path}: no such file")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedFormatError(f"{path}: unsupported format {fmt}")
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognised raster format") from exc
    except PermissionError as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    return ImageBuffer(arr.copy())


def save_image(img: ImageBuffer, path: str | Path) -> None:
    """Write ``img``; the format follows the suffix (.ppm/.pgm, .png, .jpg)."""
    px = img.pixels
    Image.fromarray(px[:, :, 0] if img.channels == 1 else px).save(path)


def to_rgb(img: ImageBuffer) -> ImageBuffer:
    if img.channels == 3:
        return img
    return ImageBuffer(np.repeat(img.pixels, 3, axis=2))


def crop(img: ImageBuffer, box: LabeledBox) -> ImageBuffer:
    x0 = max(0, int(math.floor(box.x_min)))
    y0 = max(0, int(math.floor(box.y_min)))
    x1 = min(img.width, int(math.ceil(box.x_max)))
    y1 = min(img.height, int(math.ceil(box.y_max)))
    if x1 <= x0 or y1 <= y0:
        raise BoxOutOfBoundsError(f"box {box.coords()} does not intersect {img.width}x{img.height} image")
    return ImageBuffer(img.pixels[y0:y1, x0:x1])


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return ImageBuffer(img.pixels.copy())
    src = img.pixels.astype(np.float64)

    def coords(n_out, n_in):
        # pixel-centre alignment, clamped to the valid sample range
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(out_h, img.height)
    x0, x1, fx = coords(out_w, img.width)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bot * fy
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def hflip_boxes(boxes: list[LabeledBox], image_width: float) -> list[LabeledBox]:
    out = []
    for b in boxes:
        if b.x_max > image_width:
            raise BoxOutOfBoundsError(f"box {b.coords()} exceeds image width {image_width}")
        out.append(LabeledBox(b.label, image_width - b.x_max, b.y_min, image_width - b.x_min, b.y_max))
    return out


@dataclass(frozen=True)
class AugmentationPlan:
    seed: int = 0
    contrast_low_percentile: float = 0.02
    contrast_high_percentile: float = 0.98
    gaussian_sigma: float = 1.0
    median_window: int = 3

    def __post_init__(self):
        if not 0 <= self.contrast_low_percentile < 0.5:
            raise ValueError("contrast_low_percentile must lie in [0, 0.5)")
        if not 0.5 < self.contrast_high_percentile <= 1:
            raise ValueError("contrast_high_percentile must lie in (0.5, 1]")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        _check_window(self.median_window)

    def use_gaussian(self, index: int) -> bool:
        """Filter pick for the ``index``-th image: Gaussian if True, median otherwise."""
        return bool(np.random.default_rng([self.seed, index]).random() < 0.5)


def enhance_contrast(img: ImageBuffer, plan: AugmentationPlan) -> ImageBuffer:
    src = img.pixels.astype(np.float64)
    out = np.empty_like(src)
    for c in range(img.channels):
        chan = src[:, :, c]
        lo, hi = np.percentile(chan, [100 * plan.contrast_low_percentile, 100 * plan.contrast_high_percentile])
        if hi <= lo:
            out[:, :, c] = chan
        else:
            out[:, :, c] = (chan - lo) * (255.0 / (hi - lo))
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_filter(img: ImageBuffer, sigma: float) -> ImageBuffer:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    out = _convolve_axis(img.pixels.astype(np.float64), k, axis=0)
    out = _convolve_axis(out, k, axis=1)
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def _check_window(window: int) -> None:
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ValueError(f"median window must be an odd integer >= 3, got {window}")


def median_filter(img: ImageBuffer, window: int) -> ImageBuffer:
    _check_window(window)
    r = window // 2
    padded = np.pad(img.pixels, ((r, r), (r, r), (0, 0)), mode="edge")
    views = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    flat = views.reshape(*views.shape[:3], window * window)
    # odd window count: the middle order statistic is an exact input value
    med = np.partition(flat, window * window // 2, axis=-1)[..., window * window // 2]
    return ImageBuffer(med.astype(np.uint8))


def random_filter(img: ImageBuffer, plan: AugmentationPlan, index: int) -> ImageBuffer:
    if plan.use_gaussian(index):
        return gaussian_filter(img, plan.gaussian_sigma)
    return median_filter(img, plan.median_window)


def augment_recognition_set(images: list[ImageBuffer], plan: AugmentationPlan) -> list[ImageBuffer]:
    """Triple a training set: ``[orig, contrast, filtered]`` per input, in input order."""
    if not images:
        raise ValueError("cannot augment an empty image set")
    out = []
    for i, img in enumerate(images):
        out.extend([img, enhance_contrast(img, plan), random_filter(img, plan, i)])
    return out


def augment_detection_set(images: list[ImageBuffer], boxes: list[list[LabeledBox]]
                          ) -> tuple[list[ImageBuffer], list[list[LabeledBox]]]:
    """Double a detection set with mirrored copies (originals first)."""
    if len(images) != len(boxes):
        raise ValueError("images and box lists differ in length")
    flipped = [hflip(im) for im in images]
    flipped_boxes = [hflip_boxes(bx, im.width) for im, bx in zip(images, boxes)]
    return list(images) + flipped, list(boxes) + flipped_boxes
