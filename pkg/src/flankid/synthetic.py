"""Procedural striped-animal datasets for offline end-to-end checks.

Every individual owns a random warped-stripe texture. A view places the
animal in a noisy scene and renders its flank under seeded pose and
photometric jitter. Each view is written as an image with a labelImg-style
annotation holding a ``tiger`` body box and a ``flank`` box.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import ImageRecord, LabeledBox, write_voc_xml
from .cnn import CONV, LRN, MAXPOOL, RELU, ConvNetSpec, LayerSpec
from .detection import Detection, DetectorOutput
from .imaging import ImageBuffer, gaussian_filter, save_image

BODY_COLOR = np.array([214.0, 128.0, 44.0])
STRIPE_COLOR = np.array([24.0, 18.0, 14.0])


@dataclass(frozen=True)
class StripeTexture:
    frequency: float
    tilt: float
    warp_amp: np.ndarray
    warp_freq: np.ndarray
    warp_phase: np.ndarray
    sharpness: float
    spot_centres: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator) -> "StripeTexture":
        n = 4
        return cls(
            frequency=rng.uniform(4.0, 9.0),
            tilt=rng.uniform(-0.6, 0.6),
            warp_amp=rng.uniform(0.05, 0.35, n),
            warp_freq=rng.uniform(0.5, 3.0, (n, 2)),
            warp_phase=rng.uniform(0, 2 * np.pi, n),
            sharpness=rng.uniform(2.0, 5.0),
            spot_centres=rng.uniform(0.05, 0.95, (3, 2)),
        )

    def darkness(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Stripe coverage in [0, 1] at flank coordinates ``(u, v)``."""
        phase = self.frequency * (u + self.tilt * v)
        for a, (fu, fv), ph in zip(self.warp_amp, self.warp_freq, self.warp_phase):
            phase = phase + a * np.sin(2 * np.pi * (fu * u + fv * v) + ph)
        stripes = 0.5 + 0.5 * np.tanh(self.sharpness * np.sin(2 * np.pi * phase))
        spots = np.zeros_like(u)
        for cu, cv in self.spot_centres:
            spots = np.maximum(spots, np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / 0.004))
        return np.clip(np.maximum(stripes, spots), 0.0, 1.0)


def _background(rng, h, w):
    coarse = rng.uniform(40, 140, (h // 16 + 2, w // 16 + 2, 3)) * np.array([0.6, 1.0, 0.5])
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c = coarse
    bg = (c[y0][:, x0] * (1 - fy) * (1 - fx) + c[y0 + 1][:, x0] * fy * (1 - fx)
          + c[y0][:, x0 + 1] * (1 - fy) * fx + c[y0 + 1][:, x0 + 1] * fy * fx)
    return bg + rng.normal(0, 8, (h, w, 3))


def render_view(texture: StripeTexture, rng: np.random.Generator, size=(320, 240), with_flank=True,
                pose_jitter: float = 0.04, blur_max: float = 1.0) -> tuple[ImageBuffer, list[LabeledBox]]:
    w, h = size
    img = _background(rng, h, w)
    fw = int(rng.uniform(0.50, 0.60) * w)
    fh = int(fw * rng.uniform(0.68, 0.78))
    fx0 = int(rng.uniform(0.15 * w, w - fw - 0.12 * w))
    fy0 = int(rng.uniform(0.12 * h, h - fh - 0.08 * h))
    bx0, by0 = max(0, fx0 - int(0.12 * w)), max(0, fy0 - int(0.10 * h))
    bx1, by1 = min(w, fx0 + fw + int(0.10 * w)), min(h, fy0 + fh + int(0.06 * h))

    # plain coat on the body; only the flank region carries the identity
    img[by0:by1, bx0:bx1] = BODY_COLOR * 0.85 + rng.normal(0, 6, (by1 - by0, bx1 - bx0, 3))

    angle = rng.normal(0, pose_jitter)
    scale = 1.0 + rng.normal(0, pose_jitter)
    shift = rng.normal(0, pose_jitter, 2)
    yy, xx = np.mgrid[fy0:fy0 + fh, fx0:fx0 + fw].astype(np.float64)
    u0, v0 = (xx - fx0) / fw - 0.5, (yy - fy0) / fh - 0.5
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * u0 - sa * v0) * scale + 0.5 + shift[0]
    v = (sa * u0 + ca * v0) * scale + 0.5 + shift[1]
    dark = texture.darkness(u, v)[:, :, None]
    patch = BODY_COLOR * (1 - dark) + STRIPE_COLOR * dark
    gain, offset = rng.uniform(0.75, 1.15), rng.uniform(-20, 20)
    img[fy0:fy0 + fh, fx0:fx0 + fw] = patch * gain + offset + rng.normal(0, 5, patch.shape)

    out = ImageBuffer(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    sigma = rng.uniform(0.0, blur_max)
    if sigma > 0.2:
        out = gaussian_filter(out, sigma)
    boxes = [LabeledBox("tiger", bx0, by0, bx1, by1)]
    if with_flank:
        boxes.append(LabeledBox("flank", fx0, fy0, fx0 + fw, fy0 + fh))
    return out, boxes


def generate_dataset(out_dir: str | Path, n_individuals: int = 20, n_views: int = 10, seed: int = 0,
                     size=(320, 240), n_flankless: int = 0, species: str = "tiger") -> dict[str, Path]:
    """Write ``images/``, ``annotations/`` and ``identities.tsv`` under ``out_dir``.

    ``n_flankless`` extra tiger-only views (no flank box) are appended for
    routing checks; they carry an identity but no usable flank.
    """
    out_dir = Path(out_dir)
    img_dir, ann_dir = out_dir / "images", out_dir / "annotations"
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    textures = [StripeTexture.random(rng) for _ in range(n_individuals)]
    rows = ["# image_id\tindividual_id"]
    jobs = [(i, v, True) for i in range(n_individuals) for v in range(n_views)]
    jobs += [(int(rng.integers(n_individuals)), n_views + j, False) for j in range(n_flankless)]
    for ind, view, with_flank in jobs:
        image_id = f"ind{ind:03d}_v{view:02d}"
        img, boxes = render_view(textures[ind], np.random.default_rng([seed, ind, view]), size, with_flank)
        path = img_dir / f"{image_id}.png"
        save_image(img, path)
        rec = ImageRecord(image_id, str(Path("..") / "images" / path.name), species, None, boxes,
                          width=img.width, height=img.height, depth=3)
        write_voc_xml(rec, ann_dir / f"{image_id}.xml", filename=path.name)
        rows.append(f"{image_id}\tind{ind:03d}")
    ident = out_dir / "identities.tsv"
    ident.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return {"root": out_dir, "images": img_dir, "annotations": ann_dir, "identities": ident}


def synthesize_detections(records: list[ImageRecord], seed: int = 0, n_duplicates: int = 2,
                          n_clutter: int = 2) -> list[DetectorOutput]:
    """Detector-like proposals around ground truth: a jittered main hit,
    lower-scored overlapping duplicates and low-score clutter boxes."""
    rng = np.random.default_rng(seed)
    outputs = []
    for rec in records:
        dets = []
        W = rec.width or max(b.x_max for b in rec.boxes)
        H = rec.height or max(b.y_max for b in rec.boxes)
        for g in rec.boxes:
            gw, gh = g.x_max - g.x_min, g.y_max - g.y_min
            for j in range(1 + n_duplicates):
                jitter = 0.03 if j == 0 else 0.15
                dx = rng.normal(0, jitter, 4) * np.array([gw, gh, gw, gh])
                x0 = float(np.clip(g.x_min + dx[0], 0, W - 2))
                y0 = float(np.clip(g.y_min + dx[1], 0, H - 2))
                x1 = float(np.clip(g.x_max + dx[2], x0 + 1, W))
                y1 = float(np.clip(g.y_max + dx[3], y0 + 1, H))
                score = rng.uniform(0.88, 0.999) if j == 0 else rng.uniform(0.81, 0.94)
                dets.append(Detection(LabeledBox(g.label, x0, y0, x1, y1), float(score)))
        for _ in range(n_clutter):
            x0, y0 = rng.uniform(0, W * 0.8), rng.uniform(0, H * 0.8)
            box = LabeledBox(str(rng.choice(["tiger", "flank"])), x0, y0,
                             min(W, x0 + rng.uniform(10, W * 0.2)), min(H, y0 + rng.uniform(10, H * 0.2)))
            dets.append(Detection(box, float(rng.uniform(0.05, 0.6))))
        outputs.append(DetectorOutput(rec.image_id, dets))
    return outputs


def small_conv_spec(height: int = 192, width: int = 256) -> ConvNetSpec:
    """A narrow three-conv stack with AlexNet's layer pattern, for fast runs."""
    layers = (
        LayerSpec(CONV, "conv1", out_channels=16, kernel=7, stride=4),
        LayerSpec(RELU, "relu1"),
        LayerSpec(LRN, "norm1"),
        LayerSpec(MAXPOOL, "pool1", kernel=3, stride=2),
        LayerSpec(CONV, "conv2", out_channels=32, kernel=5, padding=2, groups=2),
        LayerSpec(RELU, "relu2"),
        LayerSpec(MAXPOOL, "pool2", kernel=3, stride=2),
        LayerSpec(CONV, "conv3", out_channels=32, kernel=3, padding=1),
        LayerSpec(RELU, "relu3"),
    )
    return ConvNetSpec("small_conv3", (height, width, 3), (128.0, 128.0, 128.0), layers, len(layers) - 1)
