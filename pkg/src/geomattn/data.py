"""Synthetic vehicle sprites, manifest ingestion, rotation pretext samples,
P x K batch sampling, and training augmentation.

The synthetic generator draws one deterministic "vehicle" per identity —
body rectangle, two wheel discs, roof trapezoid, and a logo mark, all with
identity-specific colors and proportions — then renders each image through a
random nuisance transform (translation, scale, rotation, brightness, noise).
Rendering inverse-maps every output pixel center through the affine into the
canonical sprite frame and evaluates the shape functions there, so no
rasterization artifacts depend on the transform. Cameras are nuisance
clusters: each camera id carries its own systematic rotation/brightness/tint
bias on top of the per-image jitter. Consecutive images of one identity
under one camera share a track id.

Geometric landmarks (wheel centers, body corners, logo) are carried through
the affine and stored as metadata for diagnostics; training never sees them.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from geomattn.autodiff import Tensor
from geomattn.imageio import bilinear_resize, read_image, write_ppm

__all__ = [
    "ReidSample",
    "RotationSample",
    "SyntheticSpec",
    "AugmentConfig",
    "ReidDataset",
    "generate_synthetic_dataset",
    "render_canonical_sprite",
    "save_dataset",
    "load_manifest",
    "rotate_image",
    "make_rotation_sample",
    "all_rotation_samples",
    "pk_sample_batch",
    "augment",
]

_GOLDEN = 0.6180339887498949
_N_CAMERAS = 4


@dataclass
class ReidSample:
    image: Tensor  # [3, h, w] in [0, 1]
    identity: int
    camera: int
    track: int | None = None

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ValueError("identity and camera must be nonnegative")


@dataclass
class RotationSample:
    image_rot: Tensor
    pseudo_label: int  # k <=> rotated by k * 90 degrees counter-clockwise


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 20  # training identities
    images_per_identity: int = 20
    image_size: int = 64
    rng_seed: int = 0
    held_out_identities: int = 8  # extra identities for the query/gallery split
    max_translation: float = 0.10  # fraction of image size, per axis
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotation_deg: float = 10.0
    max_brightness: float = 0.1
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least 2 training identities")
        if self.images_per_identity < 4:
            raise ValueError("need at least 4 images per identity")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.held_out_identities < 2:
            raise ValueError("need at least 2 held-out identities for retrieval")


@dataclass
class AugmentConfig:
    pad: int = 8  # reflect padding before the random crop
    p_crop: float = 1.0
    p_flip: float = 0.5
    p_erase: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 1.0 / 0.3)
    fill: tuple[float, float, float] = (0.5, 0.5, 0.5)  # per-channel dataset mean


@dataclass
class ReidDataset:
    samples: list[ReidSample] = field(default_factory=list)
    landmarks: list[dict[str, tuple[float, float]]] | None = None  # aligned with samples

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ReidSample:
        return self.samples[i]

    def identities(self) -> list[int]:
        return sorted({s.identity for s in self.samples})

    def by_identity(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.identity, []).append(i)
        return out

    def pixel_mean(self) -> np.ndarray:
        """Per-channel mean over every pixel of every image."""
        acc = np.zeros(3)
        count = 0
        for s in self.samples:
            acc += s.image.data.sum(axis=(1, 2))
            count += s.image.data.shape[1] * s.image.data.shape[2]
        return acc / count


# -- sprite geometry -------------------------------------------------------


def _identity_style(spec: SyntheticSpec, identity: int) -> dict:
    """Deterministic colors and proportions for one identity."""
    rng = np.random.default_rng([spec.rng_seed, 7919, identity])
    hue = (identity * _GOLDEN) % 1.0
    body = colorsys.hsv_to_rgb(hue, 0.62 + 0.3 * rng.uniform(), 0.55 + 0.35 * rng.uniform())
    roof = colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.45 + 0.2 * rng.uniform(), 0.35 + 0.25 * rng.uniform())
    logo = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.9, 0.9)
    return {
        "body_color": np.array(body),
        "roof_color": np.array(roof),
        "logo_color": np.array(logo),
        "wheel_color": np.array([0.12, 0.12, 0.14]),
        "rim_color": np.array([0.75, 0.75, 0.78]),
        "body_w": 0.62 + 0.16 * rng.uniform(),
        "body_h": 0.24 + 0.10 * rng.uniform(),
        "body_bottom": 0.70 + 0.04 * rng.uniform(),
        "roof_h": 0.12 + 0.08 * rng.uniform(),
        "roof_top_frac": 0.35 + 0.25 * rng.uniform(),
        "wheel_dx": 0.20 + 0.08 * rng.uniform(),
        "wheel_r": 0.070 + 0.025 * rng.uniform(),
        "logo_dx": -0.14 + 0.28 * rng.uniform(),
        "logo_r": 0.040 + 0.012 * rng.uniform(),
    }


def _sprite_landmarks(style: dict) -> dict[str, tuple[float, float]]:
    """Canonical-frame (u, v) positions of the geometric parts."""
    bb, bh, bw = style["body_bottom"], style["body_h"], style["body_w"]
    wy = bb
    return {
        "wheel_left": (0.5 - style["wheel_dx"], wy),
        "wheel_right": (0.5 + style["wheel_dx"], wy),
        "body_tl": (0.5 - bw / 2, bb - bh),
        "body_tr": (0.5 + bw / 2, bb - bh),
        "body_bl": (0.5 - bw / 2, bb),
        "body_br": (0.5 + bw / 2, bb),
        "logo": (0.5 + style["logo_dx"], bb - 0.35 * bh),
    }


def _paint_sprite(u: np.ndarray, v: np.ndarray, style: dict, background: np.ndarray) -> np.ndarray:
    """Evaluate the sprite at canonical coordinates (u, v); returns [3, ...]."""
    img = np.broadcast_to(background.reshape(3, 1, 1), (3,) + u.shape).copy()
    bb, bh, bw = style["body_bottom"], style["body_h"], style["body_w"]

    def fill(mask, color):
        img[:, mask] = color[:, None]

    # roof trapezoid sits on top of the body
    roof_top = bb - bh - style["roof_h"]
    in_band = (v >= roof_top) & (v < bb - bh)
    t = np.where(in_band, (v - roof_top) / style["roof_h"], 0.0)  # 0 at top, 1 at body
    half_w = (style["roof_top_frac"] + (0.9 - style["roof_top_frac"]) * t) * bw / 2
    fill(in_band & (np.abs(u - 0.5) <= half_w), style["roof_color"])

    # body rectangle
    fill((np.abs(u - 0.5) <= bw / 2) & (v >= bb - bh) & (v <= bb), style["body_color"])

    # wheels: dark disc with a lighter rim hub
    for sx in (-1.0, 1.0):
        cx = 0.5 + sx * style["wheel_dx"]
        d2 = (u - cx) ** 2 + (v - bb) ** 2
        fill(d2 <= style["wheel_r"] ** 2, style["wheel_color"])
        fill(d2 <= (0.45 * style["wheel_r"]) ** 2, style["rim_color"])

    # logo disc on the body
    lx, ly = 0.5 + style["logo_dx"], bb - 0.35 * bh
    fill((u - lx) ** 2 + (v - ly) ** 2 <= style["logo_r"] ** 2, style["logo_color"])
    return img


_CAMERA_ROT_BIAS = (-0.5, -1.0 / 6.0, 1.0 / 6.0, 0.5)  # x max_rotation_deg
_CAMERA_BRIGHT_BIAS = (-0.5, 1.0 / 6.0, -1.0 / 6.0, 0.5)  # x max_brightness
_CAMERA_TINT = (
    np.array([0.02, 0.0, -0.02]),
    np.array([-0.02, 0.01, 0.01]),
    np.array([0.0, -0.02, 0.02]),
    np.array([0.01, 0.02, -0.01]),
)


def _render_image(
    spec: SyntheticSpec, style: dict, camera: int, rng: np.random.Generator
) -> tuple[np.ndarray, dict[str, tuple[float, float]]]:
    """One nuisance draw + inverse-mapped render; returns image and pixel landmarks."""
    s = rng.uniform(*spec.scale_range)
    theta = np.deg2rad(
        _CAMERA_ROT_BIAS[camera] * spec.max_rotation_deg
        + rng.uniform(-0.5, 0.5) * spec.max_rotation_deg
    )
    tx = rng.uniform(-spec.max_translation, spec.max_translation)
    ty = rng.uniform(-spec.max_translation, spec.max_translation)
    brightness = (
        _CAMERA_BRIGHT_BIAS[camera] * spec.max_brightness
        + rng.uniform(-0.5, 0.5) * spec.max_brightness
    )

    size = spec.image_size
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # pixel centers in the centered frame
    coords = (np.arange(size) + 0.5) / size - 0.5
    px, py = np.meshgrid(coords, coords)  # px: x (u axis), py: y (v axis)
    # forward map: p = R(theta) @ (s * c) + t; invert for sampling
    qx, qy = px - tx, py - ty
    cu = (cos_t * qx + sin_t * qy) / s + 0.5
    cv = (-sin_t * qx + cos_t * qy) / s + 0.5

    img = _paint_sprite(cu, cv, style, np.array([0.82, 0.84, 0.86]))
    img = img + _CAMERA_TINT[camera].reshape(3, 1, 1) + brightness  # camera cast on everything
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)

    landmarks = {}
    for name, (lu, lv) in _sprite_landmarks(style).items():
        cx, cy = lu - 0.5, lv - 0.5
        x = cos_t * s * cx - sin_t * s * cy + tx
        y = sin_t * s * cx + cos_t * s * cy + ty
        landmarks[name] = ((x + 0.5) * size - 0.5, (y + 0.5) * size - 0.5)
    return img, landmarks


def render_canonical_sprite(spec: SyntheticSpec, identity: int) -> np.ndarray:
    """The identity's sprite with no nuisance transform and no noise."""
    style = _identity_style(spec, identity)
    size = spec.image_size
    coords = (np.arange(size) + 0.5) / size - 0.5
    px, py = np.meshgrid(coords, coords)
    background = np.array([0.82, 0.84, 0.86])
    return np.clip(_paint_sprite(px + 0.5, py + 0.5, style, background), 0.0, 1.0)


def _generate_identity_images(
    spec: SyntheticSpec, identity: int, track_start: int
) -> tuple[list[ReidSample], list[dict], int]:
    """All images of one identity, in camera blocks that define tracks."""
    rng = np.random.default_rng([spec.rng_seed, 104729, identity])
    style = _identity_style(spec, identity)
    samples: list[ReidSample] = []
    marks: list[dict] = []
    next_track = track_start
    remaining = spec.images_per_identity
    prev_cam = -1
    while remaining > 0:
        block = int(min(rng.integers(1, 5), remaining))
        cam = int(rng.integers(0, _N_CAMERAS))
        if cam == prev_cam:  # force a camera change so tracks are maximal runs
            cam = (cam + 1) % _N_CAMERAS
        for _ in range(block):
            img, lm = _render_image(spec, style, cam, rng)
            samples.append(ReidSample(Tensor(img), identity, cam, track=next_track))
            marks.append(lm)
        prev_cam = cam
        next_track += 1
        remaining -= block
    return samples, marks, next_track


def generate_synthetic_dataset(
    spec: SyntheticSpec,
) -> tuple[ReidDataset, ReidDataset, ReidDataset]:
    """Deterministic train / query / gallery split.

    Training identities are 0 .. num_identities-1; the query and gallery
    sets come from `held_out_identities` extra identities never seen in
    training. Per held-out identity, roughly a quarter of the images
    (at least one) become queries and the rest go to the gallery.
    """
    train = ReidDataset(landmarks=[])
    query = ReidDataset(landmarks=[])
    gallery = ReidDataset(landmarks=[])
    next_track = 0
    for identity in range(spec.num_identities):
        samples, marks, next_track = _generate_identity_images(spec, identity, next_track)
        train.samples.extend(samples)
        train.landmarks.extend(marks)
    for identity in range(spec.num_identities, spec.num_identities + spec.held_out_identities):
        samples, marks, next_track = _generate_identity_images(spec, identity, next_track)
        n_query = max(1, len(samples) // 4)
        split_rng = np.random.default_rng([spec.rng_seed, 15485863, identity])
        order = split_rng.permutation(len(samples))
        q_idx = set(order[:n_query].tolist())
        for i, (s, m) in enumerate(zip(samples, marks)):
            if i in q_idx:
                query.samples.append(s)
                query.landmarks.append(m)
            else:
                gallery.samples.append(s)
                gallery.landmarks.append(m)
    return train, query, gallery


# -- directory layout ------------------------------------------------------


def save_dataset(root, train: ReidDataset, query: ReidDataset, gallery: ReidDataset) -> None:
    """Write `images/*.ppm`, one manifest CSV per split, and landmarks.csv."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    landmark_rows = []
    for split_name, dataset in (("train", train), ("query", query), ("gallery", gallery)):
        rows = []
        counters: dict[int, int] = {}
        for i, s in enumerate(dataset.samples):
            idx = counters.get(s.identity, 0)
            counters[s.identity] = idx + 1
            rel = f"images/{split_name}_{s.identity:04d}_{idx:03d}.ppm"
            write_ppm(os.path.join(root, rel), s.image.data)
            rows.append([rel, s.identity, s.camera, "" if s.track is None else s.track])
            if dataset.landmarks is not None:
                for name, (x, y) in dataset.landmarks[i].items():
                    landmark_rows.append([rel, name, f"{x:.4f}", f"{y:.4f}"])
        with open(os.path.join(root, f"{split_name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "identity", "camera", "track"])
            writer.writerows(rows)
    with open(os.path.join(root, "landmarks.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "landmark", "x", "y"])
        writer.writerows(landmark_rows)


def load_manifest(path, image_size: int | None = None) -> ReidDataset:
    """Read a manifest CSV; image paths are relative to the manifest's folder."""
    root = os.path.dirname(os.path.abspath(path))
    dataset = ReidDataset()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        required = ["path", "identity", "camera"]
        for col in required:
            if col not in header:
                raise ValueError(f"{path}: manifest header is missing required column {col!r}")
        col = {name: header.index(name) for name in header}
        has_track = "track" in col
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            img_path = os.path.join(root, row[col["path"]])
            if not os.path.exists(img_path):
                raise FileNotFoundError(f"{path} line {line}: image {img_path} does not exist")
            img = read_image(img_path)
            if img.ndim == 2:  # grayscale -> replicate to three channels
                img = np.repeat(img[None], 3, axis=0)
            if image_size is not None and img.shape[-2:] != (image_size, image_size):
                img = bilinear_resize(img, image_size, image_size)
            track_raw = row[col["track"]].strip() if has_track and len(row) > col["track"] else ""
            dataset.samples.append(
                ReidSample(
                    Tensor(img),
                    identity=int(row[col["identity"]]),
                    camera=int(row[col["camera"]]),
                    track=int(track_raw) if track_raw else None,
                )
            )
    return dataset


# -- rotation pretext ------------------------------------------------------


def rotate_image(img, k: int):
    """Rotate by k * 90 degrees counter-clockwise as an exact permutation."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotation class must be one of 0..3, got {k}")
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.shape[-2] != data.shape[-1]:
        raise ValueError(f"rotation needs a square image, got {data.shape}")
    out = np.rot90(data, k, axes=(-2, -1)).copy()
    return Tensor(out) if isinstance(img, Tensor) else out


def make_rotation_sample(sample: ReidSample, rng: np.random.Generator) -> RotationSample:
    k = int(rng.integers(0, 4))
    return RotationSample(rotate_image(sample.image, k), k)


def all_rotation_samples(sample: ReidSample) -> list[RotationSample]:
    return [RotationSample(rotate_image(sample.image, k), k) for k in range(4)]


# -- batch sampling and augmentation ---------------------------------------


def pk_sample_batch(dataset: ReidDataset, P: int, K: int, rng: np.random.Generator) -> list[ReidSample]:
    """P distinct identities, K images each (with replacement when an
    identity has fewer than K images)."""
    groups = dataset.by_identity()
    if len(groups) < P:
        raise ValueError(f"need at least P={P} identities, dataset has {len(groups)}")
    ids = sorted(groups)
    chosen = rng.choice(len(ids), size=P, replace=False)
    batch: list[ReidSample] = []
    for c in chosen:
        members = groups[ids[c]]
        if len(members) >= K:
            picks = rng.choice(len(members), size=K, replace=False)
        else:
            picks = rng.integers(0, len(members), size=K)
        batch.extend(dataset.samples[members[p]] for p in picks)
    return batch


def augment(img: Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> Tensor:
    """Reflect-pad random crop, horizontal flip, random erasing. Training
    only; evaluation images pass through untouched by never calling this."""
    data = img.data
    _, h, w = data.shape
    if cfg.p_crop > 0 and rng.uniform() < cfg.p_crop:
        padded = np.pad(data, ((0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)), mode="reflect")
        top = int(rng.integers(0, 2 * cfg.pad + 1))
        left = int(rng.integers(0, 2 * cfg.pad + 1))
        data = padded[:, top : top + h, left : left + w]
    if cfg.p_flip > 0 and rng.uniform() < cfg.p_flip:
        data = data[:, :, ::-1]
    if cfg.p_erase > 0 and rng.uniform() < cfg.p_erase:
        area = h * w * rng.uniform(*cfg.erase_area)
        log_lo, log_hi = np.log(cfg.erase_aspect[0]), np.log(cfg.erase_aspect[1])
        aspect = np.exp(rng.uniform(log_lo, log_hi))
        eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        data = data.copy()
        data[:, top : top + eh, left : left + ew] = np.asarray(cfg.fill)[:, None, None]
    return Tensor(np.ascontiguousarray(data))
