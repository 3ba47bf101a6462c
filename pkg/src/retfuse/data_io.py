"""Registered image pairs: loading, augmentation, resizing and synthetic scenes.

All intensities are float64 in [0, 1]. Colour inputs are split into a
luminance plane (what the network fuses) and two chroma planes that are kept
around so a colour image can be recomposed after fusion.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.morphology import disk, dilation
from skimage.transform import resize


class RegistrationError(ValueError):
    """The two modalities of a pair do not share a pixel grid."""


class ImageFormatError(ValueError):
    """An input file could not be decoded as a supported image."""


@dataclass
class RegisteredPair:
    id: str
    image1: np.ndarray
    image2: np.ndarray
    chroma1: Optional[np.ndarray] = None
    chroma2: Optional[np.ndarray] = None
    mask1: Optional[np.ndarray] = None
    mask2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image1 = np.asarray(self.image1, dtype=np.float64)
        self.image2 = np.asarray(self.image2, dtype=np.float64)
        if self.image1.ndim != 2 or self.image2.ndim != 2:
            raise ValueError("images must be 2-D luminance planes")
        if self.image1.shape != self.image2.shape:
            raise RegistrationError(
                f"pair {self.id!r}: {self.image1.shape} vs {self.image2.shape}")
        for im in (self.image1, self.image2):
            if im.size and (im.min() < 0.0 or im.max() > 1.0):
                raise ValueError("intensities must lie in [0, 1]")
        for name in ("mask1", "mask2"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m)
            if m.shape != self.shape:
                raise RegistrationError(f"{name} shape {m.shape} != {self.shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
            setattr(self, name, m.astype(bool))
        for name in ("chroma1", "chroma2"):
            c = getattr(self, name)
            if c is not None and np.asarray(c).shape != (2,) + self.shape:
                raise RegistrationError(f"{name} must have shape (2, H, W)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image1.shape


@dataclass(frozen=True)
class AugmentationSpec:
    horizontal_flip: bool = False
    rotation_degrees: float = 0.0
    translation_px: tuple[int, int] = (0, 0)

    MAX_ROTATION = 8.0
    MAX_TRANSLATION = 20

    def __post_init__(self):
        if abs(self.rotation_degrees) > self.MAX_ROTATION:
            raise ValueError(f"rotation must be within ±{self.MAX_ROTATION} degrees")
        ty, tx = self.translation_px
        if max(abs(ty), abs(tx)) > self.MAX_TRANSLATION:
            raise ValueError(f"translation must be within ±{self.MAX_TRANSLATION} px")
        object.__setattr__(self, "translation_px", (int(ty), int(tx)))

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentationSpec":
        return cls(
            horizontal_flip=bool(rng.integers(2)),
            rotation_degrees=float(rng.uniform(-cls.MAX_ROTATION, cls.MAX_ROTATION)),
            translation_px=tuple(int(t) for t in rng.integers(
                -cls.MAX_TRANSLATION, cls.MAX_TRANSLATION + 1, size=2)),
        )

    @property
    def is_identity(self) -> bool:
        return (not self.horizontal_flip and self.rotation_degrees == 0.0
                and self.translation_px == (0, 0))


# ---------------------------------------------------------------- colour

def rgb_to_luma_chroma(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """BT.601 YCbCr split; chroma planes are offset to live in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = (b - y) * 0.564 + 0.5
    cr = (r - y) * 0.713 + 0.5
    return np.clip(y, 0, 1), np.clip(np.stack([cb, cr]), 0, 1)


def recompose_color(luma: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_luma_chroma`, returning an H×W×3 array."""
    cb, cr = chroma[0] - 0.5, chroma[1] - 0.5
    r = luma + 1.403 * cr
    g = luma - 0.714 * cr - 0.344 * cb
    b = luma + 1.773 * cb
    return np.clip(np.stack([r, g, b], axis=-1), 0, 1)


# ---------------------------------------------------------------- file IO

def read_image(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a gray or RGB image as (luminance, chroma-or-None) in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc

    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32) or mode.startswith("I;16"):
        # 16-bit PNG/TIFF; normalise by the representable max, not the image max
        scale = 65535.0
    elif arr.dtype == bool:
        scale = 1.0
    else:
        raise ImageFormatError(f"unsupported pixel type {arr.dtype} in {path}")
    arr = arr.astype(np.float64) / scale

    if arr.ndim == 2:
        return np.clip(arr, 0, 1), None
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return rgb_to_luma_chroma(arr[..., :3])
    raise ImageFormatError(f"unsupported channel layout {arr.shape} in {path}")


def read_mask(path) -> np.ndarray:
    luma, _ = read_image(path)
    return luma > 0.5


def write_image(path, image: np.ndarray, chroma: Optional[np.ndarray] = None) -> None:
    """Write a [0, 1] luminance image (optionally recoloured) as 8-bit PNG."""
    data = image if chroma is None else recompose_color(image, chroma)
    Image.fromarray(to_uint8(data)).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def load_pair(path_pair: Sequence, mask_paths: Optional[Sequence] = None,
              pair_id: Optional[str] = None) -> RegisteredPair:
    p1, p2 = path_pair
    im1, c1 = read_image(p1)
    im2, c2 = read_image(p2)
    if im1.shape != im2.shape:
        raise RegistrationError(f"{p1} is {im1.shape}, {p2} is {im2.shape}")
    m1 = m2 = None
    if mask_paths is not None:
        mp1, mp2 = mask_paths
        m1 = read_mask(mp1) if mp1 else None
        m2 = read_mask(mp2) if mp2 else None
    return RegisteredPair(pair_id or Path(p1).stem, im1, im2, c1, c2, m1, m2)


def read_manifest(path) -> Iterator[RegisteredPair]:
    """Yield pairs from a JSON-lines manifest.

    Each record holds ``image1``, ``image2`` and optionally ``id``, ``mask1``,
    ``mask2``. Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            resolve = lambda key: (root / rec[key]) if rec.get(key) else None  # noqa: E731
            masks = None
            if rec.get("mask1") or rec.get("mask2"):
                masks = (resolve("mask1"), resolve("mask2"))
            yield load_pair((resolve("image1"), resolve("image2")), masks,
                            pair_id=rec.get("id", f"pair{lineno:04d}"))


def write_manifest(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_pair(pair: RegisteredPair, directory) -> dict:
    """Write a pair's planes as PNGs under ``directory``; return its manifest record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rec = {"id": pair.id}
    for k in (1, 2):
        name = f"{pair.id}_m{k}.png"
        write_image(directory / name, getattr(pair, f"image{k}"), getattr(pair, f"chroma{k}"))
        rec[f"image{k}"] = name
        mask = getattr(pair, f"mask{k}")
        if mask is not None:
            mname = f"{pair.id}_mask{k}.png"
            write_mask(directory / mname, mask)
            rec[f"mask{k}"] = mname
    return rec


# ---------------------------------------------------------------- geometry

def _affine(spec: AugmentationSpec, shape: tuple[int, int]):
    """Matrix/offset mapping output (row, col) to input (row, col)."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(spec.rotation_degrees)
    c, s = math.cos(theta), math.sin(theta)
    # forward: flip, rotate about centre, translate. Invert for pull-back sampling.
    rot_inv = np.array([[c, -s], [s, c]])
    flip = np.diag([1.0, -1.0 if spec.horizontal_flip else 1.0])
    mat = flip @ rot_inv
    ty, tx = spec.translation_px
    centre = np.array([cy, cx])
    out_centre = centre + np.array([ty, tx])
    offset = centre - mat @ out_centre
    return mat, offset


def _warp(arr: np.ndarray, mat, offset, order: int, cval: float) -> np.ndarray:
    return ndimage.affine_transform(arr, mat, offset=offset, order=order,
                                    mode="constant", cval=cval)


def augment(pair: RegisteredPair, spec: AugmentationSpec, rng_seed: int = 0) -> RegisteredPair:
    """Apply one geometric transform to every plane of ``pair``.

    ``rng_seed`` is accepted so callers can thread a seed through; the
    transform itself is fully determined by ``spec``.
    """
    if spec.is_identity:
        return replace(pair)
    mat, offset = _affine(spec, pair.shape)

    def img(a):
        return np.clip(_warp(a, mat, offset, 1, 0.0), 0.0, 1.0)

    def msk(m):
        return None if m is None else _warp(m.astype(np.float64), mat, offset, 0, 0.0) > 0.5

    def chroma(c):
        if c is None:
            return None
        return np.stack([np.clip(_warp(p, mat, offset, 1, 0.5), 0, 1) for p in c])

    return RegisteredPair(pair.id, img(pair.image1), img(pair.image2),
                          chroma(pair.chroma1), chroma(pair.chroma2),
                          msk(pair.mask1), msk(pair.mask2))


def augment_graph(graph, spec: AugmentationSpec):
    """Move graph nodes with the transform :func:`augment` applies to pixels.

    Nodes leaving the frame are dropped together with their edges.
    """
    from .vessel_graph import VesselGraph, _canonical

    if spec.is_identity or graph.num_nodes == 0:
        return VesselGraph(graph.nodes.copy(), graph.edges.copy(), graph.image_size)
    mat, offset = _affine(spec, graph.image_size)
    rc = np.stack([graph.nodes[:, 1], graph.nodes[:, 0]], axis=1).astype(np.float64)
    out = np.linalg.solve(mat, (rc - offset).T).T
    out = np.floor(out + 0.5).astype(int)
    h, w = graph.image_size
    inside = (out[:, 0] >= 0) & (out[:, 0] < h) & (out[:, 1] >= 0) & (out[:, 1] < w)
    unique: dict[tuple[int, int], int] = {}
    remap = {}
    for i in np.flatnonzero(inside):
        remap[i] = unique.setdefault((int(out[i, 1]), int(out[i, 0])), len(unique))
    edges = [(remap[a], remap[b]) for a, b in graph.edges.tolist() if a in remap and b in remap]
    return _canonical(list(unique), edges, graph.image_size)


def resize_pair(pair: RegisteredPair, target: tuple[int, int]) -> RegisteredPair:
    target = (int(target[0]), int(target[1]))
    if min(target) <= 0:
        raise ValueError("target size must be positive")
    if target == pair.shape:
        return replace(pair)

    def img(a):
        return np.clip(resize(a, target, order=1, mode="edge", anti_aliasing=False), 0, 1)

    def msk(m):
        if m is None:
            return None
        return resize(m.astype(np.float64), target, order=0, mode="edge",
                      anti_aliasing=False) > 0.5

    def chroma(c):
        return None if c is None else np.stack([img(p) for p in c])

    return RegisteredPair(pair.id, img(pair.image1), img(pair.image2),
                          chroma(pair.chroma1), chroma(pair.chroma2),
                          msk(pair.mask1), msk(pair.mask2))


# ---------------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class ContrastProfile:
    """How one modality renders the shared vessel tree.

    ``vessel`` is the signed intensity change on vessels (negative: dark
    vessels as in colour fundus; positive: bright vessels as in angiography).
    """
    background: float = 0.5
    vessel: float = -0.3
    blur: float = 0.8
    noise: float = 0.02
    illumination: float = 0.15
    disc: float = 0.25
    blobs: int = 0


CF_LIKE = ContrastProfile(background=0.55, vessel=-0.3, blur=0.8, noise=0.02,
                          illumination=0.2, disc=0.3, blobs=3)
FFA_LIKE = ContrastProfile(background=0.2, vessel=0.55, blur=0.6, noise=0.03,
                           illumination=0.05, disc=0.15, blobs=0)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    size: tuple[int, int] = (64, 80)
    vessel_tree_depth: int = 3
    contrast_profile_1: ContrastProfile = CF_LIKE
    contrast_profile_2: ContrastProfile = FFA_LIKE
    seed: int = 0
    vessel_width: int = 3

    def __post_init__(self):
        if self.vessel_tree_depth < 1:
            raise ValueError("vessel_tree_depth must be >= 1")
        if min(self.size) < 8:
            raise ValueError("synthetic scenes need at least 8×8 pixels")


def _tree_segments(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Polylines of a binary branching tree rooted near the left edge."""
    h, w = spec.size
    root = np.array([rng.uniform(0.35, 0.65) * h, rng.uniform(0.12, 0.25) * w])
    heading = rng.uniform(-0.3, 0.3)
    length = 0.55 * w / (1 + 0.35 * (spec.vessel_tree_depth - 1))
    segments = []

    def grow(start, angle, seg_len, level):
        pts = [start]
        p = start.copy()
        n_steps = 4
        for _ in range(n_steps):
            angle_step = angle + rng.normal(0, 0.08)
            p = p + seg_len / n_steps * np.array([math.sin(angle_step), math.cos(angle_step)])
            p = np.clip(p, 2, np.array([h - 3, w - 3]))
            pts.append(p)
        segments.append((np.array(pts), level))
        if level < spec.vessel_tree_depth:
            spread = rng.uniform(0.45, 0.75)
            for sign in (-1, 1):
                grow(p, angle + sign * spread, seg_len * rng.uniform(0.65, 0.8), level + 1)

    grow(root, heading, length, 1)
    return root, segments


def generate_synthetic_pair(spec: SyntheticSceneSpec, pair_id: Optional[str] = None) -> RegisteredPair:
    """Render one vessel tree under two contrast profiles.

    Both modalities share the same tree, so ``mask1 == mask2``; appearance
    (vessel polarity, background, blur, noise, lesions) differs.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    root, segments = _tree_segments(spec, rng)

    mask = np.zeros((h, w), dtype=bool)
    for pts, _ in segments:
        for a, b in zip(pts[:-1], pts[1:]):
            rr, cc = draw_line(int(round(a[0])), int(round(a[1])),
                               int(round(b[0])), int(round(b[1])))
            mask[rr, cc] = True
    if spec.vessel_width > 1:
        mask = dilation(mask, disk(spec.vessel_width // 2))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    disc_r = 0.12 * min(h, w)
    disc = np.exp(-((yy - root[0]) ** 2 + (xx - root[1]) ** 2) / (2 * disc_r ** 2))
    tilt = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(tilt) * (yy / h - 0.5) + np.sin(tilt) * (xx / w - 0.5))
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0)
    texture /= texture.std() + 1e-12
    blob_centres = rng.uniform((0, 0), (h, w), size=(8, 2))

    def render(profile: ContrastProfile, noise_rng: np.random.Generator):
        img = np.full((h, w), profile.background)
        img += profile.illumination * ramp + profile.disc * disc
        img += 0.03 * texture
        for cy, cx in blob_centres[:profile.blobs]:
            img += 0.12 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 2.5 ** 2))
        profile_map = mask.astype(np.float64)
        if profile.blur > 0:
            profile_map = ndimage.gaussian_filter(profile_map, profile.blur)
            profile_map /= max(profile_map.max(), 1e-12)
        img += profile.vessel * profile_map
        img += profile.noise * noise_rng.standard_normal((h, w))
        return np.clip(img, 0.0, 1.0)

    noise_rng = np.random.default_rng([spec.seed, 1])
    im1 = render(spec.contrast_profile_1, noise_rng)
    im2 = render(spec.contrast_profile_2, noise_rng)
    return RegisteredPair(pair_id or f"synth{spec.seed:04d}", im1, im2,
                          mask1=mask.copy(), mask2=mask.copy())


def synthetic_dataset(n: int, size: tuple[int, int] = (64, 80), depth: int = 3,
                      seed: int = 0) -> list[RegisteredPair]:
    return [generate_synthetic_pair(SyntheticSceneSpec(size=size, vessel_tree_depth=depth,
                                                       seed=seed + i))
            for i in range(n)]
