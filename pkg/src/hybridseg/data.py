"""Synthetic benchmarks and the mixed-content training pipeline.

Two data sources live here:

* a 2-D point benchmark with two inlier blobs, training negatives that
  deliberately cover only half of the directions around the data, and test
  anomalies that also appear in the uncovered half — built to expose
  detectors that overfit the training negatives;
* a procedural dense-scene benchmark: textured background plus a few
  textured shapes for K=3 inlier classes, with anomalous shapes (a texture
  family never seen in training) injected into val/test scenes, and a
  separate held-out texture family used as paste-in training negatives.

Every generator derives its randomness from an explicit seed (per-sample
streams come from ``SeedSequence([seed, ...indices])``), so datasets are
reproducible element by element and safe to generate in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataFormatError
from .labels import IGNORE_LABEL, PixelRole, outlier_label
from .rasters import ManifestRow, read_pgm, read_ppm, write_manifest, write_pgm, write_ppm

# ---------------------------------------------------------------------------
# 2-D point benchmark


@dataclass(frozen=True)
class ToyPointSet:
    """Labeled 2-D points.

    ``class_labels`` holds the inlier class (0/1) where ``roles == INLIER``
    and IGNORE_LABEL elsewhere. ``unseen`` marks test anomalies lying in the
    direction sector that training negatives never cover (plus the far
    cluster); it is all-False for train sets.
    """

    points: np.ndarray        # (N, 2) float64
    class_labels: np.ndarray  # (N,) int
    roles: np.ndarray         # (N,) PixelRole values
    unseen: np.ndarray        # (N,) bool

    def __post_init__(self):
        n = self.points.shape[0]
        if self.points.shape != (n, 2):
            raise ContractViolation("points must be (N, 2)")
        for name in ("class_labels", "roles", "unseen"):
            if getattr(self, name).shape != (n,):
                raise ContractViolation(f"{name} must be (N,)")


TOY_INLIER_MEANS = ((-2.0, 0.0), (2.0, 0.0))
TOY_INLIER_SIGMA = 0.5
TOY_ANNULUS = (4.0, 5.0)
TOY_CLUSTER_CENTER = (0.0, -6.0)
TOY_CLUSTER_SIGMA = 0.3
TOY_CLUSTER_FRACTION = 0.25


def _annulus_points(rng: np.random.Generator, n: int, theta_lo: float,
                    theta_hi: float) -> np.ndarray:
    """Area-uniform points on an annulus sector."""
    r_lo, r_hi = TOY_ANNULUS
    theta = rng.uniform(theta_lo, theta_hi, size=n)
    r = np.sqrt(rng.uniform(r_lo**2, r_hi**2, size=n))
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _blob(rng: np.random.Generator, n: int, mean, sigma: float) -> np.ndarray:
    return np.asarray(mean) + sigma * rng.standard_normal((n, 2))


def gen_toy2d(seed: int, n_per_role: int = 200) -> tuple[ToyPointSet, ToyPointSet]:
    """Build (train, test) point sets.

    Train: two Gaussian inlier blobs and negatives drawn only from the upper
    half-annulus (angles in [0, pi)). Test: fresh inlier draws plus anomalies
    from the full annulus and a far cluster below the data, so a detector
    that merely memorized the training negatives is blind to the lower half.
    """
    if n_per_role < 100:
        raise ContractViolation("n_per_role must be >= 100")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    def inliers(r):
        pts = [_blob(r, n_per_role, m, TOY_INLIER_SIGMA) for m in TOY_INLIER_MEANS]
        labels = np.repeat(np.arange(2), n_per_role)
        return np.concatenate(pts), labels

    train_pts, train_labels = inliers(rng)
    negatives = _annulus_points(rng, n_per_role, 0.0, np.pi)
    train = ToyPointSet(
        points=np.concatenate([train_pts, negatives]),
        class_labels=np.concatenate([train_labels,
                                     np.full(n_per_role, IGNORE_LABEL)]),
        roles=np.concatenate([np.zeros(2 * n_per_role, dtype=np.uint8),
                              np.full(n_per_role, PixelRole.OUTLIER, dtype=np.uint8)]),
        unseen=np.zeros(3 * n_per_role, dtype=bool),
    )

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    test_pts, test_labels = inliers(rng)
    n_cluster = int(round(TOY_CLUSTER_FRACTION * n_per_role))
    ring = _annulus_points(rng, n_per_role - n_cluster, 0.0, 2.0 * np.pi)
    cluster = _blob(rng, n_cluster, TOY_CLUSTER_CENTER, TOY_CLUSTER_SIGMA)
    anomalies = np.concatenate([ring, cluster])
    ring_unseen = np.arctan2(ring[:, 1], ring[:, 0]) < 0.0  # lower half-plane
    test = ToyPointSet(
        points=np.concatenate([test_pts, anomalies]),
        class_labels=np.concatenate([test_labels,
                                     np.full(n_per_role, IGNORE_LABEL)]),
        roles=np.concatenate([np.zeros(2 * n_per_role, dtype=np.uint8),
                              np.full(n_per_role, PixelRole.OUTLIER, dtype=np.uint8)]),
        unseen=np.concatenate([np.zeros(2 * n_per_role, dtype=bool),
                               ring_unseen,
                               np.ones(n_cluster, dtype=bool)]),
    )
    return train, test


def as_grid(points: np.ndarray) -> np.ndarray:
    """Pack (N, 2) points into a (1, 2, N, 1) pseudo-image.

    1x1 convolutions over this grid act as a plain MLP per point, which lets
    the point benchmark reuse the dense training stack unchanged.
    """
    points = np.asarray(points, dtype=float)
    return points.T[None, :, :, None]


# ---------------------------------------------------------------------------
# Procedural textures


@dataclass(frozen=True)
class TextureSpec:
    """Low-frequency value noise around a family-specific mean color."""

    mean_rgb: tuple[float, float, float]
    amplitude: float
    cells: int  # noise lattice resolution; higher = finer grain


# Families are kept apart by their noise frequency (`cells`): inlier classes
# use fixed specs with {2, 6, 12}, training negatives draw from the coarse
# NEGATIVE_CELLS band, and test anomalies from the fine ANOMALY_CELLS band —
# so the negatives never show the anomaly texture, mirroring protocols whose
# auxiliary negatives come from a different source than the evaluated
# anomalies. Both held-out families draw a random mean color per instance:
# diversity is what forces the heads to learn "unusual texture" rather than
# one color, and anomalies whose color drifts near an inlier class are
# exactly the hard cases the density term has to catch.
TEXTURES: dict[str, TextureSpec] = {
    "class0": TextureSpec((0.35, 0.45, 0.35), 0.08, 2),
    "class1": TextureSpec((0.70, 0.30, 0.25), 0.10, 6),
    "class2": TextureSpec((0.25, 0.35, 0.70), 0.10, 12),
}
INLIER_TEXTURES = ("class0", "class1", "class2")
NEGATIVE_CELLS = (4, 5)    # inclusive, coarser than any inlier class
ANOMALY_CELLS = (26, 30)   # inclusive, finer than any inlier class
HELD_OUT_COLOR_RANGE = (0.15, 0.85)  # per-channel bounds for random means


def _held_out_spec(rng: np.random.Generator, cells_band: tuple[int, int]) -> TextureSpec:
    color = tuple(rng.uniform(*HELD_OUT_COLOR_RANGE, size=3))
    return TextureSpec(color, 0.12, int(rng.integers(cells_band[0], cells_band[1] + 1)))


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with bilinear sampling (half-pixel centers)."""
    c, h, w = image.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[:, y0[:, None], x0] * (1 - wx) + image[:, y0[:, None], x1] * wx
    bot = image[:, y1[:, None], x0] * (1 - wx) + image[:, y1[:, None], x1] * wx
    return top * (1 - wy) + bot * wy


def _resize_nearest(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W) with nearest-neighbor sampling (same grid as bilinear)."""
    h, w = raster.shape
    ys = np.clip(np.round((np.arange(out_h) + 0.5) * h / out_h - 0.5), 0, h - 1).astype(int)
    xs = np.clip(np.round((np.arange(out_w) + 0.5) * w / out_w - 0.5), 0, w - 1).astype(int)
    return raster[ys[:, None], xs]


def render_texture(rng: np.random.Generator, h: int, w: int,
                   spec: TextureSpec) -> np.ndarray:
    """(3, h, w) image in [0, 1]: mean color plus smooth seeded noise."""
    lattice = rng.uniform(-1.0, 1.0, size=(1, spec.cells + 1, spec.cells + 1))
    noise = _resize_bilinear(lattice, h, w)[0]
    out = np.asarray(spec.mean_rgb)[:, None, None] + spec.amplitude * noise
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dense scenes


@dataclass(frozen=True)
class SceneSample:
    """One dense sample: image, per-pixel labels, per-pixel roles.

    Labels use 0..K-1 for inlier classes, K for anomalous pixels and
    IGNORE_LABEL for pixels excluded from both training and evaluation.
    ``distance`` (optional, meters) supports range-binned evaluation.
    """

    image: np.ndarray           # (3, H, W) float64 in [0, 1]
    labels: np.ndarray          # (H, W) int
    roles: np.ndarray           # (H, W) uint8 PixelRole
    distance: np.ndarray | None = None  # (H, W) float64, meters

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractViolation("image must be (3, H, W)")
        hw = self.image.shape[1:]
        if self.labels.shape != hw or self.roles.shape != hw:
            raise ContractViolation("labels/roles must match image spatial dims")


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    num_classes: int = 3
    min_shapes: int = 1
    max_shapes: int = 3
    anomaly_area: tuple[float, float] = (0.01, 0.25)
    near_m: float = 5.0   # distance at the bottom image row
    far_m: float = 50.0   # distance at the top image row

    def __post_init__(self):
        if self.num_classes != 3:
            raise ContractViolation("scene benchmark is defined for exactly 3 classes")
        if self.size < 16:
            raise ContractViolation("scene size must be >= 16")


def _shape_support(rng: np.random.Generator, size: int,
                   lo_frac: float, hi_frac: float) -> np.ndarray:
    """Boolean (size, size) support of one random rectangle or disc."""
    if rng.integers(2) == 0:
        w = int(rng.integers(int(lo_frac * size), int(hi_frac * size) + 1))
        h = int(rng.integers(int(lo_frac * size), int(hi_frac * size) + 1))
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        sup = np.zeros((size, size), dtype=bool)
        sup[y0:y0 + h, x0:x0 + w] = True
        return sup
    radius = int(rng.integers(int(lo_frac * size / 2), int(hi_frac * size / 2) + 1))
    cy = int(rng.integers(radius, size - radius + 1))
    cx = int(rng.integers(radius, size - radius + 1))
    yy, xx = np.ogrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _distance_ramp(cfg: SceneConfig) -> np.ndarray:
    """Per-row distance in whole meters, far at the top, near at the bottom."""
    ramp = np.round(np.linspace(cfg.far_m, cfg.near_m, cfg.size))
    return np.repeat(ramp[:, None], cfg.size, axis=1)


def gen_scene(rng: np.random.Generator, cfg: SceneConfig,
              with_anomaly: bool) -> SceneSample:
    size = cfg.size
    image = render_texture(rng, size, size, TEXTURES["class0"])
    labels = np.zeros((size, size), dtype=np.int64)
    roles = np.full((size, size), PixelRole.INLIER, dtype=np.uint8)

    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        cls = int(rng.integers(1, cfg.num_classes))
        sup = _shape_support(rng, size, 0.15, 0.45)
        image[:, sup] = render_texture(rng, size, size, TEXTURES[INLIER_TEXTURES[cls]])[:, sup]
        labels[sup] = cls

    if with_anomaly:
        lo, hi = cfg.anomaly_area
        for _ in range(100):
            sup = _shape_support(rng, size, 0.12, 0.5)
            if lo <= sup.mean() <= hi:
                break
        else:
            raise ContractViolation("could not sample an anomaly within the area bounds")
        spec = _held_out_spec(rng, ANOMALY_CELLS)
        image[:, sup] = render_texture(rng, size, size, spec)[:, sup]
        labels[sup] = outlier_label(cfg.num_classes)
        roles[sup] = PixelRole.OUTLIER

    distance = _distance_ramp(cfg) if with_anomaly else None
    return SceneSample(image=image, labels=labels, roles=roles, distance=distance)


SPLITS = ("train", "val", "test")


def gen_scenes(seed: int, cfg: SceneConfig, counts: dict[str, int]) -> dict[str, list[SceneSample]]:
    """Generate all splits; val/test scenes carry one anomalous shape each."""
    out: dict[str, list[SceneSample]] = {}
    for split_idx, split in enumerate(SPLITS):
        samples = []
        for i in range(counts.get(split, 0)):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_idx, i]))
            samples.append(gen_scene(rng, cfg, with_anomaly=split != "train"))
        out[split] = samples
    return out


# ---------------------------------------------------------------------------
# Negative patches and pasting


@dataclass(frozen=True)
class NegativePatch:
    image: np.ndarray  # (3, h, w) float64
    alpha: np.ndarray  # (h, w) bool

    def __post_init__(self):
        if not self.alpha.any():
            raise ContractViolation("patch alpha mask must be nonempty")
        if self.image.shape[1:] != self.alpha.shape:
            raise ContractViolation("patch image/alpha shape mismatch")


def gen_negative_patches(seed: int, count: int,
                         size_range: tuple[int, int] = (8, 20)) -> list[NegativePatch]:
    """Small held-out-texture shapes to paste into training crops.

    Each patch gets its own mean color and a grain drawn from
    NEGATIVE_CELLS, so the negative family is diverse while staying
    disjoint from both the inlier and the anomaly textures.
    """
    lo, hi = size_range
    if lo < 2 or hi < lo:
        raise ContractViolation("bad patch size range")
    patches = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        if rng.integers(2) == 0:
            alpha = np.ones((h, w), dtype=bool)
        else:
            yy, xx = np.ogrid[:h, :w]
            ry, rx = h / 2.0, w / 2.0
            alpha = ((yy - ry + 0.5) / ry) ** 2 + ((xx - rx + 0.5) / rx) ** 2 <= 1.0
        spec = _held_out_spec(rng, NEGATIVE_CELLS)
        patches.append(NegativePatch(image=render_texture(rng, h, w, spec), alpha=alpha))
    return patches


@dataclass(frozen=True)
class AugmentConfig:
    scale_jitter_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    crop_size: int = 64
    paste_count: int = 2
    num_classes: int = 3  # pasted pixels get label == num_classes
    max_retries: int = 10

    def __post_init__(self):
        lo, hi = self.scale_jitter_range
        if not (0 < lo <= hi):
            raise ContractViolation("scale_jitter_range must be positive and ordered")
        if not 0 <= self.hflip_prob <= 1:
            raise ContractViolation("hflip_prob must be in [0, 1]")
        if self.crop_size < 1 or self.paste_count < 0:
            raise ContractViolation("bad crop_size/paste_count")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2")


def paste_negatives(sample: SceneSample, patches: list[NegativePatch],
                    cfg: AugmentConfig, rng: np.random.Generator) -> SceneSample:
    """Alpha-composite `paste_count` random patches fully inside the crop.

    Pasted pixels become OUTLIER in both labels and roles; pastes may overlap
    each other but never cross the image border.
    """
    if cfg.paste_count == 0 or not patches:
        return replace(sample, image=sample.image.copy(),
                       labels=sample.labels.copy(), roles=sample.roles.copy())
    height, width = sample.labels.shape
    image = sample.image.copy()
    labels = sample.labels.copy()
    roles = sample.roles.copy()
    out = outlier_label(cfg.num_classes)
    for _ in range(cfg.paste_count):
        patch = patches[int(rng.integers(len(patches)))]
        ph, pw = patch.alpha.shape
        if ph > height or pw > width:
            raise ContractViolation(f"patch {ph}x{pw} larger than crop {height}x{width}")
        y0 = int(rng.integers(0, height - ph + 1))
        x0 = int(rng.integers(0, width - pw + 1))
        view = np.s_[y0:y0 + ph, x0:x0 + pw]
        image[(slice(None),) + view] = np.where(patch.alpha, patch.image,
                                                image[(slice(None),) + view])
        labels[view] = np.where(patch.alpha, out, labels[view])
        roles[view] = np.where(patch.alpha, np.uint8(PixelRole.OUTLIER), roles[view])
    return SceneSample(image=image, labels=labels, roles=roles, distance=None)


def augment(sample: SceneSample, cfg: AugmentConfig,
            rng: np.random.Generator) -> SceneSample:
    """Scale-jitter, random horizontal flip, random square crop.

    Labels and roles follow the image through identical geometry
    (nearest-neighbor where the image is bilinear). If the jittered image is
    smaller than the crop, the factor is re-drawn a bounded number of times
    and the final fallback reflects the borders out to crop size.
    """
    h, w = sample.labels.shape
    lo, hi = cfg.scale_jitter_range
    for _ in range(cfg.max_retries + 1):
        factor = rng.uniform(lo, hi)
        new_h, new_w = int(round(h * factor)), int(round(w * factor))
        if new_h >= cfg.crop_size and new_w >= cfg.crop_size:
            break
    image = _resize_bilinear(sample.image, new_h, new_w)
    labels = _resize_nearest(sample.labels, new_h, new_w)
    roles = _resize_nearest(sample.roles, new_h, new_w)

    while new_h < cfg.crop_size or new_w < cfg.crop_size:
        # reflect can add at most dim-1 rows/cols per pass, so pad in rounds
        pad_h = min(max(0, cfg.crop_size - new_h), new_h - 1)
        pad_w = min(max(0, cfg.crop_size - new_w), new_w - 1)
        pads = ((0, pad_h), (0, pad_w))
        image = np.pad(image, ((0, 0),) + pads, mode="reflect")
        labels = np.pad(labels, pads, mode="reflect")
        roles = np.pad(roles, pads, mode="reflect")
        new_h, new_w = labels.shape

    if rng.uniform() < cfg.hflip_prob:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
        roles = roles[:, ::-1]

    y0 = int(rng.integers(0, new_h - cfg.crop_size + 1))
    x0 = int(rng.integers(0, new_w - cfg.crop_size + 1))
    view = np.s_[y0:y0 + cfg.crop_size, x0:x0 + cfg.crop_size]
    return SceneSample(image=np.ascontiguousarray(image[(slice(None),) + view]),
                       labels=np.ascontiguousarray(labels[view]),
                       roles=np.ascontiguousarray(roles[view]),
                       distance=None)


def mixed_batch(scenes: list[SceneSample], patches: list[NegativePatch],
                cfg: AugmentConfig, rng: np.random.Generator,
                batch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assemble one training batch of augmented crops with pasted negatives."""
    images, labels, roles = [], [], []
    for _ in range(batch_size):
        scene = scenes[int(rng.integers(len(scenes)))]
        crop = paste_negatives(augment(scene, cfg, rng), patches, cfg, rng)
        images.append(crop.image)
        labels.append(crop.labels)
        roles.append(crop.roles)
    return np.stack(images), np.stack(labels), np.stack(roles)


# ---------------------------------------------------------------------------
# Dataset directory layout


def quantize_image(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0,1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_scenes(root, splits: dict[str, list[SceneSample]]) -> Path:
    """Write PPM/PGM rasters plus manifest.csv; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        for i, sample in enumerate(splits.get(split, [])):
            stem = f"{split}_{i:04d}"
            write_ppm(root / f"{stem}.ppm", quantize_image(sample.image))
            write_pgm(root / f"{stem}_label.pgm", sample.labels.astype(np.uint8))
            write_pgm(root / f"{stem}_role.pgm", sample.roles.astype(np.uint8))
            if sample.distance is not None:
                write_pgm(root / f"{stem}_dist.pgm", sample.distance.astype(np.uint8))
            rows.append(ManifestRow(split=split, image=f"{stem}.ppm",
                                    label=f"{stem}_label.pgm", mask=f"{stem}_role.pgm"))
    manifest = root / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def load_scene(root, row: ManifestRow) -> SceneSample:
    root = Path(root)
    image = read_ppm(root / row.image).astype(np.float64).transpose(2, 0, 1) / 255.0
    labels = read_pgm(root / row.label).astype(np.int64)
    roles = read_pgm(root / row.mask)
    dist_path = root / (Path(row.image).stem + "_dist.pgm")
    distance = read_pgm(dist_path).astype(np.float64) if dist_path.exists() else None
    invalid = (roles == PixelRole.INLIER) & (labels == IGNORE_LABEL)
    if invalid.any():
        raise DataFormatError(f"{row.image}: inlier pixels without class labels")
    return SceneSample(image=image, labels=labels, roles=roles, distance=distance)
