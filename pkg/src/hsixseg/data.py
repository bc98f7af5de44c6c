"""Synthetic paired-modality scenes, normalization, tiling, and disk format.

A scene is a Voronoi-partitioned label map with per-class spectral
signatures (HSI cube) and elevations (X map). The default class table is
built so that one class pair is spectrally near-identical but separated by
elevation, and another pair is elevation-identical but spectrally
separated: neither modality alone can solve the scene, their fusion can.

On-disk format: a directory with meta.json plus raw little-endian arrays
hsi.bin (float32), x.bin (float32) and labels.bin (int32, -1 = ignore),
all row-major.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = -1
FORMAT_MAGIC = "hsix-scene"
FORMAT_VERSION = 1


class DatasetFormatError(Exception):
    """Raised when an on-disk scene directory is missing or malformed."""


@dataclass
class ClassSpec:
    name: str
    spectral_signature: np.ndarray  # (B,) mean reflectance per band
    spectral_jitter: float          # per-band noise scale
    elevation: float                # mean X-modality value
    elevation_jitter: float
    palette_rgb: tuple              # display color, components in [0, 1]

    def __post_init__(self):
        self.spectral_signature = np.asarray(self.spectral_signature, dtype=np.float64)
        if self.spectral_jitter < 0 or self.elevation_jitter < 0:
            raise ValueError("jitters must be nonnegative")
        if not all(0.0 <= v <= 1.0 for v in self.palette_rgb):
            raise ValueError("palette values must lie in [0, 1]")


@dataclass
class SceneSample:
    hsi: np.ndarray     # (H, W, B) float32 in [0, 1]
    x: np.ndarray       # (H, W, Cx) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int32, -1 = ignore

    def __post_init__(self):
        self.hsi = np.asarray(self.hsi, dtype=np.float32)
        self.x = np.asarray(self.x, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.hsi.shape[:2] != self.x.shape[:2] or self.hsi.shape[:2] != self.labels.shape:
            raise ValueError("hsi, x and labels must share the spatial grid")

    @property
    def shape(self):
        return self.labels.shape


def ndsm(dsm: np.ndarray, dem: np.ndarray) -> np.ndarray:
    """Object height above ground: surface model minus elevation model."""
    dsm = np.asarray(dsm, dtype=np.float64)
    dem = np.asarray(dem, dtype=np.float64)
    if dsm.shape != dem.shape:
        raise ValueError(f"shape mismatch: {dsm.shape} vs {dem.shape}")
    return dsm - dem


def normalize_minmax(t: np.ndarray, per_channel: bool = False) -> np.ndarray:
    """Affine rescale to [0, 1]; degenerate (constant) slices map to zeros."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    if per_channel:
        for c in range(t.shape[-1]):
            out[..., c] = normalize_minmax(t[..., c])
        return out
    lo, hi = t.min(), t.max()
    if hi > lo:
        out = (t - lo) / (hi - lo)
    return out


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Low-frequency random field in [-1, 1], from a pair of random sinusoids."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        out += np.sin(2 * np.pi * fy * yy / height + py) * np.sin(2 * np.pi * fx * xx / width + px)
    return out / 4.0


def _band_correlated_noise(rng: np.random.Generator, shape: tuple, window: int = 5) -> np.ndarray:
    """White noise smoothed along the band axis so neighbouring bands co-vary."""
    eps = rng.standard_normal(shape)
    kernel = np.ones(window) / window
    pad = window // 2
    padded = np.pad(eps, [(0, 0), (0, 0), (pad, pad)], mode="edge")
    out = np.zeros_like(eps)
    for b in range(shape[2]):
        out[:, :, b] = padded[:, :, b:b + window] @ kernel
    return out


def _signature(bands: int, centers, widths, amps, base: float) -> np.ndarray:
    lam = np.linspace(0.0, 1.0, bands)
    sig = np.full(bands, base)
    for c, w, a in zip(centers, widths, amps):
        sig += a * np.exp(-0.5 * ((lam - c) / w) ** 2)
    return np.clip(sig, 0.02, 0.98)


def default_class_specs(bands: int = 24) -> list[ClassSpec]:
    """Six classes; (0, 1) share spectra, (2, 3) share elevation."""
    meadow = _signature(bands, [0.35, 0.75], [0.08, 0.2], [0.35, 0.25], 0.15)
    soil = _signature(bands, [0.6], [0.3], [0.4], 0.25)
    asphalt = _signature(bands, [0.2], [0.25], [0.1], 0.12)
    water = _signature(bands, [0.1], [0.1], [0.15], 0.05)
    roof = _signature(bands, [0.5, 0.9], [0.1, 0.1], [0.3, 0.2], 0.35)
    return [
        ClassSpec("low meadow", meadow, 0.03, 0.15, 0.02, (0.0, 0.8, 0.0)),
        ClassSpec("tall hedge", meadow.copy(), 0.03, 0.65, 0.02, (0.498, 1.0, 0.0)),
        ClassSpec("bare soil", soil, 0.03, 0.12, 0.02, (0.18, 0.541, 0.341)),
        ClassSpec("asphalt", asphalt, 0.03, 0.12, 0.02, (0.0, 0.275, 0.0)),
        ClassSpec("water", water, 0.02, 0.05, 0.01, (0.0, 1.0, 1.0)),
        ClassSpec("metal roof", roof, 0.04, 0.85, 0.03, (0.624, 0.322, 0.176)),
    ]


def generate_scene(
    spec: list[ClassSpec],
    height: int,
    width: int,
    bands: int,
    seed: int,
    sites: int = 48,
    illumination: float = 0.04,
) -> SceneSample:
    """Seeded Voronoi scene with per-class spectra and elevations.

    All randomness comes from ``seed``: the same call is bitwise
    reproducible. ``illumination`` scales a smooth field added to both
    modalities.
    """
    if len(spec) < 2:
        raise ValueError("need at least 2 classes")
    for cs in spec:
        if len(cs.spectral_signature) > bands:
            raise ValueError(
                f"class {cs.name!r} signature has {len(cs.spectral_signature)} bands, "
                f"scene only has {bands}")
    rng = np.random.default_rng(seed)
    k = len(spec)
    sites = max(sites, k)
    pts = rng.uniform(0, 1, size=(sites, 2)) * [height, width]
    site_cls = np.concatenate([np.arange(k), rng.integers(0, k, size=sites - k)])
    rng.shuffle(site_cls)

    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    labels = site_cls[np.argmin(d2, axis=-1)].astype(np.int32)

    signatures = np.zeros((k, bands))
    spa_jit = np.zeros(k)
    elev = np.zeros(k)
    elev_jit = np.zeros(k)
    for i, cs in enumerate(spec):
        signatures[i, : len(cs.spectral_signature)] = cs.spectral_signature
        spa_jit[i] = cs.spectral_jitter
        elev[i] = cs.elevation
        elev_jit[i] = cs.elevation_jitter

    illum = illumination * _smooth_field(rng, height, width)
    hsi = signatures[labels]
    hsi = hsi + spa_jit[labels][..., None] * _band_correlated_noise(rng, (height, width, bands))
    hsi = hsi + illum[..., None]
    x = elev[labels] + elev_jit[labels] * rng.standard_normal((height, width)) + illum
    return SceneSample(
        hsi=np.clip(hsi, 0.0, 1.0),
        x=np.clip(x, 0.0, 1.0)[..., None],
        labels=labels,
    )


@dataclass
class Tile:
    row: int
    col: int
    sample: SceneSample


def tile(scene: SceneSample, tile_size: int, stride: int) -> list[Tile]:
    """Row-major sliding tiles; edge tiles are zero-padded with ignore labels."""
    H, W = scene.shape
    if tile_size % 2 != 0:
        raise ValueError("tile_size must be even")
    if tile_size > H or tile_size > W:
        raise ValueError(f"tile_size {tile_size} exceeds scene size {(H, W)}")
    if stride < 1:
        raise ValueError("stride must be positive")

    def positions(extent: int) -> list[int]:
        pos = list(range(0, extent - tile_size + 1, stride))
        if pos[-1] + tile_size < extent:
            pos.append(pos[-1] + stride)
        return pos

    tiles = []
    for r in positions(H):
        for c in positions(W):
            hs = np.zeros((tile_size, tile_size, scene.hsi.shape[2]), dtype=np.float32)
            xs = np.zeros((tile_size, tile_size, scene.x.shape[2]), dtype=np.float32)
            ls = np.full((tile_size, tile_size), IGNORE_LABEL, dtype=np.int32)
            h = min(tile_size, H - r)
            w = min(tile_size, W - c)
            hs[:h, :w] = scene.hsi[r:r + h, c:c + w]
            xs[:h, :w] = scene.x[r:r + h, c:c + w]
            ls[:h, :w] = scene.labels[r:r + h, c:c + w]
            tiles.append(Tile(r, c, SceneSample(hs, xs, ls)))
    return tiles


def reassemble(tiles: list[Tile], height: int, width: int) -> SceneSample:
    """Inverse of non-overlapping tiling; later tiles overwrite earlier ones."""
    bands = tiles[0].sample.hsi.shape[2]
    xc = tiles[0].sample.x.shape[2]
    hsi = np.zeros((height, width, bands), dtype=np.float32)
    x = np.zeros((height, width, xc), dtype=np.float32)
    labels = np.full((height, width), IGNORE_LABEL, dtype=np.int32)
    for t in tiles:
        ts = t.sample.labels.shape[0]
        h = min(ts, height - t.row)
        w = min(ts, width - t.col)
        hsi[t.row:t.row + h, t.col:t.col + w] = t.sample.hsi[:h, :w]
        x[t.row:t.row + h, t.col:t.col + w] = t.sample.x[:h, :w]
        labels[t.row:t.row + h, t.col:t.col + w] = t.sample.labels[:h, :w]
    return SceneSample(hsi, x, labels)


def save_scene(scene: SceneSample, path: str, class_names: list[str] | None = None,
               palette: list[tuple] | None = None, provenance: str = "synthetic") -> None:
    os.makedirs(path, exist_ok=True)
    H, W = scene.shape
    meta = {
        "magic": FORMAT_MAGIC,
        "version": FORMAT_VERSION,
        "height": H,
        "width": W,
        "bands": int(scene.hsi.shape[2]),
        "x_channels": int(scene.x.shape[2]),
        "class_names": class_names or [],
        "palette": [list(p) for p in (palette or [])],
        "normalization": provenance,
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    scene.hsi.astype("<f4").tofile(os.path.join(path, "hsi.bin"))
    scene.x.astype("<f4").tofile(os.path.join(path, "x.bin"))
    scene.labels.astype("<i4").tofile(os.path.join(path, "labels.bin"))


def load_scene(path: str) -> SceneSample:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise DatasetFormatError(f"missing meta.json in {path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt meta.json: {e}") from e
    if meta.get("magic") != FORMAT_MAGIC:
        raise DatasetFormatError(f"bad magic in {meta_path}: {meta.get('magic')!r}")
    try:
        H, W, B, C = meta["height"], meta["width"], meta["bands"], meta["x_channels"]
    except KeyError as e:
        raise DatasetFormatError(f"meta.json missing field {e}") from e

    def read(name, dtype, count, shape):
        fp = os.path.join(path, name)
        if not os.path.isfile(fp):
            raise DatasetFormatError(f"missing {name} in {path}")
        a = np.fromfile(fp, dtype=dtype)
        if a.size != count:
            raise DatasetFormatError(
                f"{name} holds {a.size} values, header implies {count}")
        return a.reshape(shape)

    return SceneSample(
        hsi=read("hsi.bin", "<f4", H * W * B, (H, W, B)),
        x=read("x.bin", "<f4", H * W * C, (H, W, C)),
        labels=read("labels.bin", "<i4", H * W, (H, W)),
    )


def load_meta(path: str) -> dict:
    with open(os.path.join(path, "meta.json")) as f:
        return json.load(f)
