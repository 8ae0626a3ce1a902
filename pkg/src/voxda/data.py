"""Procedural multiview, multi-domain voxel dataset.

Six parametric shape families stand in for object classes.  Each instance is
rendered from 8 azimuths (45 degree steps) on a white background (the source
domain); the target domain applies a corruption profile (blur, resolution loss,
pixel noise, textured background) to the same renders.

On disk a dataset is ``manifest.json`` plus ``blobs/NNNN.bin``: one blob per
instance holding its ground-truth grid followed by every image of every view
and domain, all little-endian float32, row-major.  Each blob carries a CRC32 in
the manifest.
"""
from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

FORMAT_VERSION = "vxds-1"
CLASS_NAMES = ("airplane", "car", "monitor", "lamp", "telephone", "boat")
AZIMUTHS = tuple(range(0, 360, 45))
DOMAINS = ("source", "target")


class DatasetError(Exception):
    pass


class FormatVersionError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass(frozen=True)
class DomainProfile:
    name: str
    background: str = "none"  # none | textured_clutter
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    resolution_scale: float = 1.0

    def __post_init__(self):
        if self.background not in ("none", "textured_clutter"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if not 0 < self.resolution_scale <= 1:
            raise ValueError("resolution_scale must lie in (0, 1]")

    @property
    def is_identity(self) -> bool:
        return (self.background == "none" and self.blur_sigma == 0
                and self.noise_sigma == 0 and self.resolution_scale == 1)


PROFILES: Dict[str, DomainProfile] = {
    "source": DomainProfile("source"),
    # lab drone footage: blurry, low resolution, plain background
    "lab": DomainProfile("lab", "none", 1.5, 0.02, 0.5),
    # in the wild: busy backgrounds
    "wild": DomainProfile("wild", "textured_clutter", 1.0, 0.02, 1.0),
    # segmented lab footage: close to the source
    "segmented": DomainProfile("segmented", "none", 0.0, 0.03, 1.0),
}


@dataclass
class Sample:
    image: np.ndarray
    gt_voxel: np.ndarray
    class_label: int
    domain_tag: str
    instance_id: int
    azimuth_deg: int
    split: str = "train"


@dataclass
class GenConfig:
    classes: int = 6
    instances: int = 10
    views: int = 8
    target_profile: str = "lab"
    voxel_size: int = 16
    image_size: int = 32
    image_channels: int = 3
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 1 <= self.classes <= len(CLASS_NAMES):
            raise ValueError(f"classes must lie in [1, {len(CLASS_NAMES)}]")
        if self.instances < 2:
            raise ValueError("need at least 2 instances per class for a train/test split")
        if self.views not in (1, 2, 4, 8):
            raise ValueError("views must be 1, 2, 4 or 8 (azimuths are multiples of 45 degrees)")
        if self.target_profile not in PROFILES:
            raise ValueError(f"unknown target profile {self.target_profile!r}; choose from {sorted(PROFILES)}")
        if self.image_channels != 3:
            raise ValueError("only 3-channel images are generated")

    @property
    def azimuths(self) -> Tuple[int, ...]:
        step = 360 // self.views
        return tuple(range(0, 360, step))


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def _coords(v: int):
    u = (np.arange(v) + 0.5) / v - 0.5
    return np.meshgrid(u, u, u, indexing="ij")  # x, y (up), z


def _box(x, y, z, cx, cy, cz, hx, hy, hz):
    # thin parts keep at least one cell of thickness on coarse grids
    h_min = 0.5 / x.shape[0]
    hx, hy, hz = max(hx, h_min), max(hy, h_min), max(hz, h_min)
    return (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy) & (np.abs(z - cz) <= hz)


def _airplane(x, y, z, j):
    length, span = 0.40 * j(), 0.38 * j()
    wing_x = 0.05 * j() - 0.05
    g = _box(x, y, z, 0, 0, 0, length, 0.05, 0.05)
    g |= _box(x, y, z, wing_x, 0, 0, 0.07 * j(), 0.035, span)
    g |= _box(x, y, z, -length + 0.06, 0.12 * j(), 0, 0.05, 0.12 * j(), 0.035)
    g |= _box(x, y, z, -length + 0.06, 0.0, 0, 0.04, 0.035, 0.15 * j())
    return g


def _car(x, y, z, j):
    half_len, half_w = 0.36 * j(), 0.18 * j()
    top = 0.02 * j()
    g = _box(x, y, z, 0, -0.1 + top / 2, 0, half_len, 0.1 + top / 2, half_w)
    g |= _box(x, y, z, 0.04 * j() - 0.04, top + 0.08, 0, 0.18 * j(), 0.08, half_w * 0.85)
    r = 0.085 * j()
    for wx in (-half_len * 0.65, half_len * 0.65):
        disc = (x - wx) ** 2 + (y + 0.22) ** 2 <= r * r
        g |= disc & (np.abs(z) <= half_w + 0.02) & (np.abs(z) >= half_w - 0.08)
    return g


def _monitor(x, y, z, j):
    half_w, top = 0.34 * j(), 0.38 * j()
    g = _box(x, y, z, 0, (top - 0.05) / 2 + 0.0, 0, half_w, (top + 0.05) / 2, 0.04)
    g |= _box(x, y, z, 0, -0.18, 0, 0.04, 0.16, 0.04)
    g |= _box(x, y, z, 0, -0.36, 0.0, 0.2 * j(), 0.04, 0.15 * j())
    return g


def _lamp(x, y, z, j):
    base_r, bulb_r = 0.18 * j(), 0.15 * j()
    bulb_y = 0.22 * j()
    g = ((x ** 2 + z ** 2) <= base_r ** 2) & (y >= -0.44) & (y <= -0.36)
    g |= ((x ** 2 + z ** 2) <= 0.045 ** 2 * 2) & (y >= -0.4) & (y <= bulb_y)
    g |= (x ** 2 + (y - bulb_y) ** 2 + z ** 2) <= bulb_r ** 2
    return g


def _telephone(x, y, z, j):
    half_len, r = 0.30 * j(), 0.11 * j()
    yc = np.clip(y, -half_len, half_len)
    g = (x ** 2 + (y - yc) ** 2 + (z / 0.7) ** 2) <= r * r
    for ey in (-half_len, half_len):
        g |= ((x - 0.07) ** 2 + (y - ey) ** 2 + z ** 2) <= (0.1 * j()) ** 2
    return g


def _boat(x, y, z, j):
    half_len, beam = 0.40 * j(), 0.2 * j()
    depth = 0.22
    yb = y + 0.02
    taper = np.clip(1 - (x / half_len) ** 2, 0, None)
    width = beam * taper * np.clip((yb + depth) / depth, 0, 1)
    g = (yb <= 0) & (yb >= -depth) & (np.abs(z) <= width + 0.035) & (np.abs(x) <= half_len)
    g |= _box(x, y, z, 0, -depth - 0.06, 0, half_len * 0.6, 0.07, 0.035)
    g |= _box(x, y, z, 0.02, 0.17 * j(), 0, 0.035, 0.19 * j(), 0.035)
    return g


_GRAMMARS = (_airplane, _car, _monitor, _lamp, _telephone, _boat)


def generate_shape(class_id: int, instance_seed: int, v: int = 16) -> np.ndarray:
    """Binary (v, v, v) grid indexed [x, y, z] with y pointing up."""
    if not 0 <= class_id < len(_GRAMMARS):
        raise ValueError(f"class_id must lie in [0, {len(_GRAMMARS)}), got {class_id}")
    rng = np.random.default_rng([class_id, instance_seed])

    def jitter():
        return float(rng.uniform(0.8, 1.2))

    x, y, z = _coords(v)
    grid = _GRAMMARS[class_id](x, y, z, jitter)
    return grid.astype(np.uint8)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_TINT = np.array([1.0, 0.93, 0.85])


def rotate_grid(grid: np.ndarray, azimuth_deg: int) -> np.ndarray:
    """Rotate about the vertical (y) axis with nearest-neighbour resampling."""
    if azimuth_deg % 45:
        raise ValueError(f"azimuth must be a multiple of 45 degrees, got {azimuth_deg}")
    a = azimuth_deg % 360
    if a % 90 == 0:
        # exact for quarter turns; axes (x, z) -> np.rot90 on the (0, 2) plane
        return np.rot90(grid, k=a // 90, axes=(0, 2)).copy()
    v = grid.shape[0]
    c = (v - 1) / 2
    th = np.deg2rad(a)
    i, k = np.meshgrid(np.arange(v), np.arange(v), indexing="ij")
    xr, zr = i - c, k - c
    # inverse of rot90's convention so 45-degree steps compose with quarter turns
    sx = np.rint(np.cos(th) * xr + np.sin(th) * zr + c).astype(int)
    sz = np.rint(-np.sin(th) * xr + np.cos(th) * zr + c).astype(int)
    valid = (sx >= 0) & (sx < v) & (sz >= 0) & (sz < v)
    out = np.zeros_like(grid)
    out[i[valid], :, k[valid]] = grid[sx[valid], :, sz[valid]]
    return out


def render_view(gt_voxel: np.ndarray, azimuth_deg: int, image_size: int = 32) -> np.ndarray:
    """Orthographic depth-shaded render, (3, S, S) floats, white background."""
    rot = rotate_grid(gt_voxel, azimuth_deg)
    v = rot.shape[0]
    occ = rot > 0
    hit = occ.any(axis=2)  # (x, y)
    # viewer sits at +z; the nearest voxel has the largest z index
    zmax = (v - 1) - np.argmax(occ[:, :, ::-1], axis=2)
    depth = (v - 1 - zmax) / max(v - 1, 1)
    shade = np.where(hit, 0.9 - 0.6 * depth, 1.0)  # (x, y)
    img = shade.T[::-1, :]  # rows top-down = y descending, columns = x
    idx = (np.arange(image_size) * v) // image_size
    img = img[np.ix_(idx, idx)]
    obj = img < 1.0
    out = np.where(obj[None], img[None] * _TINT[:, None, None], 1.0)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# domain shift
# ---------------------------------------------------------------------------

def textured_background(shape, rng: np.random.Generator) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    bg = np.zeros(shape)
    for _ in range(3):
        freq = rng.uniform(2, 10)
        ang = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
        bg += rng.uniform(0.1, 0.25, size=(c, 1, 1)) * wave[None]
    bg += rng.uniform(0.3, 0.7, size=(c, 1, 1))
    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        hh, ww = rng.integers(2, max(3, h // 3)), rng.integers(2, max(3, w // 3))
        bg[:, y0:y0 + hh, x0:x0 + ww] = rng.uniform(0, 1, size=(c, 1, 1))
    return np.clip(bg, 0, 1)


def apply_domain_shift(image: np.ndarray, profile: DomainProfile, rng: np.random.Generator) -> np.ndarray:
    """Background paste, blur, resolution loss, pixel noise (in that order)."""
    if profile.is_identity:
        return image
    img = image.astype(np.float64)
    if profile.background == "textured_clutter":
        mask = np.all(img >= 1.0, axis=0)
        bg = textured_background(img.shape, rng)
        img = np.where(mask[None], bg, img)
    if profile.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, profile.blur_sigma, profile.blur_sigma), mode="nearest")
    if profile.resolution_scale < 1:
        h, w = img.shape[1:]
        small = ndimage.zoom(img, (1, profile.resolution_scale, profile.resolution_scale), order=1)
        img = ndimage.zoom(small, (1, h / small.shape[1], w / small.shape[2]), order=1)
        img = img[:, :h, :w]
    if profile.noise_sigma > 0:
        img = img + rng.normal(0, profile.noise_sigma, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), indent=None).encode("utf-8")


def _split_instances(cfg: GenConfig) -> Dict[int, str]:
    rng = np.random.default_rng([cfg.seed, 7919])
    n_test = max(1, int(round(cfg.test_fraction * cfg.instances)))
    split = {}
    for c in range(cfg.classes):
        test = set(rng.permutation(cfg.instances)[:n_test].tolist())
        for i in range(cfg.instances):
            split[c * cfg.instances + i] = "test" if i in test else "train"
    return split


def _instance_payload(cfg: GenConfig, class_id: int, inst: int):
    instance_id = class_id * cfg.instances + inst
    grid = generate_shape(class_id, cfg.seed * 100003 + inst, cfg.voxel_size)
    target = PROFILES[cfg.target_profile]
    images = []
    for az in cfg.azimuths:
        clean = render_view(grid, az, cfg.image_size)
        rng = np.random.default_rng([cfg.seed, class_id, inst, az])
        images.append(("source", az, clean))
        images.append(("target", az, apply_domain_shift(clean, target, rng)))
    return instance_id, grid, images


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VXDA_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(cfg: GenConfig, out_path) -> dict:
    """Generate and write the dataset; returns the manifest dict."""
    out = Path(out_path)
    try:
        (out / "blobs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc

    split = _split_instances(cfg)
    jobs = [(c, i) for c in range(cfg.classes) for i in range(cfg.instances)]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        payloads = list(pool.map(lambda job: _instance_payload(cfg, *job), jobs))

    records, blobs = [], []
    img_shape = [cfg.image_channels, cfg.image_size, cfg.image_size]
    vox_shape = [cfg.voxel_size] * 3
    img_bytes = 4 * int(np.prod(img_shape))
    vox_bytes = 4 * int(np.prod(vox_shape))
    for blob_idx, ((class_id, _), (instance_id, grid, images)) in enumerate(zip(jobs, payloads)):
        rel = f"blobs/{blob_idx:04d}.bin"
        parts = [grid.astype("<f4").tobytes()]
        offset = vox_bytes
        for domain in DOMAINS:
            for d, az, img in images:
                if d != domain:
                    continue
                parts.append(np.ascontiguousarray(img, dtype="<f4").tobytes())
                records.append({
                    "blob": rel,
                    "image_offset": offset,
                    "voxel_offset": 0,
                    "class_label": class_id,
                    "domain": domain,
                    "instance_id": instance_id,
                    "azimuth_deg": az,
                    "split": split[instance_id],
                })
                offset += img_bytes
        payload = b"".join(parts)
        try:
            (out / rel).write_bytes(payload)
        except OSError as exc:
            raise DatasetError(f"cannot write blob {out / rel}: {exc}") from exc
        blobs.append({"path": rel, "nbytes": len(payload), "crc32": zlib.crc32(payload)})

    manifest = {
        "format": FORMAT_VERSION,
        "num_classes": cfg.classes,
        "class_names": list(CLASS_NAMES[:cfg.classes]),
        "voxel_size": cfg.voxel_size,
        "image_size": cfg.image_size,
        "image_shape": img_shape,
        "voxel_shape": vox_shape,
        "seed": cfg.seed,
        "gen_config": asdict(cfg),
        "profiles": {"source": asdict(PROFILES["source"]), "target": asdict(PROFILES[cfg.target_profile])},
        "split": {
            "train": sorted(k for k, v in split.items() if v == "train"),
            "test": sorted(k for k, v in split.items() if v == "test"),
        },
        "blobs": blobs,
        "records": records,
    }
    try:
        (out / "manifest.json").write_bytes(_canonical_json(manifest))
    except OSError as exc:
        raise DatasetError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

@dataclass
class ArraySplit:
    """Stacked arrays for one (split, domain) selection."""

    images: np.ndarray
    voxels: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray
    azimuths: np.ndarray
    domain: str

    def __len__(self) -> int:
        return len(self.labels)


class Dataset:
    """Read-only view of a dataset directory; blobs are CRC-checked on first load."""

    def __init__(self, path):
        self.path = Path(path)
        mpath = self.path / "manifest.json"
        try:
            self.manifest = json.loads(mpath.read_bytes())
        except FileNotFoundError as exc:
            raise DatasetError(f"no manifest.json in {self.path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"unreadable manifest {mpath}: {exc}") from exc
        if self.manifest.get("format") != FORMAT_VERSION:
            raise FormatVersionError(
                f"unsupported dataset format {self.manifest.get('format')!r} (expected {FORMAT_VERSION})")
        self._blobs: Dict[str, bytes] = {}
        self._blob_meta = {b["path"]: b for b in self.manifest["blobs"]}

    @property
    def records(self) -> List[dict]:
        return self.manifest["records"]

    @property
    def num_classes(self) -> int:
        return self.manifest["num_classes"]

    @property
    def class_names(self) -> List[str]:
        return self.manifest["class_names"]

    def __len__(self) -> int:
        return len(self.records)

    def _blob(self, rel: str) -> bytes:
        if rel not in self._blobs:
            meta = self._blob_meta[rel]
            try:
                data = (self.path / rel).read_bytes()
            except OSError as exc:
                raise DatasetError(f"cannot read blob {self.path / rel}: {exc}") from exc
            if len(data) != meta["nbytes"]:
                raise TruncatedBlobError(f"blob {rel}: {len(data)} bytes, manifest says {meta['nbytes']}")
            if zlib.crc32(data) != meta["crc32"]:
                raise ChecksumError(f"blob {rel}: CRC32 mismatch")
            self._blobs[rel] = data
        return self._blobs[rel]

    def _array(self, rel: str, offset: int, shape) -> np.ndarray:
        data = self._blob(rel)
        n = 4 * int(np.prod(shape))
        if offset + n > len(data):
            raise TruncatedBlobError(f"record at {rel}+{offset} runs past end of blob")
        return np.frombuffer(data, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)

    def sample(self, index: int) -> Sample:
        r = self.records[index]
        return Sample(
            image=self._array(r["blob"], r["image_offset"], self.manifest["image_shape"]),
            gt_voxel=self._array(r["blob"], r["voxel_offset"], self.manifest["voxel_shape"]),
            class_label=r["class_label"],
            domain_tag=r["domain"],
            instance_id=r["instance_id"],
            azimuth_deg=r["azimuth_deg"],
            split=r["split"],
        )

    def indices(self, split: Optional[str] = None, domain: Optional[str] = None) -> List[int]:
        return [i for i, r in enumerate(self.records)
                if (split is None or r["split"] == split) and (domain is None or r["domain"] == domain)]

    def samples(self, split: Optional[str] = None, domain: Optional[str] = None) -> Iterator[Sample]:
        for i in self.indices(split, domain):
            yield self.sample(i)

    def arrays(self, split: Optional[str] = None, domain: str = "source") -> ArraySplit:
        idx = self.indices(split, domain)
        if not idx:
            raise DatasetError(f"no records for split={split!r} domain={domain!r}")
        samples = [self.sample(i) for i in idx]
        return ArraySplit(
            images=np.stack([s.image for s in samples]),
            voxels=np.stack([s.gt_voxel for s in samples]),
            labels=np.array([s.class_label for s in samples], dtype=np.int64),
            instance_ids=np.array([s.instance_id for s in samples], dtype=np.int64),
            azimuths=np.array([s.azimuth_deg for s in samples], dtype=np.int64),
            domain=domain,
        )


def read_dataset(path) -> Dataset:
    return Dataset(path)


class MixedBatchLoader:
    """Yields (source_indices, target_indices) pairs, half a batch each.

    Each epoch reshuffles both pools with an rng derived from ``(seed, epoch)``;
    the number of steps is set by the smaller pool.
    """

    def __init__(self, n_source: int, n_target: int, batch_size: int, seed: int = 0):
        if batch_size % 2 or batch_size < 4:
            raise ValueError(f"batch_size must be even and >= 4, got {batch_size}")
        self.n_source, self.n_target = n_source, n_target
        self.half = batch_size // 2
        self.seed = seed

    def steps_per_epoch(self) -> int:
        return max(1, min(self.n_source, self.n_target) // self.half)

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch])
        src = rng.permutation(self.n_source)
        tgt = rng.permutation(self.n_target)
        h = self.half
        for s in range(self.steps_per_epoch()):
            yield np.sort(src[s * h:(s + 1) * h]), np.sort(tgt[s * h:(s + 1) * h])
