"""
Procedural "hospital" datasets: nested perturbed ellipsoids stand in for the
cardiac regions, each site draws its own shape statistics and attenuation
profile, and the "real" CT volume is a simulated scan of the attenuation map.

On disk a dataset is a directory of FSCT files plus a tab-separated manifest:

    # fsct-manifest family=siteA seed=7 resolution=32
    sample_id  volume_path  label_path  split  labeled
"""

import concurrent.futures
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import toml

import ct
import fsct
import ssm
from config import DEFAULT_FAMILIES, GRID_PHI, GRID_THETA, MAX_RESAMPLE_RETRIES, RENDER_VIEWS
from errors import ConfigError, DegenerateShapeError, FormatError
from schemas import DatasetManifest, ManifestEntry, PhantomFamily
from utils import log, make_rng, name_key, progress

MANIFEST_NAME = "manifest.tsv"
_COLUMNS = ("sample_id", "volume_path", "label_path", "split", "labeled")
BODY_FRACTION = 0.92    # background tissue fills this fraction of the half-width

# =============================================================================
# Families
# =============================================================================


def load_family(name_or_path: str) -> PhantomFamily:
    """A built-in family (siteA/siteB/siteC) or a TOML file describing one."""
    if name_or_path in DEFAULT_FAMILIES:
        return PhantomFamily.model_validate(DEFAULT_FAMILIES[name_or_path])
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"Unknown phantom family '{name_or_path}'", key_path="family")
    try:
        return PhantomFamily.model_validate(toml.loads(path.read_text(encoding="utf-8")))
    except ValueError as exc:
        raise ConfigError(str(exc), key_path="family") from exc


# =============================================================================
# Geometry Draws
# =============================================================================


def _smooth_bumps(rng: np.random.Generator, sigma: float, grid: Tuple[int, int]) -> np.ndarray:
    """1 + sigma * (random combination of first and second order direction harmonics)."""
    dirs = ssm.direction_grid(*grid)
    z, y, x = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = np.stack([z, y, x, z * y, z * x, y * x, z * z - 1 / 3, y * y - 1 / 3, x * x - 1 / 3], axis=1)
    coeffs = rng.normal(size=basis.shape[1]) / 3.0
    return 1.0 + sigma * (basis @ coeffs)


def draw_shape(family: PhantomFamily, rng: np.random.Generator, resolution: int,
               grid: Tuple[int, int] = (GRID_THETA, GRID_PHI), spacing: float = 1.0) -> np.ndarray:
    """
    One multi-region point set (flat 3V). Regions share a sample-level center;
    each region adds its own axis jitter and smooth surface bumps. Overlaps
    left by the jitter resolve by region priority at voxelization.
    """
    half = 0.5 * resolution * spacing
    center = family.center_sigma * half * rng.normal(size=3)
    parts = []
    for r in range(family.n_regions):
        base = np.asarray(family.semi_axes[r]) * half
        axes = base * (1.0 + family.axis_sigma * rng.normal(size=3))
        bumps = _smooth_bumps(rng, family.bump_sigma, grid) if family.bump_sigma > 0 else None
        parts.append(ssm.ellipsoid_points(axes, center, grid, bumps))
    return np.concatenate(parts).reshape(-1)


def check_shape(points: np.ndarray, labels: np.ndarray, n_regions: int, resolution: int,
                spacing: float = 1.0) -> None:
    """Raise DegenerateShapeError when a region vanishes or the body leaves the field of view."""
    pts = points.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DegenerateShapeError("non-finite vertex")
    if np.max(np.abs(pts)) > BODY_FRACTION * 0.5 * resolution * spacing:
        raise DegenerateShapeError("shape extends past the body outline")
    empty = [r + 1 for r, f in enumerate(region_fractions(labels, n_regions)) if f == 0]
    if empty:
        raise DegenerateShapeError(f"regions {empty} have no voxels")


def attenuation_map(family: PhantomFamily, labels: np.ndarray, rng: np.random.Generator,
                    spacing: float = 1.0) -> np.ndarray:
    """Per-region attenuation (site offset + per-sample jitter) over a background body disk."""
    res = labels.shape[0]
    mu_region = np.asarray(family.mu_mean) + family.mu_offset + family.mu_sigma * rng.normal(size=family.n_regions)
    table = np.concatenate([[family.background_mu], np.maximum(mu_region, 0.0)])
    mu = table[labels]
    z, y, x = np.meshgrid(*ssm.voxel_centers(labels.shape, spacing), indexing="ij")
    outside = np.sqrt(z * z + y * y + x * x) > BODY_FRACTION * 0.5 * res * spacing
    mu[outside & (labels == 0)] = 0.0
    return mu


@dataclass
class PhantomSample:
    sample_id: str
    points: np.ndarray
    labels: np.ndarray
    mu: np.ndarray
    volume: np.ndarray


def generate_sample(family: PhantomFamily, index: int, resolution: int, seed: int,
                    geom=None, grid: Tuple[int, int] = (GRID_THETA, GRID_PHI)) -> PhantomSample:
    """Draw, validate (resampling up to MAX_RESAMPLE_RETRIES times) and scan one phantom."""
    geom = geom or ct.cone_geometry(resolution, RENDER_VIEWS)
    regions = ssm.region_labels(family.n_regions, grid)
    extents = (resolution,) * 3
    family_key = name_key(family.name)
    for attempt in range(MAX_RESAMPLE_RETRIES + 1):
        rng = make_rng(seed, family_key, index, attempt)
        points = draw_shape(family, rng, resolution, grid, geom.spacing)
        try:
            labels = ssm.voxelize(points, regions, extents, geom.spacing, grid)
            check_shape(points, labels, family.n_regions, resolution, geom.spacing)
        except DegenerateShapeError as exc:
            log("Phantoms", f"{family.name}#{index}: resampling after degenerate draw ({exc})", "WARNING")
            continue
        mu = attenuation_map(family, labels, rng, geom.spacing)
        volume = ct.simulate_scan(mu, geom, family.noise_photons, rng)
        return PhantomSample(f"{family.name}-{index:04d}", points, labels, mu, volume)
    raise DegenerateShapeError(
        f"{family.name}#{index}: no valid draw after {MAX_RESAMPLE_RETRIES} resamples")


# =============================================================================
# Dataset Files
# =============================================================================


def write_sample(out_dir: Path, sample: PhantomSample, grid: Tuple[int, int]) -> ManifestEntry:
    volume_path = f"{sample.sample_id}.vol.fsct"
    label_path = f"{sample.sample_id}.lab.fsct"
    fsct.save(out_dir / volume_path, {"volume": sample.volume, "mu": sample.mu})
    fsct.save(out_dir / label_path, {
        "labels": sample.labels.astype(np.float64),
        "points": sample.points,
        "grid": np.array(grid, dtype=np.float64),
    })
    return ManifestEntry(sample_id=sample.sample_id, volume_path=volume_path, label_path=label_path)


def generate_family(family: PhantomFamily, n: int, resolution: int, seed: int, out_dir,
                    views: int = RENDER_VIEWS, grid: Tuple[int, int] = (GRID_THETA, GRID_PHI),
                    threads: int = 1) -> DatasetManifest:
    """n samples written to out_dir with a manifest; bitwise reproducible for a seed."""
    if n < 1:
        raise ConfigError("Need at least one sample", key_path="n")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = ct.cone_geometry(resolution, views)
    ct.system_matrix(geom)

    def one(i: int) -> ManifestEntry:
        return write_sample(out_dir, generate_sample(family, i, resolution, seed, geom, grid), grid)

    log("Phantoms", f"Generating {n} samples of family '{family.name}' at {resolution}^3")
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            entries = list(progress(executor.map(one, range(n)), desc=family.name, total=n))
    else:
        entries = [one(i) for i in progress(range(n), desc=family.name, total=n)]
    manifest = DatasetManifest(family=family.name, seed=seed, resolution=resolution,
                               entries=entries, root=str(out_dir))
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    log("Phantoms", f"Wrote {n} samples to {out_dir}", "SUCCESS")
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    lines = [f"# fsct-manifest family={manifest.family} seed={manifest.seed} resolution={manifest.resolution}",
             "\t".join(_COLUMNS)]
    for e in manifest.entries:
        lines.append("\t".join([e.sample_id, e.volume_path, e.label_path or "-", e.split,
                                "1" if e.labeled else "0"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    """Read a manifest file (or the manifest inside a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"Manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# fsct-manifest"):
        raise FormatError(f"{path}: missing manifest header")
    try:
        header = dict(item.split("=", 1) for item in lines[0].split()[2:])
        meta = {"family": header["family"], "seed": int(header["seed"]),
                "resolution": int(header["resolution"])}
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad manifest header '{lines[0]}'") from exc
    if tuple(lines[1].split("\t")) != _COLUMNS:
        raise FormatError(f"{path}: unexpected columns '{lines[1]}'")
    entries = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(_COLUMNS)} columns, got {len(cols)}")
        try:
            entries.append(ManifestEntry(sample_id=cols[0], volume_path=cols[1],
                                         label_path=None if cols[2] == "-" else cols[2],
                                         split=cols[3], labeled=cols[4] == "1"))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    try:
        return DatasetManifest(entries=entries, root=str(path.parent), **meta)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# =============================================================================
# Splitting
# =============================================================================


def split(manifest: DatasetManifest, sizes: Sequence[int], label_size: int, seed: int) -> DatasetManifest:
    """
    Shuffled train/val/test assignment. The first ``label_size`` train samples
    keep their labels; val and test are always labeled; leftovers are unassigned.
    """
    n_train, n_val, n_test = sizes
    n = len(manifest.entries)
    if min(sizes) < 0 or n_train + n_val + n_test > n:
        raise ConfigError(f"Split sizes {tuple(sizes)} do not fit {n} samples", key_path="split")
    if not 0 <= label_size <= n_train:
        raise ConfigError(f"Label subset {label_size} exceeds the train split ({n_train})", key_path="label_size")
    missing = [e.sample_id for e in manifest.entries if not e.label_path]
    if missing:
        raise ConfigError(f"Samples without label files cannot be split: {missing[:3]}")

    order = make_rng(seed, name_key("split")).permutation(n)
    entries = list(manifest.entries)
    out: List[Optional[ManifestEntry]] = [None] * n
    for rank, idx in enumerate(order):
        e = entries[idx]
        if rank < n_train:
            split_name, labeled = "train", rank < label_size
        elif rank < n_train + n_val:
            split_name, labeled = "val", True
        elif rank < n_train + n_val + n_test:
            split_name, labeled = "test", True
        else:
            split_name, labeled = "unassigned", False
        out[idx] = e.model_copy(update={"split": split_name, "labeled": labeled})
    return manifest.model_copy(update={"entries": out})


# =============================================================================
# Loading
# =============================================================================


@dataclass
class Sample:
    sample_id: str
    volume: np.ndarray
    labels: Optional[np.ndarray]
    labeled: bool


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> Sample:
    """Volume always; labels only for labeled entries."""
    volume = fsct.load(manifest.resolve(entry.volume_path))["volume"]
    labels = None
    if entry.labeled:
        labels = np.rint(fsct.load(manifest.resolve(entry.label_path))["labels"]).astype(np.int64)
    return Sample(entry.sample_id, volume, labels, entry.labeled)


def load_shapes(manifest: DatasetManifest, entries: Optional[Sequence[ManifestEntry]] = None):
    """Point sets of the given entries (default: labeled train) as (shapes, grid)."""
    if entries is None:
        entries = [e for e in manifest.entries if e.split == "train" and e.labeled] or \
                  [e for e in manifest.entries if e.labeled]
    shapes, grid = [], None
    for e in entries:
        arrays = fsct.load(manifest.resolve(e.label_path))
        shapes.append(arrays["points"])
        grid = tuple(int(g) for g in arrays["grid"])
    if not shapes:
        raise DegenerateShapeError("No labeled shapes to build a shape model from")
    return np.stack(shapes), grid


def load_shape_dir(directory) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Every *.lab.fsct point set in a directory, sorted by file name."""
    files = sorted(Path(directory).glob("*.lab.fsct"))
    if not files:
        raise DegenerateShapeError(f"No shape files (*.lab.fsct) in {directory}")
    shapes, grids = [], set()
    for f in files:
        arrays = fsct.load(f)
        shapes.append(arrays["points"])
        grids.add(tuple(int(g) for g in arrays["grid"]))
    if len(grids) != 1 or len({s.size for s in shapes}) != 1:
        raise DegenerateShapeError(f"Shape files in {directory} do not share one vertex grid")
    return np.stack(shapes), grids.pop()


class DatasetView:
    """Labeled/unlabeled accessors over one site's dataset; samples are loaded once."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: Dict[str, Sample] = {}

    def _get(self, entry: ManifestEntry) -> Sample:
        if entry.sample_id not in self._cache:
            self._cache[entry.sample_id] = load_sample(self.manifest, entry)
        return self._cache[entry.sample_id]

    def entries(self, split_name: str = "train") -> List[ManifestEntry]:
        return self.manifest.by_split(split_name)

    def labeled(self) -> List[Sample]:
        return [self._get(e) for e in self.entries() if e.labeled]

    def unlabeled(self) -> List[Sample]:
        return [self._get(e) for e in self.entries() if not e.labeled]

    def split_samples(self, split_name: str) -> List[Sample]:
        return [self._get(e) for e in self.entries(split_name)]

    @property
    def resolution(self) -> int:
        return self.manifest.resolution


def region_fractions(labels: np.ndarray, n_regions: int) -> np.ndarray:
    """Voxel fraction of every region id 1..R."""
    counts = np.bincount(labels.reshape(-1), minlength=n_regions + 1)[1:n_regions + 1]
    return counts / labels.size

