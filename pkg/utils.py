import csv
import hashlib
import json
import platform
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pydantic
import scipy
from PIL import Image
from rich.console import Console
from tqdm import tqdm

from config import PROJECT_NAME, PROJECT_VERSION, QUIET

# =============================================================================
# Console Logging
# =============================================================================

_console = Console(highlight=False, soft_wrap=True)
_stderr = Console(stderr=True, highlight=False, soft_wrap=True)
_STYLES = {"INFO": "cyan", "SUCCESS": "green", "WARNING": "yellow", "ERROR": "bold red"}
_quiet = QUIET


def set_quiet(value: bool) -> None:
    global _quiet
    _quiet = bool(value)


def is_quiet() -> bool:
    return _quiet


def log(component: str, message: str, level: str = "INFO") -> None:
    """Print a tagged line: [LEVEL] [Component] message. INFO is muted in quiet mode."""
    if _quiet and level == "INFO":
        return
    target = _stderr if level == "ERROR" else _console
    target.print(f"[{level}] [{component}] {message}", style=_STYLES.get(level), markup=False)


def progress(iterable: Iterable, desc: str, total: Optional[int] = None):
    return tqdm(iterable, desc=desc, total=total, disable=_quiet, leave=False)


# =============================================================================
# Randomness
# =============================================================================


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys): sample i of a run never depends on sample j."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def name_key(name: str) -> int:
    """Stable integer key for a string (site ids, family names)."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


# =============================================================================
# Run Artifacts
# =============================================================================


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_run_info(out_dir, command: str, config_text: str, seed: int,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """run-info.json: everything needed to repeat the run exactly."""
    info = {
        "command": command,
        "project": PROJECT_NAME,
        "version": PROJECT_VERSION,
        "seed": seed,
        "config_hash": config_hash(config_text),
        "config": config_text,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.__version__,
        },
    }
    if extra:
        info.update(extra)
    path = Path(out_dir) / "run-info.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_pgm(path, image: np.ndarray, vmin: Optional[float] = None, vmax: Optional[float] = None) -> Path:
    """8-bit grayscale preview of a 2D slice (window defaults to the slice range)."""
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if vmin is None else vmin
    hi = float(image.max()) if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.clip((image - lo) * scale, 0, 255).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")
    return path


@contextmanager
def staged_output(out_dir):
    """
    Build outputs in a sibling staging directory and move them into place only
    on success; on failure the staging directory is removed.
    """
    out_dir = Path(out_dir)
    staging = out_dir.with_name(out_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    staging.rename(out_dir)


# =============================================================================
# Metrics CSV
# =============================================================================


class MetricsWriter:
    """Append rows to a CSV file; the header is fixed by the first row."""

    def __init__(self, path, fields: Sequence[str]):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as handle:
            csv.DictWriter(handle, fieldnames=self.fields).writeheader()

    def write(self, row: Dict[str, Any]) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as handle:
            csv.DictWriter(handle, fieldnames=self.fields, extrasaction="ignore").writerow(
                {k: _fmt(row.get(k, "")) for k in self.fields})


def _fmt(value: Any) -> Any:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def read_metrics(path) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
