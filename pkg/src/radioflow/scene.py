"""Synthetic urban scenes, a log-distance ground-truth pathloss oracle, and
dataset storage.

Scenes are axis-aligned rectangular buildings on a square grid with one
transmitter on a free cell and optional single-cell vehicles. The oracle
adds a fixed attenuation for every occupied cell a straight ray from the
transmitter crosses, which makes every value exactly checkable.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

logger = logging.getLogger(__name__)

Mode = Literal["srm", "drm"]

SAMPLE_MAGIC = b"RFLW"
SAMPLE_VERSION = 1


class SceneError(RuntimeError):
    """Scene generation failed (e.g. no free cell for the transmitter)."""


class DatasetError(RuntimeError):
    """Reading or writing a dataset failed."""


@dataclass(frozen=True)
class SceneGenParams:
    size: int = 32
    n_buildings: int = 6
    building_min: int = 4
    building_max: int = 8
    vehicles_min: int = 0
    vehicles_max: int = 0
    resolution_m: float = 1.0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"grid size must be >= 16, got {self.size}")
        if not 1 <= self.building_min <= self.building_max <= self.size:
            raise ValueError("building size range must satisfy 1 <= min <= max <= size")
        if self.n_buildings < 0 or not 0 <= self.vehicles_min <= self.vehicles_max:
            raise ValueError("counts must be non-negative with min <= max")


@dataclass(frozen=True)
class PathlossParams:
    pl0_db: float = 40.0
    exponent: float = 2.5
    wall_loss_db: float = 12.0
    vehicle_loss_db: float = 4.0
    clamp_lo_db: float = 40.0
    clamp_hi_db: float = 140.0


@dataclass
class RadioScene:
    buildings: np.ndarray  # (H, W) uint8, 1 = structure
    tx: tuple[int, int]
    vehicles: np.ndarray | None = None
    resolution_m: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.buildings.shape

    @property
    def tx_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=np.uint8)
        m[self.tx] = 1
        return m

    def condition(self, mode: Mode) -> np.ndarray:
        """Stacked condition channels: buildings, tx mask (+ vehicles for DRM)."""
        chans = [self.buildings, self.tx_mask]
        if mode == "drm":
            chans.append(self.vehicles if self.vehicles is not None else np.zeros(self.shape, np.uint8))
        return np.stack(chans).astype(np.float64)

    def validate(self) -> None:
        r, c = self.tx
        if self.tx_mask.sum() != 1 or self.buildings[r, c]:
            raise SceneError("transmitter must sit on exactly one free cell")
        if self.vehicles is not None:
            if self.vehicles[r, c]:
                raise SceneError("transmitter cell holds a vehicle")
            if np.any(self.vehicles.astype(bool) & self.buildings.astype(bool)):
                raise SceneError("vehicle placed inside a building")


def generate_scene(params: SceneGenParams, rng_seed: int, with_vehicles: bool = True) -> RadioScene:
    """Deterministic scene for ``(params, rng_seed)``.

    Buildings and transmitter come from the first child stream and vehicles
    from the second, so SRM and DRM scenes built from the same seed share
    their building layout and transmitter.
    """
    layout_rng, vehicle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(rng_seed).spawn(2))
    n = params.size
    buildings = np.zeros((n, n), dtype=np.uint8)
    for _ in range(params.n_buildings):
        h = int(layout_rng.integers(params.building_min, params.building_max + 1))
        w = int(layout_rng.integers(params.building_min, params.building_max + 1))
        r = int(layout_rng.integers(0, n - h + 1))
        c = int(layout_rng.integers(0, n - w + 1))
        buildings[r : r + h, c : c + w] = 1

    free = np.flatnonzero(buildings.ravel() == 0)
    if free.size == 0:
        raise SceneError("no free cell available for the transmitter")
    tx_flat = int(free[layout_rng.integers(free.size)])
    tx = divmod(tx_flat, n)

    vehicles = None
    if with_vehicles and params.vehicles_max > 0:
        vehicles = np.zeros((n, n), dtype=np.uint8)
        road = free[free != tx_flat]
        k = int(vehicle_rng.integers(params.vehicles_min, params.vehicles_max + 1))
        k = min(k, road.size)
        if k:
            vehicles.ravel()[vehicle_rng.choice(road, size=k, replace=False)] = 1
    scene = RadioScene(buildings, (int(tx[0]), int(tx[1])), vehicles, params.resolution_m)
    scene.validate()
    return scene


def supercover_cells(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Every cell whose closed square the segment between two cell centres touches.

    When the segment passes exactly through a grid corner, both cells
    sharing that corner with the diagonal step are included, so a diagonal
    wall cannot be slipped through.
    """
    r, c = start
    r1, c1 = end
    nr, nc = abs(r1 - r), abs(c1 - c)
    sr = 1 if r1 > r else -1
    sc = 1 if c1 > c else -1
    cells = [(r, c)]
    ir = ic = 0
    while ir < nr or ic < nc:
        # next column boundary at (ic + 1/2)/nc, next row boundary at (ir + 1/2)/nr
        lhs = (2 * ic + 1) * nr
        rhs = (2 * ir + 1) * nc
        if lhs == rhs:
            cells.append((r + sr, c))
            cells.append((r, c + sc))
            r += sr
            c += sc
            ir += 1
            ic += 1
        elif lhs < rhs:
            c += sc
            ic += 1
        else:
            r += sr
            ir += 1
        cells.append((r, c))
    return cells


def raycast_wall_crossings(
    scene: RadioScene, from_cell: tuple[int, int], to_cell: tuple[int, int]
) -> tuple[int, int]:
    """Occupied cells strictly between the endpoints: (building, vehicle) counts."""
    H, W = scene.shape
    for r, c in (from_cell, to_cell):
        if not (0 <= r < H and 0 <= c < W):
            raise ValueError(f"cell {(r, c)} outside {H}x{W} grid")
    if tuple(from_cell) == tuple(to_cell):
        return 0, 0
    cells = supercover_cells(tuple(from_cell), tuple(to_cell))[1:-1]
    b = v = 0
    for rc in cells:
        b += int(scene.buildings[rc])
        if scene.vehicles is not None:
            v += int(scene.vehicles[rc])
    return b, v


def pathloss_oracle(scene: RadioScene, params: PathlossParams = PathlossParams()) -> np.ndarray:
    """Raw pathloss in dB for every cell; building interiors get the clamp ceiling."""
    H, W = scene.shape
    tr, tc = scene.tx
    rr, cc = np.mgrid[0:H, 0:W]
    d = np.maximum(np.hypot(rr - tr, cc - tc), 1.0) * scene.resolution_m
    loss = params.pl0_db + 10.0 * params.exponent * np.log10(d)
    for r in range(H):
        for c in range(W):
            nb, nv = raycast_wall_crossings(scene, scene.tx, (r, c))
            loss[r, c] += params.wall_loss_db * nb + params.vehicle_loss_db * nv
    loss = np.clip(loss, params.clamp_lo_db, params.clamp_hi_db)
    loss[scene.buildings.astype(bool)] = params.clamp_hi_db
    return loss


def normalize_map(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map dB loss to [0, 1] signal strength; ``hi`` -> 0, ``lo`` -> 1."""
    if not lo < hi:
        raise ValueError(f"normalization needs lo < hi, got lo={lo}, hi={hi}")
    return np.clip((hi - np.asarray(raw, dtype=np.float64)) / (hi - lo), 0.0, 1.0)


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    """One split: conditions (N, C, H, W), targets (N, H, W) in [0, 1]."""

    mode: Mode
    conditions: np.ndarray
    targets: np.ndarray
    seeds: list[int] = field(default_factory=list)
    lo_db: float = 0.0
    hi_db: float = 1.0
    gen_params: dict = field(default_factory=dict)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def cond_channels(self) -> int:
        return self.conditions.shape[1]

    @property
    def hw(self) -> tuple[int, int]:
        return self.targets.shape[1:]

    def manifest(self) -> dict:
        H, W = self.hw
        return {
            "mode": self.mode,
            "H": int(H),
            "W": int(W),
            "lo_db": float(self.lo_db),
            "hi_db": float(self.hi_db),
            "seeds": [int(s) for s in self.seeds],
            "gen_params": self.gen_params,
            "split": self.split,
        }

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(
            self.mode,
            self.conditions[idx],
            self.targets[idx],
            [self.seeds[i] for i in idx] if self.seeds else [],
            self.lo_db,
            self.hi_db,
            self.gen_params,
            self.split,
        )


def build_dataset(
    params: SceneGenParams,
    n_train: int,
    n_test: int,
    mode: Mode = "srm",
    seed: int = 0,
    pathloss: PathlossParams = PathlossParams(),
) -> tuple[Dataset, Dataset]:
    """Generate disjointly seeded train/test splits normalized with train-split lo/hi."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if mode not in ("srm", "drm"):
        raise ValueError(f"unknown mode {mode!r}")
    seeds = np.random.default_rng(seed).choice(2**31 - 1, size=n_train + n_test, replace=False)
    seeds = [int(s) for s in seeds]

    def make(split_seeds):
        conds, raws = [], []
        for s in split_seeds:
            scene = generate_scene(params, s, with_vehicles=(mode == "drm"))
            conds.append(scene.condition(mode))
            raws.append(pathloss_oracle(scene, pathloss))
        return np.stack(conds), np.stack(raws)

    train_c, train_raw = make(seeds[:n_train])
    test_c, test_raw = make(seeds[n_train:])
    lo, hi = float(train_raw.min()), float(train_raw.max())
    if not lo < hi:
        lo, hi = pathloss.clamp_lo_db, pathloss.clamp_hi_db
    gen = {"scene": asdict(params), "pathloss": asdict(pathloss), "seed": seed}
    train = Dataset(mode, train_c, normalize_map(train_raw, lo, hi), seeds[:n_train], lo, hi, gen, "train")
    test = Dataset(mode, test_c, normalize_map(test_raw, lo, hi), seeds[n_train:], lo, hi, gen, "test")
    return train, test


def write_sample(path: Path, condition: np.ndarray, target: np.ndarray) -> None:
    C, H, W = condition.shape
    if target.shape != (H, W):
        raise DatasetError(f"target shape {target.shape} does not match condition {condition.shape}")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<HHHH", SAMPLE_VERSION, C, H, W))
        fh.write(np.ascontiguousarray(condition, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(target, dtype="<f8").tobytes())


def read_sample(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read sample {path}: {exc}") from exc
    if buf[:4] != SAMPLE_MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r}")
    version, C, H, W = struct.unpack_from("<HHHH", buf, 4)
    if version != SAMPLE_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    n_c, n_t = C * H * W, H * W
    if len(buf) != 12 + 8 * (n_c + n_t):
        raise DatasetError(f"{path}: truncated or oversized payload")
    cond = np.frombuffer(buf, dtype="<f8", count=n_c, offset=12).reshape(C, H, W).astype(np.float64)
    target = np.frombuffer(buf, dtype="<f8", count=n_t, offset=12 + 8 * n_c).reshape(H, W).astype(np.float64)
    return cond, target


def save_dataset(ds: Dataset, directory: Path) -> None:
    """Write ``sample_XXXXX.rflw`` files and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            write_sample(directory / f"sample_{i:05d}.rflw", ds.conditions[i], ds.targets[i])
        (directory / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2), encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {directory}: {exc}") from exc


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {mpath}: {exc}") from exc
    files = sorted(directory.glob("sample_*.rflw"))
    if not files:
        raise DatasetError(f"no sample files in {directory}")
    pairs = [read_sample(f) for f in files]
    return Dataset(
        manifest["mode"],
        np.stack([p[0] for p in pairs]),
        np.stack([p[1] for p in pairs]),
        manifest.get("seeds", []),
        manifest["lo_db"],
        manifest["hi_db"],
        manifest.get("gen_params", {}),
        manifest.get("split", directory.name),
    )


# -- RadioMapSeer ------------------------------------------------------------


def read_gray_png(path: Path) -> np.ndarray:
    """Decode an 8-bit grayscale PNG to float64 in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "P", "1"):
                im = im.convert("L")
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode PNG {path}: {exc}") from exc
    return arr / 255.0


def load_radiomapseer(
    root_dir: Path,
    maps: list[int] | None = None,
    tx_per_map: int = 80,
    mode: Mode = "srm",
    simulation: str = "DPM",
) -> Dataset:
    """Load RadioMapSeer-layout data.

    Expected layout under ``root_dir``::

        png/buildings_complete/{m}.png
        png/cars/{m}.png                   (DRM only)
        gain/{simulation}/{m}_{t}.png      (SRM)
        gain/cars{simulation}/{m}_{t}.png  (DRM)
        antenna/{m}.json                   list of [x, y] transmitter pixels

    Gain PNGs are already normalized with 1 = strongest signal, which is the
    convention used for targets here.
    """
    root = Path(root_dir)
    if maps is None:
        bdir = root / "png" / "buildings_complete"
        if not bdir.is_dir():
            raise DatasetError(f"missing directory {bdir}")
        maps = sorted(int(p.stem) for p in bdir.glob("*.png") if p.stem.isdigit())
    conds, targets, ids = [], [], []
    gain_dir = root / "gain" / (f"cars{simulation}" if mode == "drm" else simulation)
    for m in maps:
        bpath = root / "png" / "buildings_complete" / f"{m}.png"
        if not bpath.exists():
            raise DatasetError(f"missing file {bpath}")
        buildings = (read_gray_png(bpath) > 0.5).astype(np.float64)
        cars = None
        if mode == "drm":
            cpath = root / "png" / "cars" / f"{m}.png"
            if not cpath.exists():
                raise DatasetError(f"missing file {cpath}")
            cars = (read_gray_png(cpath) > 0.5).astype(np.float64)
        apath = root / "antenna" / f"{m}.json"
        try:
            coords = json.loads(apath.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read transmitter file {apath}: {exc}") from exc
        for t, (x, y) in enumerate(coords[:tx_per_map]):
            gpath = gain_dir / f"{m}_{t}.png"
            if not gpath.exists():
                raise DatasetError(f"missing file {gpath}")
            gain = read_gray_png(gpath)
            tx = np.zeros_like(buildings)
            tx[int(round(y)), int(round(x))] = 1.0
            chans = [buildings, tx] + ([cars] if cars is not None else [])
            conds.append(np.stack(chans))
            targets.append(gain)
            ids.append(m * 1000 + t)
    if not conds:
        raise DatasetError(f"no samples found under {root}")
    return Dataset(
        mode,
        np.stack(conds),
        np.stack(targets),
        ids,
        0.0,
        1.0,
        {"source": "RadioMapSeer", "root": str(root), "simulation": simulation},
        "radiomapseer",
    )
