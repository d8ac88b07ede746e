"""Synthetic chest-CT phantoms, dataset manifests and in-memory datasets."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .isdt import atomic_write, read_isdt, write_isdt
from .preprocess import synth_rgb
from .rng import Xoshiro256, stream

MANIFEST_NAME = "manifest.isdm"
AIR_HU = -1000.0
HU_MIN, HU_MAX = -1024.0, 400.0


@dataclass
class PhantomSpec:
    size: int = 32
    count: int = 64
    dims: int = 2
    lesion_hu: tuple[float, float] = (-50.0, 100.0)
    lung_hu: tuple[float, float] = (-850.0, -600.0)
    body_hu: tuple[float, float] = (0.0, 60.0)
    # semi-axes as fractions of the image extent
    lung_axis_rows: tuple[float, float] = (0.20, 0.28)
    lung_axis_cols: tuple[float, float] = (0.11, 0.15)
    lesion_radius: tuple[float, float] = (0.10, 0.18)
    max_lesions: int = 3
    allow_empty: bool = False
    noise_hu: float = 8.0
    task: str = "seg"
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.size < 8 or self.count < 1:
            raise ValueError("phantom size must be >= 8 and count >= 1")
        if self.task not in ("seg", "cls"):
            raise ValueError(f"task must be seg or cls, got {self.task!r}")


@dataclass
class Phantom:
    hu: np.ndarray
    lesion_mask: np.ndarray
    body_mask: np.ndarray
    lesion_count: int


def _ellipsoid(shape, center, semi_axes) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r <= 1.0


def make_phantom(spec: PhantomSpec, rng: Xoshiro256) -> Phantom:
    n = spec.size
    shape = (n,) * spec.dims
    mid = (n - 1) / 2
    hu = np.full(shape, AIR_HU)

    body_center = [mid + rng.uniform(-0.03, 0.03) * n for _ in shape]
    body_axes = [rng.uniform(0.40, 0.46) * n for _ in shape]
    body = _ellipsoid(shape, body_center, body_axes)
    hu[body] = rng.uniform(*spec.body_hu)

    lungs = np.zeros(shape, dtype=bool)
    n_lungs = 1 + rng.randbelow(2)
    sides = [-1, 1] if n_lungs == 2 else [0]
    for side in sides:
        axes = [rng.uniform(*spec.lung_axis_rows) * n, rng.uniform(*spec.lung_axis_cols) * n]
        if n_lungs == 1:
            axes[1] *= 1.8
        center = [mid + rng.uniform(-0.03, 0.03) * n, mid + side * rng.uniform(0.18, 0.22) * n]
        if spec.dims == 3:
            axes.append(rng.uniform(0.25, 0.35) * n)
            center.append(mid)
        lung = _ellipsoid(shape, center, axes) & body
        hu[lung] = rng.uniform(*spec.lung_hu)
        lungs |= lung

    lo = 0 if spec.allow_empty else 1
    count = lo + rng.randbelow(spec.max_lesions - lo + 1)
    lesions = np.zeros(shape, dtype=bool)
    lung_idx = np.argwhere(lungs)
    for _ in range(count):
        c = lung_idx[rng.randbelow(len(lung_idx))]
        radius = rng.uniform(*spec.lesion_radius) * n
        blob = _ellipsoid(shape, c, [radius] * spec.dims) & body
        hu[blob] = rng.uniform(*spec.lesion_hu)
        lesions |= blob

    if spec.noise_hu > 0:
        hu = hu + rng.numpy().normal(0.0, spec.noise_hu, size=shape)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    return Phantom(hu.astype(np.float32), lesions, body, count)


def split_indices(n: int, seed: int) -> list[str]:
    """4:1 train/test assignment from a seeded shuffle; first floor(4n/5) go to train."""
    order = stream(seed, "split").permutation(n)
    n_train = n * 4 // 5
    splits = ["test"] * n
    for i in order[:n_train]:
        splits[i] = "train"
    return splits


@dataclass
class ManifestRecord:
    path: str
    target: str
    split: str


@dataclass
class Manifest:
    task: str
    records: list[ManifestRecord] = field(default_factory=list)

    def dumps(self) -> str:
        lines = [f"#isdm v1 task={self.task}"]
        lines += [f"{r.path}\t{r.target}\t{r.split}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<manifest>") -> "Manifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#isdm v1 task="):
            raise FormatError(f"{source}: missing '#isdm v1 task=<seg|cls>' header")
        task = lines[0].split("task=", 1)[1].strip()
        if task not in ("seg", "cls"):
            raise FormatError(f"{source}: unknown task {task!r}")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{source}:{lineno}: expected 3 tab-separated fields")
            if parts[2] not in ("train", "test"):
                raise FormatError(f"{source}:{lineno}: split must be train or test, got {parts[2]!r}")
            records.append(ManifestRecord(*parts))
        return cls(task, records)


def write_manifest(path, manifest: Manifest) -> None:
    atomic_write(path, manifest.dumps().encode())


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    manifest = Manifest.loads(text, str(path))
    root = path.parent
    for r in manifest.records:
        if not (root / r.path).is_file():
            raise FormatError(f"{path}: referenced file {r.path} does not exist")
        if manifest.task == "seg" and not (root / r.target).is_file():
            raise FormatError(f"{path}: referenced mask {r.target} does not exist")
        if manifest.task == "cls" and r.target not in ("0", "1"):
            raise FormatError(f"{path}: classification label must be 0 or 1, got {r.target!r}")
    return manifest


def gen_phantoms(spec: PhantomSpec, out_dir) -> Manifest:
    """Write HU volumes, lesion masks and a manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if spec.task == "seg":
        (out / "masks").mkdir(exist_ok=True)
    splits = split_indices(spec.count, spec.seed)
    manifest = Manifest(spec.task)
    for i in range(spec.count):
        ph = make_phantom(spec, stream(spec.seed, "phantom", i))
        img_rel = f"images/p{i:04d}.isdt"
        write_isdt(out / img_rel, ph.hu)
        if spec.task == "seg":
            target = f"masks/p{i:04d}_mask.isdt"
            write_isdt(out / target, ph.lesion_mask.astype(np.float32))
        else:
            target = "1" if ph.lesion_count > 0 else "0"
        manifest.records.append(ManifestRecord(img_rel, target, splits[i]))
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest


@dataclass
class Dataset:
    """Preprocessed 2-D samples: images are ``N×3×S×S`` in [0, 1]."""

    task: str
    ids: list[str]
    images: np.ndarray
    targets: np.ndarray
    splits: list[str]

    def subset(self, split: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset(self.task, [self.ids[i] for i in idx], self.images[idx],
                       self.targets[idx], [split] * len(idx))

    def __len__(self) -> int:
        return len(self.ids)


def load_dataset(data_dir, dtype=np.float32) -> Dataset:
    root = Path(data_dir)
    manifest = read_manifest(root / MANIFEST_NAME)
    ids, images, targets, splits = [], [], [], []
    for r in manifest.records:
        hu = read_isdt(root / r.path)
        if hu.ndim != 2:
            raise FormatError(f"{r.path}: training needs 2-D slices, got shape {hu.shape}")
        images.append(synth_rgb(hu) / 255.0)
        if manifest.task == "seg":
            m = read_isdt(root / r.target)
            if m.shape != hu.shape:
                raise FormatError(f"{r.target}: mask shape {m.shape} != image shape {hu.shape}")
            targets.append((m > 0.5)[None])
        else:
            targets.append(float(r.target))
        ids.append(os.path.splitext(os.path.basename(r.path))[0])
        splits.append(r.split)
    if not images:
        raise FormatError(f"{root}: manifest lists no samples")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"{root}: images have differing shapes {sorted(shapes)}")
    return Dataset(
        task=manifest.task,
        ids=ids,
        images=np.stack(images).astype(dtype),
        targets=np.asarray(targets, dtype=dtype),
        splits=splits,
    )

