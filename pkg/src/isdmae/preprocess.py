"""Hounsfield-unit CT to 3-channel (lung, mediastinum, edge) images."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .isdt import atomic_write


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


LUNG_WINDOW = WindowSpec(level=-500.0, width=1200.0)
MEDIASTINAL_WINDOW = WindowSpec(level=30.0, width=300.0)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class HuVolume:
    """Raw CT values in HU. ``values`` is H×W or H×W×D."""

    values: np.ndarray
    spacing_mm: tuple[float, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.values.ndim not in (2, 3):
            raise ShapeError(f"HuVolume must be 2-D or 3-D, got {self.values.shape}")
        if len(self.spacing_mm) != self.values.ndim:
            raise ShapeError("one spacing entry per axis required")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, HuVolume) else np.asarray(x, dtype=np.float64)


def apply_window(slice_hu, spec: WindowSpec) -> np.ndarray:
    """Linear window/level remap to [0, 255], clamped outside the window."""
    hu = _values(slice_hu)
    out = (hu - spec.level + 0.5 * spec.width) / spec.width * 255.0
    return np.clip(out, 0.0, 255.0)


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude with the 3×3 Sobel pair, replicate-padded borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"sobel_magnitude needs a 2-D image of at least 3×3, got {img.shape}")
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    sx = np.zeros_like(img)
    sy = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            patch = p[i : i + h, j : j + w]
            if SOBEL_X[i, j]:
                sx += SOBEL_X[i, j] * patch
            if SOBEL_Y[i, j]:
                sy += SOBEL_Y[i, j] * patch
    return np.sqrt(sx * sx + sy * sy)


def synth_rgb(slice_hu) -> np.ndarray:
    """Compose the 3×H×W float image (lung window, mediastinal window, edges) in [0, 255]."""
    hu = _values(slice_hu)
    if hu.ndim != 2:
        raise ShapeError(f"synth_rgb expects a 2-D slice, got {hu.shape}")
    lung = apply_window(hu, LUNG_WINDOW)
    medi = apply_window(hu, MEDIASTINAL_WINDOW)
    edge = np.clip(np.maximum(sobel_magnitude(lung), sobel_magnitude(medi)), 0.0, 255.0)
    return np.stack([lung, medi, edge])


def _linear_resize_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    # align-corners: endpoints map to endpoints
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 2) if n_in > 1 else np.zeros_like(lo)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    return a_lo + (np.take(a, hi, axis=axis) - a_lo) * frac


def resize_linear(values: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Separable (bi/tri)linear rescale to ``dims`` with corner alignment."""
    out = np.asarray(values, dtype=np.float64)
    for axis, n in enumerate(dims):
        out = _linear_resize_axis(out, axis, int(n))
    return out


def resample_volume(vol: HuVolume, target_spacing_mm: float = 1.0,
                    target_dims: Sequence[int] = (32, 32, 32)) -> HuVolume:
    """Interpolate to isotropic spacing, then rescale to ``target_dims``."""
    if vol.values.ndim != 3:
        raise ShapeError(f"resample_volume expects 3-D input, got {vol.dims}")
    if any(n < 2 for n in vol.dims):
        raise ShapeError(f"degenerate axis in {vol.dims}")
    iso_dims = [
        max(2, int(round((n - 1) * s / target_spacing_mm)) + 1)
        for n, s in zip(vol.dims, vol.spacing_mm)
    ]
    iso = resize_linear(vol.values, iso_dims)
    out = resize_linear(iso, target_dims)
    # physical extent is preserved, so the rescale changes the effective spacing
    spacing = tuple(
        (n_iso - 1) * target_spacing_mm / (n_out - 1) if n_out > 1 else target_spacing_mm
        for n_iso, n_out in zip(iso_dims, target_dims)
    )
    return HuVolume(out, spacing)


def slice_and_synth(vol) -> np.ndarray:
    """Per-D-slice ``synth_rgb`` stacked as ``3×H×W×D``."""
    values = _values(vol)
    if values.ndim != 3:
        raise ShapeError(f"slice_and_synth expects H×W×D, got {values.shape}")
    return np.stack([synth_rgb(values[:, :, d]) for d in range(values.shape[2])], axis=-1)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255); values are rounded and clipped to u8."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D image, got {img.shape}")
    u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    header = f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii")
    atomic_write(path, header + u8.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1 : pos + 1 + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_channel_previews(prefix, rgb: np.ndarray) -> list[str]:
    """Write each channel of a 3×H×W image as ``<prefix>_{lung,medi,edge}.pgm``."""
    paths = []
    for name, plane in zip(("lung", "medi", "edge"), rgb):
        p = f"{prefix}_{name}.pgm"
        write_pgm(p, plane)
        paths.append(p)
    return paths

