"""Phantoms, image-folder ingestion, k-space noise and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_SENTINEL = 99.99
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".pgm"}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: list[np.ndarray]
    source: str = "phantom"
    seed: int = 0
    names: list[str] | None = None

    def __post_init__(self):
        if not self.images:
            raise DataError("dataset is empty")
        shape = self.images[0].shape
        for i, im in enumerate(self.images):
            if im.shape != shape:
                raise DataError(f"image {i} has shape {im.shape}, expected {shape}")
            if not np.all(np.isfinite(im)) or im.min() < 0 or im.max() > 1:
                raise DataError(f"image {i} has values outside [0, 1]")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def __iter__(self):
        return iter(self.images)

    @property
    def shape(self):
        return self.images[0].shape

    def split(self, fraction=0.1):
        """Hold out the last ``fraction`` of images (at least one, if possible)."""
        n_val = max(1, int(round(fraction * len(self)))) if len(self) > 1 else 0
        cut = len(self) - n_val
        train = Dataset(self.images[:cut], self.source, self.seed)
        val = Dataset(self.images[cut:], self.source, self.seed) if n_val else None
        return train, val


# ---------------------------------------------------------------------------
# phantoms

# modified Shepp-Logan (Toft): intensity, semi-axes a, b, centre x0, y0, angle in degrees
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0),
]


def _grid(m, n):
    y = (np.arange(m) + 0.5) / m * 2 - 1
    x = (np.arange(n) + 0.5) / n * 2 - 1
    return np.meshgrid(x, -y)


def _ellipse(X, Y, a, b, x0, y0, deg):
    th = np.deg2rad(deg)
    xr = (X - x0) * np.cos(th) + (Y - y0) * np.sin(th)
    yr = -(X - x0) * np.sin(th) + (Y - y0) * np.cos(th)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def shepp_logan(m: int, n: int | None = None) -> np.ndarray:
    n = m if n is None else n
    X, Y = _grid(m, n)
    img = np.zeros((m, n))
    for val, a, b, x0, y0, deg in _SHEPP_LOGAN:
        img[_ellipse(X, Y, a, b, x0, y0, deg)] += val
    return np.clip(img, 0.0, 1.0)


def random_phantom(m: int, n: int, rng: np.random.Generator, n_ellipses: int | None = None) -> np.ndarray:
    """Piecewise-smooth image: random ellipses each carrying a linear intensity ramp."""
    X, Y = _grid(m, n)
    img = np.zeros((m, n))
    # body outline, then interior structures
    a, b = rng.uniform(0.6, 0.9, size=2)
    img[_ellipse(X, Y, a, b, 0, 0, rng.uniform(-30, 30))] = rng.uniform(0.5, 0.9)
    count = int(rng.integers(3, 8)) if n_ellipses is None else n_ellipses
    for _ in range(count):
        ax, bx = rng.uniform(0.05, 0.4, size=2)
        x0, y0 = rng.uniform(-0.5, 0.5, size=2)
        inside = _ellipse(X, Y, ax, bx, x0, y0, rng.uniform(0, 180))
        base = rng.uniform(-0.4, 0.4)
        gx, gy = rng.uniform(-0.3, 0.3, size=2)
        img[inside] += base + gx * (X[inside] - x0) + gy * (Y[inside] - y0)
    return np.clip(img, 0.0, 1.0)


def make_phantoms(count: int, m: int, n: int, seed: int) -> Dataset:
    """Shepp-Logan first, then ``count - 1`` seeded random phantoms."""
    if count < 1:
        raise DataError("count must be >= 1")
    if m < 8 or n < 8 or m % 2 or n % 2:
        raise DataError(f"phantom dimensions must be even and >= 8, got {m}x{n}")
    rng = np.random.default_rng(seed)
    images = [shepp_logan(m, n)]
    images += [random_phantom(m, n, rng) for _ in range(count - 1)]
    return Dataset(images, source="phantom", seed=seed)


# ---------------------------------------------------------------------------
# files

def load_images(dir_path) -> Dataset:
    from PIL import Image

    root = Path(dir_path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {root}")
    images = []
    for p in files:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc
        if images and arr.shape != images[0].shape:
            raise DataError(f"{p.name} has shape {arr.shape}, expected {images[0].shape}")
        images.append(arr)
    return Dataset(images, source="files", seed=0, names=[p.name for p in files])


def save_image(x: np.ndarray, path) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(np.clip(x, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# noise

def add_gaussian_noise(y, std: float, seed: int, mask=None):
    """Complex Gaussian noise on the sampled entries (real and imaginary parts
    each ``std / sqrt(2)``).  Without an explicit mask, nonzero entries of ``y``
    are taken as the sampled set."""
    if std < 0:
        raise ValueError("noise std must be non-negative")
    y = np.asarray(y)
    if std == 0:
        return y.copy()
    support = (y != 0) if mask is None else np.asarray(mask, dtype=bool)
    rng = np.random.default_rng(seed)
    noise = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) * (std / np.sqrt(2))
    return np.where(support, y + noise, 0)


# ---------------------------------------------------------------------------
# metrics

def _check_pair(x, ref):
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    x, ref = _check_pair(x, ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return PSNR_SENTINEL
    # round-off level errors would otherwise report a few hundred dB
    return float(min(10 * np.log10(peak**2 / mse), PSNR_SENTINEL))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(x, ref, peak: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM, Gaussian window, statistics over valid windows only."""
    x, ref = _check_pair(x, ref)
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} SSIM window")
    w = gaussian_window(win, sigma)
    half = win // 2

    def blur(a):
        a = correlate1d(a, w, axis=0, mode="constant")
        a = correlate1d(a, w, axis=1, mode="constant")
        return a[half:-half, half:-half] if half else a

    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = blur(x), blur(ref)
    vx = blur(x * x) - mx * mx
    vy = blur(ref * ref) - my * my
    cxy = blur(x * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
