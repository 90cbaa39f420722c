"""Sampling masks and the under-sampled Fourier operator ``T = P F``.

The DFT is unitary (``norm="ortho"``) with the zero frequency at the array
centre ``(m // 2, n // 2)``.  Measurements are kept on the full ``m x n`` grid
with zeros off the mask.

Every operator accepts either numpy arrays or torch tensors; the trailing two
axes are the image axes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FAMILIES = ("cartesian", "pseudo_radial", "random2d")

GOLDEN_ANGLE_DEG = 180.0 * (3.0 - np.sqrt(5.0))  # 111.246...


class MaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SamplingMask:
    pattern: np.ndarray
    alpha: float
    family: str
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.pattern.shape)

    @property
    def count(self) -> int:
        return int(self.pattern.sum())

    @property
    def ratio(self) -> float:
        """Achieved sampling fraction (may differ slightly from ``alpha``)."""
        return self.count / self.pattern.size

    def manifest(self) -> dict:
        m, n = self.shape
        return {"family": self.family, "alpha": self.alpha, "seed": self.seed, "m": m, "n": n}


def _target_count(m: int, n: int, alpha: float) -> int:
    return max(1, int(round(alpha * m * n)))


def _cartesian(m, n, alpha, rng):
    n_rows = min(m, max(1, int(round(alpha * m))))
    centre = m // 2
    n_core = max(1, int(np.ceil(0.04 * m)))
    lo = centre - n_core // 2
    core = sorted(range(lo, lo + n_core), key=lambda r: abs(r - centre))
    rows = set(core[:n_rows])
    rest = np.array([r for r in range(m) if r not in rows])
    need = n_rows - len(rows)
    if need > 0:
        sigma = m / 6.0
        w = np.exp(-(((rest - centre) / sigma) ** 2))
        picked = rng.choice(rest, size=need, replace=False, p=w / w.sum())
        rows.update(picked.tolist())
    pattern = np.zeros((m, n), dtype=bool)
    pattern[sorted(rows), :] = True
    return pattern


def _radial_line(m, n, angle):
    cy, cx = m // 2, n // 2
    half = int(np.ceil(np.hypot(m, n) / 2)) + 1
    t = np.arange(-2 * half, 2 * half + 1) * 0.5
    rows = np.rint(cy + t * np.sin(angle)).astype(int)
    cols = np.rint(cx + t * np.cos(angle)).astype(int)
    keep = (rows >= 0) & (rows < m) & (cols >= 0) & (cols < n)
    return rows[keep], cols[keep]


def _pseudo_radial(m, n, alpha, rng):
    target = _target_count(m, n, alpha)
    pattern = np.zeros((m, n), dtype=bool)
    pattern[m // 2, n // 2] = True
    # the seed only rotates the starting spoke
    angle = rng.uniform(0.0, np.pi)
    step = np.deg2rad(GOLDEN_ANGLE_DEG)
    count = 1
    for _ in range(50 * (m + n)):
        if count >= target:
            break
        rows, cols = _radial_line(m, n, angle)
        angle += step
        flat = np.unique(rows * n + cols)
        fresh = flat[~pattern.ravel()[flat]]
        if fresh.size == 0:
            continue
        new_count = count + fresh.size
        if new_count > target and (new_count - target) > (target - count):
            break
        pattern.ravel()[fresh] = True
        count = new_count
    else:
        raise MaskError(f"pseudo-radial mask could not reach {target} samples")
    return pattern


def _random2d(m, n, alpha, rng):
    target = _target_count(m, n, alpha)
    pattern = rng.random((m, n)) < alpha
    bm, bn = max(1, int(np.ceil(0.02 * m))), max(1, int(np.ceil(0.02 * n)))
    if bm * bn > target:
        bm = bn = 1
    forced = np.zeros((m, n), dtype=bool)
    r0, c0 = m // 2 - bm // 2, n // 2 - bn // 2
    forced[r0:r0 + bm, c0:c0 + bn] = True
    pattern |= forced

    flat = pattern.ravel()
    excess = int(flat.sum()) - target
    if excess > 0:
        removable = np.flatnonzero(flat & ~forced.ravel())
        flat[rng.choice(removable, size=excess, replace=False)] = False
    elif excess < 0:
        free = np.flatnonzero(~flat)
        flat[rng.choice(free, size=-excess, replace=False)] = True
    return flat.reshape(m, n)


def make_mask(m: int, n: int, alpha: float, family: str, seed: int) -> SamplingMask:
    """Build a seeded sampling mask; the k-space centre is always sampled.

    ``cartesian`` keeps full rows (phase-encode lines) with variable density,
    ``pseudo_radial`` rasterizes golden-angle spokes, and ``random2d`` draws
    i.i.d. points corrected to exactly ``round(alpha * m * n)`` samples.
    """
    if m < 8 or n < 8 or m % 2 or n % 2:
        raise MaskError(f"mask dimensions must be even and >= 8, got {m}x{n}")
    if not 0.0 < alpha <= 1.0:
        raise MaskError(f"alpha must lie in (0, 1], got {alpha}")
    if family not in FAMILIES:
        raise MaskError(f"unknown mask family {family!r}; expected one of {FAMILIES}")
    if seed < 0:
        raise MaskError("seed must be non-negative")

    if alpha == 1.0:
        pattern = np.ones((m, n), dtype=bool)
    else:
        rng = np.random.default_rng(seed)
        builder = {"cartesian": _cartesian, "pseudo_radial": _pseudo_radial, "random2d": _random2d}[family]
        pattern = builder(m, n, alpha, rng)
    pattern.setflags(write=False)
    return SamplingMask(pattern=pattern, alpha=float(alpha), family=family, seed=int(seed))


def save_mask(mask: SamplingMask, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.png`` (0/255, 8-bit) and the ``<stem>.json`` manifest."""
    from PIL import Image

    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    png, manifest = stem.with_name(stem.name + ".png"), stem.with_name(stem.name + ".json")
    Image.fromarray(mask.pattern.astype(np.uint8) * 255, mode="L").save(png)
    manifest.write_text(json.dumps(mask.manifest(), indent=2) + "\n")
    return png, manifest


def load_mask(stem: str | Path) -> SamplingMask:
    from PIL import Image

    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    pattern = np.asarray(Image.open(stem.with_name(stem.name + ".png")).convert("L")) > 127
    if pattern.shape != (meta["m"], meta["n"]):
        raise MaskError(f"mask image shape {pattern.shape} disagrees with manifest")
    pattern.setflags(write=False)
    return SamplingMask(pattern=pattern, alpha=float(meta["alpha"]), family=meta["family"], seed=int(meta["seed"]))


# ---------------------------------------------------------------------------
# centred unitary DFT, numpy or torch

def fft2c(x):
    if isinstance(x, torch.Tensor):
        dims = (-2, -1)
        return torch.fft.fftshift(torch.fft.fft2(torch.fft.ifftshift(x, dim=dims), norm="ortho"), dim=dims)
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k):
    if isinstance(k, torch.Tensor):
        dims = (-2, -1)
        return torch.fft.fftshift(torch.fft.ifft2(torch.fft.ifftshift(k, dim=dims), norm="ortho"), dim=dims)
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


class MeasurementOp:
    """``T = P F``: centred unitary 2D DFT followed by masking."""

    def __init__(self, mask: SamplingMask):
        self.mask = mask
        self.shape = mask.shape
        self._torch_mask = torch.from_numpy(np.array(mask.pattern))

    def _check(self, a, what):
        if tuple(a.shape[-2:]) != self.shape:
            raise ValueError(f"{what} has trailing shape {tuple(a.shape[-2:])}, operator expects {self.shape}")

    def _apply_mask(self, k):
        if isinstance(k, torch.Tensor):
            return torch.where(self._torch_mask.to(k.device), k, torch.zeros((), dtype=k.dtype, device=k.device))
        return np.where(self.mask.pattern, k, 0)

    def forward(self, x):
        self._check(x, "image")
        return self._apply_mask(fft2c(x))

    def adjoint(self, y):
        self._check(y, "k-space field")
        return ifft2c(self._apply_mask(y))

    def normal(self, x):
        """``T^H T x``."""
        return self.adjoint(self.forward(x))

    __call__ = forward


def forward(op: MeasurementOp, x):
    return op.forward(x)


def adjoint(op: MeasurementOp, y):
    return op.adjoint(y)


def zero_fill(op: MeasurementOp, y):
    """Magnitude of ``T^H y``."""
    return abs(op.adjoint(y))
