"""Deep-supervised L1 loss, the multi-ratio training loop and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, psnr
from .kspace import FAMILIES, MeasurementOp, SamplingMask, make_mask
from .model import CGPDNet, ModelConfig, init_params

log = logging.getLogger(__name__)

DEFAULT_RATIOS = {
    "cartesian": [0.1, 0.2, 0.3, 0.4, 0.5],
    "pseudo_radial": [0.1, 0.2, 0.3, 0.4, 0.5],
    "random2d": [0.1, 0.2, 0.3, 0.4, 0.5],
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch: int = 1
    seed: int = 0
    ratios: list | None = None
    mask_family: str = "cartesian"
    augment: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.mask_family not in FAMILIES:
            raise ValueError(f"unknown mask family {self.mask_family!r}")
        if self.ratios is None:
            self.ratios = list(DEFAULT_RATIOS[self.mask_family])
        if len(self.ratios) == 0:
            raise ValueError("ratios must be a non-empty list")
        self.ratios = [float(r) for r in self.ratios]
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError("every ratio must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    epoch_loss: list = field(default_factory=list)
    val_psnr: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)


def loss(x_mid, x_final, target):
    """Mean absolute error of both supervised outputs, averaged over the batch:
    ``(|x_mid - t|_1 + |x_final - t|_1) / (batch * m * n)``."""
    if x_mid.shape != target.shape or x_final.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(x_mid.shape)}, {tuple(x_final.shape)} vs {tuple(target.shape)}")
    m, n = target.shape[-2:]
    per_sample = ((x_mid - target).abs() + (x_final - target).abs()).reshape(-1, m * n).sum(dim=1) / (m * n)
    return per_sample.mean()


def augment(x, rng: np.random.Generator):
    """Independent horizontal / vertical flips, each with probability 1/2."""
    flip_h, flip_v = rng.random(2) < 0.5
    if flip_h:
        x = x[..., :, ::-1]
    if flip_v:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def fixed_mask(family: str, ratio: float, shape, master_seed: int = 0) -> SamplingMask:
    """The one mask used for ``(family, ratio, shape)`` in training and evaluation."""
    m, n = shape
    seed = (master_seed * 1_000_003 + int(round(ratio * 10_000))) % (2**32)
    return make_mask(m, n, ratio, family, seed)


class MaskBank:
    """Masks and operators frozen per ``(family, ratio, shape)``."""

    def __init__(self, master_seed=0):
        self.master_seed = master_seed
        self._ops = {}

    def op(self, family, ratio, shape) -> MeasurementOp:
        key = (family, float(ratio), tuple(shape))
        if key not in self._ops:
            self._ops[key] = MeasurementOp(fixed_mask(family, ratio, shape, self.master_seed))
        return self._ops[key]

    def masks(self):
        return {k: op.mask for k, op in self._ops.items()}


@torch.no_grad()
def evaluate_psnr(model: CGPDNet, images, family, ratio, bank: MaskBank) -> float:
    scores = []
    for x in images:
        op = bank.op(family, ratio, x.shape)
        out = model(op, op.forward(x), ratio)
        scores.append(psnr(out.x_final[0, 0].cpu().numpy(), x))
    return float(np.mean(scores))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, val: Dataset | None = None, *,
          model: CGPDNet | None = None, start_epoch: int = 0, dtype=torch.float32, on_epoch=None):
    """Train with Adam on the deep-supervised L1 loss.

    Each sample gets a ratio drawn uniformly from ``train_cfg.ratios`` and the
    fixed mask for that ratio.  Returns ``(model, history)``.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    if any(d % 2 for d in dataset.shape):
        raise TrainingError(f"image dimensions must be even, got {dataset.shape}")
    if val is None:
        dataset, val = dataset.split(0.1)

    torch.manual_seed(train_cfg.seed)
    if model is None:
        model = init_params(model_cfg, train_cfg.seed, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr,
                           betas=(train_cfg.adam_beta1, train_cfg.adam_beta2), eps=train_cfg.adam_eps)
    ratio_rng = np.random.default_rng([train_cfg.seed, 1])
    aug_rng = np.random.default_rng([train_cfg.seed, 2])
    bank = MaskBank(train_cfg.mask_seed)
    history = History()
    family = train_cfg.mask_family
    ratios = train_cfg.ratios
    n = len(dataset)

    for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
        model.train()
        losses = []
        for start in range(0, n, train_cfg.batch):
            opt.zero_grad()
            idx = range(start, min(start + train_cfg.batch, n))
            total = 0.0
            for i in idx:
                x = dataset[i]
                if train_cfg.augment:
                    x = augment(x, aug_rng)
                ratio = ratios[int(ratio_rng.integers(len(ratios)))]
                op = bank.op(family, ratio, x.shape)
                out = model(op, op.forward(x), ratio)
                target = torch.as_tensor(x, dtype=model.dtype)[None, None]
                sample_loss = loss(out.x_mid, out.x_final, target)
                if not torch.isfinite(sample_loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, sample {i}")
                (sample_loss / len(idx)).backward()
                total += sample_loss.item()
            opt.step()
            losses.append(total / len(idx))
        history.epoch_loss.append(float(np.mean(losses)))
        if val is not None:
            model.eval()
            history.val_psnr.append(float(np.mean([evaluate_psnr(model, val.images, family, r, bank) for r in ratios])))
        else:
            history.val_psnr.append(float("nan"))
        log.info("epoch %d loss %.5f val psnr %.2f", epoch, history.epoch_loss[-1], history.val_psnr[-1])
        if on_epoch is not None:
            on_epoch(epoch, model, history)
    history.masks = bank.masks()
    return model, history


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"


def _tensor_file(name: str) -> str:
    return f"{name}.f32"


def save_checkpoint(model: CGPDNet, cfg: ModelConfig, path, *, epoch: int = 0, history: History | None = None,
                    train_cfg: TrainConfig | None = None) -> Path:
    """Directory with ``manifest.json`` and one little-endian float32 blob per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes(order="C")
        (path / _tensor_file(name)).write_bytes(blob)
        index.append({"name": name, "shape": list(arr.shape), "file": _tensor_file(name),
                      "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format": "cgpdnet-checkpoint/1",
        "config": cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "epoch": int(epoch),
        "history": {"epoch_loss": list(history.epoch_loss), "val_psnr": list(history.val_psnr)} if history else None,
        "tensors": index,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, allow_nan=True) + "\n")
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(model, cfg, manifest)``; every blob is size- and hash-checked."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {MANIFEST} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    cfg = ModelConfig(**manifest["config"])
    model = CGPDNet(cfg).to(dtype)
    params = dict(model.named_parameters())
    entries = {e["name"]: e for e in manifest["tensors"]}
    missing = set(params) - set(entries)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    extra = set(entries) - set(params)
    if extra:
        raise CheckpointError(f"checkpoint has tensors unknown to the configuration: {sorted(extra)}")
    with torch.no_grad():
        for name, p in params.items():
            e = entries[name]
            if list(p.shape) != e["shape"]:
                raise CheckpointError(f"{name}: manifest shape {e['shape']} vs model shape {list(p.shape)}")
            f = path / e["file"]
            if not f.exists():
                raise CheckpointError(f"missing tensor blob {f.name}")
            blob = f.read_bytes()
            expected = 4 * math.prod(e["shape"])
            if len(blob) != expected:
                raise CheckpointError(f"corrupt blob {f.name}: {len(blob)} bytes, expected {expected}")
            if hashlib.sha256(blob).hexdigest() != e["sha256"]:
                raise CheckpointError(f"corrupt blob {f.name}: checksum mismatch")
            arr = np.frombuffer(blob, dtype="<f4").reshape(e["shape"])
            p.copy_(torch.from_numpy(arr.copy()))
    return model, cfg, manifest
