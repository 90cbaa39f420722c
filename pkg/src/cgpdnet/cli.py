"""Command-line front end.

    cgpdnet mask  --family cartesian --alpha 0.1,0.3 --size 64 --seed 3 --out masks/
    cgpdnet train --config toy.json --out runs/toy
    cgpdnet recon --checkpoint runs/toy/checkpoint --alpha 0.3 --out recon/
    cgpdnet eval  --methods zerofill,fista_tv --alphas 0.1,0.3,0.5 --out table/

Exit status is 0 only when every output was written and every reported
number is finite; 1 for runtime failures; 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .classical import FistaTvConfig, SolverError, TwoGridConfig, classical_cs_twogrid, fista_tv
from .data import DataError, Dataset, add_gaussian_noise, load_images, make_phantoms, psnr, save_image, ssim
from .kspace import FAMILIES, MaskError, make_mask, save_mask, zero_fill
from .model import ConfigError, ModelConfig
from .training import (
    CheckpointError,
    MaskBank,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("cgpdnet")

METHODS = ("cgpd", "zerofill", "fista_tv", "classical_twogrid")
EVAL_COLUMNS = ("method", "family", "alpha", "m_psnr", "m_ssim")


class CliError(RuntimeError):
    """A failure reported to the user with exit status 1."""


# ---------------------------------------------------------------------------
# argument helpers

def _alpha_list(text: str) -> list[float]:
    try:
        values = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty ratio list")
    for a in values:
        if not 0 < a <= 1:
            raise argparse.ArgumentTypeError(f"sampling ratio must lie in (0, 1], got {a}")
    return values


def _alpha(text: str) -> float:
    values = _alpha_list(text)
    if len(values) != 1:
        raise argparse.ArgumentTypeError("expected a single sampling ratio")
    return values[0]


def _names(choices):
    def parse(text: str) -> list[str]:
        names = [s.strip() for s in text.split(",") if s.strip()]
        bad = [s for s in names if s not in choices]
        if bad or not names:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}; got {text!r}")
        return names
    return parse


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or MxN, got {text!r}")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or MxN, got {text!r}")
    return dims


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _alpha_tag(alpha: float) -> str:
    return f"{alpha:g}"


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)


# ---------------------------------------------------------------------------
# data sources shared by train / recon / eval

def _add_data_args(p, default_count=5, default_size=64):
    p.add_argument("--source", choices=("phantom", "files"), default="phantom")
    p.add_argument("--data", help="image directory for --source files")
    p.add_argument("--count", type=int, default=default_count, help="number of phantoms")
    p.add_argument("--size", type=_size, default=(default_size, default_size), help="phantom size, N or MxN")
    p.add_argument("--data-seed", type=int, default=0)


def _dataset(source, data, count, size, data_seed) -> Dataset:
    if source == "files":
        if not data:
            raise CliError("--source files needs --data DIR")
        return load_images(data)
    m, n = size
    return make_phantoms(count, m, n, data_seed)


# ---------------------------------------------------------------------------
# mask

def cmd_mask(args) -> int:
    m, n = args.size
    out = Path(args.out)
    for alpha in args.alpha:
        mask = make_mask(m, n, alpha, args.family, args.seed)
        png, manifest = save_mask(mask, out / f"{args.family}_{_alpha_tag(alpha)}")
        print(f"{png} {manifest} count={mask.count} ratio={mask.ratio:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "ratios")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
DATA_KEYS = ("source", "data", "val_data", "count", "size", "data_seed")
RUN_KEYS = MODEL_KEYS + TRAIN_KEYS + DATA_KEYS


@dataclasses.dataclass
class RunConfig:
    """Flat union of model, training and dataset settings."""

    model: ModelConfig
    train: TrainConfig
    source: str = "phantom"
    data: str | None = None
    val_data: str | None = None
    count: int = 20
    size: list = dataclasses.field(default_factory=lambda: [32, 32])
    data_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(RUN_KEYS))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        tcfg = TrainConfig(**{k: d[k] for k in TRAIN_KEYS if k in d})
        mcfg = ModelConfig(**{k: d[k] for k in MODEL_KEYS if k in d}, ratios=list(tcfg.ratios))
        rest = {k: d[k] for k in DATA_KEYS if k in d}
        if "size" in rest:
            size = rest["size"]
            rest["size"] = [int(size), int(size)] if isinstance(size, (int, float)) else [int(s) for s in size]
        if rest.get("source", "phantom") not in ("phantom", "files"):
            raise CliError(f"source must be 'phantom' or 'files', got {rest['source']!r}")
        return cls(model=mcfg, train=tcfg, **rest)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.model.to_dict().items() if k != "ratios"}
        d.update(self.train.to_dict())
        d.update({k: getattr(self, k) for k in DATA_KEYS})
        return d


def _train_overrides(args) -> dict:
    flags = {
        "p": args.p, "k": args.k, "n_s": args.n_s, "lr": args.lr, "epochs": args.epochs, "batch": args.batch,
        "seed": args.seed, "ratios": args.ratios, "mask_family": args.family, "augment": args.augment,
        "mask_seed": args.mask_seed, "share_correction": args.share_correction, "share_prior": args.share_prior,
        "use_correction": args.use_correction, "condition_eta": args.condition_eta,
        "condition_beta": args.condition_beta, "source": args.source, "data": args.data,
        "val_data": args.val_data, "count": args.count, "size": list(args.size) if args.size else None,
        "data_seed": args.data_seed,
    }
    return {k: v for k, v in flags.items() if v is not None}


def _write_history(path: Path, history, first_epoch: int) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_psnr"])
        for i, (l, v) in enumerate(zip(history["epoch_loss"], history["val_psnr"])):
            w.writerow([first_epoch + i + 1, repr(l), repr(v)])


def cmd_train(args) -> int:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}")
        if not isinstance(base, dict):
            raise CliError("config file must hold a JSON object")
    overrides = _train_overrides(args)

    start_epoch, prior_history, model = 0, {"epoch_loss": [], "val_psnr": []}, None
    if args.resume:
        model, ck_cfg, manifest = load_checkpoint(args.resume)
        start_epoch = int(manifest.get("epoch", 0))
        prior_history = manifest.get("history") or prior_history
        resolved = dict(manifest.get("train_config") or {})
        resolved.update({k: v for k, v in ck_cfg.to_dict().items() if k != "ratios"})
        resolved.update(manifest.get("data") or {})
        # explicit architecture settings must agree with the checkpoint
        for k in MODEL_KEYS:
            requested = overrides.get(k, base.get(k))
            if requested is not None and requested != getattr(ck_cfg, k):
                raise CliError(f"{k}={requested!r} conflicts with checkpoint value {getattr(ck_cfg, k)!r}")
        resolved.update({k: v for k, v in base.items() if k not in MODEL_KEYS})
        resolved.update({k: v for k, v in overrides.items() if k not in MODEL_KEYS})
        resolved.setdefault("ratios", ck_cfg.ratios)
    else:
        resolved = {**base, **overrides}

    run = RunConfig.from_dict(resolved)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n")

    dataset = _dataset(run.source, run.data, run.count, run.size, run.data_seed)
    val = load_images(run.val_data) if run.val_data else None
    if model is not None and list(model.cfg.ratios) != list(run.train.ratios):
        model.cfg.ratios = list(run.train.ratios)

    model, history = train(run.model, run.train, dataset, val, model=model, start_epoch=start_epoch)
    history.epoch_loss = list(prior_history["epoch_loss"]) + history.epoch_loss
    history.val_psnr = list(prior_history["val_psnr"]) + history.val_psnr
    total_epochs = start_epoch + run.train.epochs

    ck = save_checkpoint(model, model.cfg, out / "checkpoint", epoch=total_epochs, history=history,
                         train_cfg=run.train)
    manifest_path = ck / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["data"] = {k: getattr(run, k) for k in DATA_KEYS}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    _write_history(out / "history.csv", {"epoch_loss": history.epoch_loss, "val_psnr": history.val_psnr}, 0)

    print(f"epochs {start_epoch + 1}..{total_epochs}: loss {history.epoch_loss[start_epoch]:.5f} -> "
          f"{history.epoch_loss[-1]:.5f}, val psnr {history.val_psnr[-1]:.2f} dB")
    if not _finite(*history.epoch_loss):
        raise CliError("training produced non-finite losses")
    return 0


# ---------------------------------------------------------------------------
# recon / eval

@dataclasses.dataclass
class Reconstructor:
    """Runs one reconstruction method on simulated measurements."""

    method: str
    model: object = None
    mask_seed: int = 0
    noise_std: float = 0.0
    seed: int = 0
    fista: FistaTvConfig = dataclasses.field(default_factory=FistaTvConfig)
    twogrid: TwoGridConfig = dataclasses.field(default_factory=lambda: TwoGridConfig(cycles=3))

    def __post_init__(self):
        self.bank = MaskBank(self.mask_seed)

    def measure(self, x, family, alpha, index):
        op = self.bank.op(family, alpha, x.shape)
        y = op.forward(x)
        if self.noise_std > 0:
            y = add_gaussian_noise(y, self.noise_std, self.seed + index, op.mask.pattern)
        return op, y

    def __call__(self, x, family, alpha, index=0, trace=False):
        op, y = self.measure(x, family, alpha, index)
        stages = None
        if self.method == "zerofill":
            image = zero_fill(op, y)
        elif self.method == "fista_tv":
            image = fista_tv(op, y, self.fista)
        elif self.method == "classical_twogrid":
            image = classical_cs_twogrid(op, y, self.twogrid)
        else:
            with torch.no_grad():
                out = self.model(op, y, alpha)
            image = out.x_final[0, 0].double().numpy()
            if trace:
                stages = [t[0, 0].double().numpy() for t in out.trace]
        return np.asarray(image, dtype=np.float64), stages


def _method_args(p):
    p.add_argument("--checkpoint", help="checkpoint directory (required for cgpd)")
    p.add_argument("--noise-std", type=float, default=0.0, help="k-space noise standard deviation")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--mask-seed", type=int, help="master mask seed (default: the checkpoint's)")
    p.add_argument("--lam", type=float, default=1e-3, help="TV weight for fista_tv")
    p.add_argument("--iters", type=int, default=100, help="fista_tv iterations")
    p.add_argument("--cycles", type=int, default=3, help="classical_twogrid cycles")


def _reconstructors(args, methods):
    if args.noise_std < 0:
        raise CliError("--noise-std must be non-negative")
    model, mask_seed = None, 0
    if "cgpd" in methods:
        if not args.checkpoint:
            raise CliError("method cgpd needs --checkpoint")
        model, _, manifest = load_checkpoint(args.checkpoint)
        model.eval()
        mask_seed = int((manifest.get("train_config") or {}).get("mask_seed", 0))
    if args.mask_seed is not None:
        mask_seed = args.mask_seed
    common = dict(model=model, mask_seed=mask_seed, noise_std=args.noise_std, seed=args.seed,
                  fista=FistaTvConfig(lam=args.lam, iters=args.iters), twogrid=TwoGridConfig(cycles=args.cycles))
    return {m: Reconstructor(m, **common) for m in methods}


def _image_names(ds: Dataset) -> list[str]:
    if ds.names:
        return [Path(n).stem for n in ds.names]
    return [f"img{i:03d}" for i in range(len(ds))]


def cmd_recon(args) -> int:
    ds = _dataset(args.source, args.data, args.count, args.size, args.data_seed)
    rec = _reconstructors(args, [args.method])[args.method]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.trace and args.method != "cgpd":
        raise CliError("--trace is only available for method cgpd")

    records = []
    for i, (name, x) in enumerate(zip(_image_names(ds), ds)):
        image, stages = rec(x, args.family, args.alpha, i, trace=args.trace)
        save_image(np.clip(image, 0, 1), out / f"{name}_{args.method}.png")
        rec_entry = {"name": name, "psnr": psnr(image, x), "ssim": ssim(image, x)}
        if stages is not None:
            tdir = out / "trace" / name
            mid = rec.model.cfg.mid_stage
            entries = []
            for s, st in enumerate(stages, start=1):
                fname = f"stage_{s:02d}.png"
                save_image(np.clip(st, 0, 1), tdir / fname)
                role = "final" if s == len(stages) else ("mid" if s == mid else "")
                entries.append({"stage": s, "file": fname, "role": role, "psnr": psnr(st, x)})
            (tdir / "trace.json").write_text(json.dumps({"stages": entries, "mid": mid, "final": len(stages)},
                                                        indent=2) + "\n")
            rec_entry["trace"] = str(tdir)
        records.append(rec_entry)

    report = {
        "method": args.method, "family": args.family, "alpha": args.alpha, "noise_std": args.noise_std,
        "m_psnr": float(np.mean([r["psnr"] for r in records])),
        "m_ssim": float(np.mean([r["ssim"] for r in records])),
        "images": records,
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{args.method} {args.family} alpha={args.alpha:g}: M-PSNR {report['m_psnr']:.2f} dB, "
          f"M-SSIM {report['m_ssim']:.4f}")
    values = [r["psnr"] for r in records] + [r["ssim"] for r in records]
    if not _finite(*values):
        raise CliError("non-finite metrics")
    return 0


def evaluate(recs: dict, ds: Dataset, families, alphas) -> list[dict]:
    """Mean PSNR/SSIM for every (family, method, alpha), in that loop order."""
    rows = []
    for family in families:
        for method, rec in recs.items():
            for alpha in alphas:
                scores = []
                for i, x in enumerate(ds):
                    image, _ = rec(x, family, alpha, i)
                    scores.append((psnr(image, x), ssim(image, x)))
                p, s = np.mean(scores, axis=0)
                rows.append({"method": method, "family": family, "alpha": alpha,
                             "m_psnr": float(p), "m_ssim": float(s)})
    return rows


def plot_psnr_vs_ratio(rows, family, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in dict.fromkeys(r["method"] for r in rows if r["family"] == family):
        pts = [(r["alpha"], r["m_psnr"]) for r in rows if r["family"] == family and r["method"] == method]
        ax.plot(*zip(*pts), marker="o", label=method)
    ax.set_xlabel("sampling ratio")
    ax.set_ylabel("M-PSNR (dB)")
    ax.set_title(family)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(args) -> int:
    ds = _dataset(args.source, args.data, args.count, args.size, args.data_seed)
    recs = _reconstructors(args, args.methods)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate(recs, ds, args.families, args.alphas)

    with (out / "eval.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "alpha": f"{r['alpha']:g}", "m_psnr": f"{r['m_psnr']:.6f}",
                        "m_ssim": f"{r['m_ssim']:.6f}"})
    (out / "eval.json").write_text(json.dumps(rows, indent=2) + "\n")
    for family in args.families:
        plot_psnr_vs_ratio(rows, family, out / f"psnr_vs_ratio_{family}.png")
    for r in rows:
        print(f"{r['method']:<18} {r['family']:<14} {r['alpha']:<5g} {r['m_psnr']:7.2f} dB  {r['m_ssim']:.4f}")
    if not _finite(*(r["m_psnr"] for r in rows), *(r["m_ssim"] for r in rows)):
        raise CliError("non-finite metrics")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgpdnet", description="Two-grid CS-MRI reconstruction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="generate sampling masks")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--alpha", type=_alpha_list, required=True, help="ratio or comma-separated ratios")
    p.add_argument("--size", type=_size, default=(256, 256), help="N or MxN")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    for name, typ in [("--p", int), ("--k", int), ("--n-s", int), ("--lr", float), ("--epochs", int),
                      ("--batch", int), ("--seed", int), ("--mask-seed", int), ("--count", int),
                      ("--data-seed", int)]:
        p.add_argument(name, type=typ)
    p.add_argument("--ratios", type=_alpha_list)
    p.add_argument("--family", choices=FAMILIES)
    for name in ("--augment", "--share-correction", "--share-prior", "--use-correction", "--condition-eta",
                 "--condition-beta"):
        p.add_argument(name, type=_bool, metavar="BOOL")
    p.add_argument("--source", choices=("phantom", "files"))
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.add_argument("--size", type=_size)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recon", help="reconstruct images from simulated measurements")
    p.add_argument("--method", choices=METHODS, default="cgpd")
    p.add_argument("--alpha", type=_alpha, required=True)
    p.add_argument("--family", choices=FAMILIES, default="cartesian")
    p.add_argument("--trace", action="store_true", help="write every stage output (cgpd only)")
    p.add_argument("--out", required=True)
    _method_args(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="sweep methods, ratios and mask families")
    p.add_argument("--methods", type=_names(METHODS), default=["zerofill"])
    p.add_argument("--alphas", type=_alpha_list, default=[0.1, 0.3, 0.5])
    p.add_argument("--families", type=_names(FAMILIES), default=["cartesian"])
    p.add_argument("--out", required=True)
    _method_args(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MaskError, ConfigError) as exc:
        parser.error(str(exc))
    except (CliError, DataError, TrainingError, CheckpointError, SolverError, ValueError, OSError) as exc:
        print(f"cgpdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
