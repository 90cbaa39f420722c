"""The unrolled correction-distillation network.

Every stage runs three blocks on the current real image estimate ``x``:

1. pre-relaxation   ``h = x - eta * Re(T^H (T x - y))``
2. correction       k-space residual -> strided-conv restriction -> residual
                    solution operator -> coarse inverse DFT -> transposed-conv
                    prolongation, concatenated with ``h`` and a ``beta`` map
3. prior distillation: a chain of conv+ReLU features fused by a 1x1 conv.

A small condition network maps the sampling ratio to per-stage ``eta`` and
``beta``.  Tensors are laid out ``(batch, channel, m, n)``; k-space enters
convolutions as two real channels (real, imag).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .kspace import MeasurementOp, ifft2c

N_RESBLOCKS = 4


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    p: int = 32
    k: int = 8
    n_s: int = 13
    ratios: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    share_correction: bool = False
    share_prior: bool = False
    use_correction: bool = True
    condition_eta: bool = True
    condition_beta: bool = True

    def __post_init__(self):
        if self.p < 1 or self.k < 1 or self.n_s < 1:
            raise ConfigError("p, k and n_s must all be >= 1")
        if self.n_s % 2 == 0:
            raise ConfigError(f"n_s must be odd so the supervision tap (n_s+1)/2 is a stage, got {self.n_s}")
        self.ratios = [float(r) for r in self.ratios]

    @property
    def mid_stage(self) -> int:
        """1-based index of the deep-supervision stage."""
        return (self.n_s + 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks

def conv3x3(c_in, c_out):
    return nn.Conv2d(c_in, c_out, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.conv1 = conv3x3(p, p)
        self.conv2 = conv3x3(p, p)

    def forward(self, u):
        return u + self.conv2(F.relu(self.conv1(u)))


class SolutionOperator(nn.Module):
    """Coarse-grid residual solver: ``r + out(res^4(in(r)))``, no normalization."""

    def __init__(self, p):
        super().__init__()
        self.conv_in = conv3x3(2, p)
        self.resblocks = nn.Sequential(*[ResBlock(p) for _ in range(N_RESBLOCKS)])
        self.conv_out = conv3x3(p, 2)

    def forward(self, r2h):
        return r2h + self.conv_out(self.resblocks(self.conv_in(r2h)))


class Correction(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.restrict = nn.Conv2d(2, 2, 2, stride=2)
        self.solution = SolutionOperator(p)
        self.prolong = nn.ConvTranspose2d(2, 1, 2, stride=2)

    def coarse_error(self, h, op: MeasurementOp, y):
        """Prolonged correction ``e^h`` (B, 1, m, n) for the current ``h``."""
        r = y - op.forward(h.to(y.dtype))
        r2 = torch.cat([r.real, r.imag], dim=1)
        s = self.solution(self.restrict(r2))
        e2h = ifft2c(torch.complex(s[:, :1], s[:, 1:]))
        return self.prolong(torch.cat([e2h.real, e2h.imag], dim=1))

    def forward(self, h, op, y, beta, enabled=True):
        e = self.coarse_error(h, op, y) if enabled else torch.zeros_like(h)
        beta_map = beta.view(-1, 1, 1, 1).to(h.dtype).expand_as(h)
        return torch.cat([h, e, beta_map], dim=1)


class PriorDistillation(nn.Module):
    """``W * Concat(m, u_1, ..., u_k)`` with ``u_1 = ReLU(A m)`` and
    ``u_j = ReLU(B_{j-1} u_{j-1})``."""

    def __init__(self, p, k, in_channels=3):
        super().__init__()
        self.distill_A = conv3x3(in_channels, p)
        self.distill_B = nn.ModuleList(conv3x3(p, p) for _ in range(k - 1))
        self.fuse = nn.Conv2d(in_channels + k * p, 1, 1)

    def forward(self, m):
        feats = [m]
        u = F.relu(self.distill_A(m))
        feats.append(u)
        for conv in self.distill_B:
            u = F.relu(conv(u))
            feats.append(u)
        return self.fuse(torch.cat(feats, dim=1))


class ConditionModule(nn.Module):
    """Sampling ratio -> strictly positive per-stage (eta, beta)."""

    def __init__(self, p, n_s):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(1, p), nn.ReLU(), nn.Linear(p, p), nn.ReLU())
        self.eta_head = nn.Linear(p, n_s)
        self.beta_head = nn.Linear(p, n_s)

    def forward(self, alpha):
        z = self.trunk(alpha.view(-1, 1))
        return F.softplus(self.eta_head(z)), F.softplus(self.beta_head(z))


class Stage(nn.Module):
    def __init__(self, correction: Correction, prior: PriorDistillation):
        super().__init__()
        self.correction = correction
        self.prior = prior


@dataclass
class ModelOutput:
    x_mid: torch.Tensor
    x_final: torch.Tensor
    trace: list
    eta: torch.Tensor
    beta: torch.Tensor


class CGPDNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        shared_c = Correction(cfg.p) if cfg.share_correction else None
        shared_p = PriorDistillation(cfg.p, cfg.k) if cfg.share_prior else None
        self.stages = nn.ModuleList(
            Stage(shared_c or Correction(cfg.p), shared_p or PriorDistillation(cfg.p, cfg.k))
            for _ in range(cfg.n_s)
        )
        self.condition = ConditionModule(cfg.p, cfg.n_s)
        # stage-wise constants used when the condition module is switched off for eta/beta
        self.raw_eta = nn.Parameter(torch.zeros(cfg.n_s)) if not cfg.condition_eta else None
        self.raw_beta = nn.Parameter(torch.zeros(cfg.n_s)) if not cfg.condition_beta else None

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def hyper(self, alpha):
        eta, beta = self.condition(alpha)
        if self.raw_eta is not None:
            eta = F.softplus(self.raw_eta).expand_as(eta)
        if self.raw_beta is not None:
            beta = F.softplus(self.raw_beta).expand_as(beta)
        return eta, beta

    def forward(self, op: MeasurementOp, y, alpha) -> ModelOutput:
        y = _as_kspace(y, self.dtype)
        batch = y.shape[0]
        alpha = torch.as_tensor(alpha, dtype=self.dtype).reshape(-1).expand(batch)
        eta, beta = self.hyper(alpha)

        x = op.adjoint(y).abs().to(self.dtype)
        trace = []
        for i, stage in enumerate(self.stages):
            h = pre_relax(x, eta[:, i], op, y)
            m = stage.correction(h, op, y, beta[:, i], enabled=self.cfg.use_correction)
            x = stage.prior(m)
            trace.append(x)
        return ModelOutput(trace[self.cfg.mid_stage - 1], trace[-1], trace, eta, beta)


def _as_kspace(y, real_dtype):
    cdtype = torch.complex128 if real_dtype == torch.float64 else torch.complex64
    y = torch.as_tensor(y).to(cdtype)
    if y.dim() == 2:
        y = y[None, None]
    elif y.dim() == 3:
        y = y[:, None]
    return y


# ---------------------------------------------------------------------------
# functional surface

def condition(cm: ConditionModule, alpha):
    """Return ``(eta, beta)`` vectors of length ``n_s`` for a scalar ratio."""
    a = float(alpha)
    if not 0.0 < a <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    dtype = next(cm.parameters()).dtype
    eta, beta = cm(torch.tensor([a], dtype=dtype))
    return eta[0], beta[0]


def pre_relax(x_prev, eta, op: MeasurementOp, y):
    """``Re(x - eta * T^H (T x - y))`` with ``x`` promoted to complex."""
    if tuple(x_prev.shape[-2:]) != op.shape:
        raise ValueError(f"image shape {tuple(x_prev.shape[-2:])} does not match operator {op.shape}")
    eta = torch.as_tensor(eta, dtype=x_prev.dtype)
    if eta.dim() == 1:
        eta = eta.view(-1, *([1] * (x_prev.dim() - 1)))
    y = torch.as_tensor(y).to(torch.complex128 if x_prev.dtype == torch.float64 else torch.complex64)
    grad = op.adjoint(op.forward(x_prev.to(y.dtype)) - y).real
    return x_prev - eta * grad


def solution_operator(stage, r2h):
    sol = stage.correction.solution if isinstance(stage, Stage) else stage
    if r2h.dim() != 4 or r2h.shape[1] != 2:
        raise ValueError(f"expected a (B, 2, m/2, n/2) coarse field, got {tuple(r2h.shape)}")
    return sol(r2h)


def correction(stage, h, op: MeasurementOp, y, beta):
    if op.shape[0] % 2 or op.shape[1] % 2:
        raise ValueError("correction requires even image dimensions")
    corr = stage.correction if isinstance(stage, Stage) else stage
    y = _as_kspace(y, h.dtype)
    return corr(h, op, y, torch.as_tensor(beta, dtype=h.dtype).reshape(-1))


def prior_distill(stage, m):
    prior = stage.prior if isinstance(stage, Stage) else stage
    if m.dim() != 4 or m.shape[1] != prior.distill_A.in_channels:
        raise ValueError(f"expected (B, {prior.distill_A.in_channels}, m, n) input, got {tuple(m.shape)}")
    return prior(m)


def forward_pass(model: CGPDNet, op: MeasurementOp, y, alpha) -> ModelOutput:
    if model.cfg.n_s != len(model.stages):
        raise ConfigError("model stage count disagrees with its configuration")
    return model(op, y, alpha)


def fan_in(module: nn.Module) -> int:
    if isinstance(module, nn.ConvTranspose2d):
        # stride == kernel: each output pixel sees one tap per input channel
        return module.in_channels
    if isinstance(module, nn.Conv2d):
        return module.in_channels * module.kernel_size[0] * module.kernel_size[1]
    if isinstance(module, nn.Linear):
        return module.in_features
    raise TypeError(type(module))


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> CGPDNet:
    """Build a model with Kaiming-normal weights (fan-in, ReLU gain) and zero
    biases.  Draws come from one numpy generator, visiting modules in
    ``named_modules()`` order."""
    model = CGPDNet(cfg).to(dtype)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, mod in model.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                std = math.sqrt(2.0 / fan_in(mod))
                w = rng.standard_normal(tuple(mod.weight.shape)) * std
                mod.weight.copy_(torch.from_numpy(w))
                mod.bias.zero_()
    return model


PARAM_FAMILIES = ("restrict", "solution", "prolong", "distill", "fuse", "trunk", "eta_head", "beta_head", "stage_constants")


def param_family(name: str) -> str:
    if ".restrict." in name:
        return "restrict"
    if ".solution." in name:
        return "solution"
    if ".prolong." in name:
        return "prolong"
    if ".distill_" in name:
        return "distill"
    if ".fuse." in name:
        return "fuse"
    if name.startswith("condition.trunk"):
        return "trunk"
    if name.startswith("condition.eta_head"):
        return "eta_head"
    if name.startswith("condition.beta_head"):
        return "beta_head"
    if name in ("raw_eta", "raw_beta"):
        return "stage_constants"
    raise KeyError(name)


def param_count(model: nn.Module) -> dict:
    counts = dict.fromkeys(PARAM_FAMILIES, 0)
    for name, p in model.named_parameters():
        counts[param_family(name)] += p.numel()
    counts["total"] = sum(counts[f] for f in PARAM_FAMILIES)
    return counts


def zero_params(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


@torch.no_grad()
def reconstruct(model: CGPDNet, op: MeasurementOp, y, alpha) -> np.ndarray:
    """Final-stage image as a 2D numpy array."""
    out = model(op, y, alpha)
    return out.x_final[0, 0].detach().cpu().numpy().astype(np.float64)
