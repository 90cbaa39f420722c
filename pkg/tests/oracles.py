"""Independent checks shared by the unit and acceptance suites."""
import numpy as np
import torch

from cgpdnet.data import make_phantoms
from cgpdnet.kspace import MeasurementOp, make_mask
from cgpdnet.model import ModelConfig, init_params, param_family
from cgpdnet.training import loss

GRAD_FAMILIES = ("restrict", "solution", "prolong", "distill", "fuse", "trunk", "eta_head", "beta_head")


def gradient_check(n_per_family=3, seed=0, eps=1e-6):
    """Compare autograd against central differences of the deep-supervised
    loss on one 16x16 sample (float64).  Returns a list of
    ``(name, index, analytic, numeric, rel_err)``."""
    torch.manual_seed(seed)
    cfg = ModelConfig(p=8, k=2, n_s=3, ratios=[0.3])
    model = init_params(cfg, seed, dtype=torch.float64)
    x = make_phantoms(2, 16, 16, seed)[1]
    op = MeasurementOp(make_mask(16, 16, 0.3, "cartesian", seed))
    y = op.forward(x)
    target = torch.as_tensor(x)[None, None]

    def objective():
        out = model(op, y, 0.3)
        return loss(out.x_mid, out.x_final, target)

    model.zero_grad()
    objective().backward()

    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    picked = []
    for family in GRAD_FAMILIES:
        candidates = []
        for name, p in params.items():
            if param_family(name) != family:
                continue
            live = torch.nonzero(p.grad.abs().reshape(-1) > 1e-7).reshape(-1).tolist()
            candidates += [(name, i) for i in live]
        if not candidates:
            raise AssertionError(f"no parameter with a nonzero gradient in family {family}")
        for j in rng.choice(len(candidates), size=min(n_per_family, len(candidates)), replace=False):
            picked.append(candidates[j])

    rows = []
    with torch.no_grad():
        for name, i in picked:
            flat = params[name].view(-1)
            analytic = params[name].grad.reshape(-1)[i].item()
            orig = flat[i].item()
            flat[i] = orig + eps
            up = objective().item()
            flat[i] = orig - eps
            down = objective().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            rows.append((name, i, analytic, numeric, rel))
    return rows
