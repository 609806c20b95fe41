"""Central finite-difference check of analytic parameter gradients."""

import torch
from torch import nn


def check_param_grads(module: nn.Module, loss_fn, n_params: int = 24, eps: float = 1e-6, seed: int = 0):
    """Compare d loss / d theta for ``n_params`` randomly chosen scalar parameters.

    ``loss_fn()`` must return a float64 scalar computed from ``module``.
    Returns a list of (name, index, analytic, numeric, relative_error).
    """
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    sizes = torch.tensor([p.numel() for _, p in named], dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    # sample tensors proportional to size, then an entry uniformly within
    picks = torch.multinomial(sizes, n_params, replacement=True, generator=gen)
    out = []
    for k in picks.tolist():
        name, p = named[k]
        idx = int(torch.randint(p.numel(), (1,), generator=gen))
        analytic = float(p.grad.reshape(-1)[idx])
        flat = p.data.reshape(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
            up = float(loss_fn())
            flat[idx] = orig - eps
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-7)
        out.append((name, idx, analytic, numeric, abs(analytic - numeric) / denom))
    return out


def projected(output: torch.Tensor, seed: int = 1) -> torch.Tensor:
    """Scalar loss from a fixed random projection of ``output``."""
    w = torch.randn(output.shape, dtype=output.dtype, generator=torch.Generator().manual_seed(seed))
    return (output * w).sum()
