"""Shared test utilities: a central-difference gradient oracle."""
import numpy as np
import torch


def fd_check(loss_fn, tensors, h=1e-5, per_tensor=6, seed=0):
    """Compare autograd against central differences on sampled entries of each tensor.

    ``loss_fn`` is re-evaluated from scratch; ``tensors`` is a list of ``(name, tensor)``
    (float64 leaves with ``requires_grad``). Returns ``(worst_rel_err, name_of_worst)``.
    """
    rng = np.random.default_rng(seed)
    for _, p in tensors:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in tensors], allow_unused=True)
    worst, where = 0.0, ""
    with torch.no_grad():
        for (name, p), g in zip(tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = g.reshape(-1)[i].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                if rel > worst:
                    worst, where = rel, f"{name}[{i}] analytic={ana:.3e} numeric={num:.3e}"
    return worst, where


def params_of(module, prefix=""):
    return [(prefix + n, p) for n, p in module.named_parameters() if p.requires_grad]
