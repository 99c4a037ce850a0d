"""Finite-difference gradient checks with norm-wise relative error.

``torch.autograd.gradcheck`` compares Jacobian entries with an elementwise
atol/rtol rule; the checks here compare whole gradient vectors instead,
``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``, which is the
quantity the test suite bounds. Large tensors are checked on a random
subset of coordinates plus a few random full-length directions.
"""
from dataclasses import dataclass, field

import torch


@dataclass
class GradCheckResult:
    per_tensor: dict = field(default_factory=dict)
    directional: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(list(self.per_tensor.values()) + self.directional + [0.0])

    def __str__(self):
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else "-"
        return f"max rel. error {self.max_error:.3e} (worst tensor: {worst})"


def relative_error(a, b, floor=1e-12):
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item())
    return 0.0 if den < floor and num < floor else num / max(den, floor)


def _coords(numel, limit, gen):
    if limit is None or numel <= limit:
        return torch.arange(numel)
    return torch.randperm(numel, generator=gen)[:limit]


def check_gradients(fn, tensors, eps=1e-6, samples=24, directions=2, seed=0):
    """Compare autograd against central differences of a scalar ``fn()``.

    ``tensors`` maps names to float64 leaf tensors that ``fn`` reads (model
    parameters or inputs); they are perturbed in place and restored.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks run in float64, got {t.dtype}")
    gen = torch.Generator().manual_seed(seed)
    leaves = list(tensors.values())
    for t in leaves:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]

    result = GradCheckResult()
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), grads):
            flat = t.view(-1)
            idx = _coords(flat.numel(), samples, gen)
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                numeric[j] = (hi - lo) / (2 * eps)
            result.per_tensor[name] = relative_error(g.reshape(-1)[idx], numeric)

        for _ in range(directions):
            dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in leaves]
            analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
            for t, d in zip(leaves, dirs):
                t.add_(d, alpha=eps)
            hi = fn().item()
            for t, d in zip(leaves, dirs):
                t.add_(d, alpha=-2 * eps)
            lo = fn().item()
            for t, d in zip(leaves, dirs):
                t.add_(d, alpha=eps)
            numeric = (hi - lo) / (2 * eps)
            result.directional.append(relative_error(torch.tensor(analytic, dtype=torch.float64),
                                                     torch.tensor(numeric, dtype=torch.float64)))
    return result


def module_tensors(module, *inputs):
    """Named float64 leaves for a module's parameters plus given inputs."""
    named = {n: p for n, p in module.named_parameters() if p.requires_grad}
    for i, x in enumerate(inputs):
        named[f"input{i}"] = x
    return named


def projected(output, seed=1):
    """Scalar test functional: dot product with a fixed random tensor, so
    every output element contributes with its own weight."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(output.shape, generator=gen, dtype=output.dtype)
    return (output * w).sum()
