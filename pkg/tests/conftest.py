"""Shared test utilities: finite-difference gradient oracle and timing guard."""
import contextlib
import time

import pytest
import torch


def numerical_grad(f, x: torch.Tensor, h: float = 1e-5, idx=None) -> torch.Tensor:
    """Central-difference gradient of scalar f w.r.t. double tensor x.

    idx: optional list of flat coordinates to probe (others left zero);
    keeps wall time sane for large parameter tensors.
    """
    assert x.dtype == torch.float64, "finite differences need double precision"
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    coords = range(flat.numel()) if idx is None else idx
    for i in coords:
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(flat.reshape(x.shape)).item()
        flat[i] = orig - step
        fm = f(flat.reshape(x.shape)).item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor, idx=None) -> float:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if idx is not None:
        sel = torch.tensor(list(idx), dtype=torch.long)
        a, n = a[sel], n[sel]
    denom = max(a.norm().item(), n.norm().item(), 1e-8)
    return (a - n).norm().item() / denom


def check_gradient(make_loss, tensors, tol=1e-3, h=1e-5, max_coords=None, seed=0):
    """Compare autograd against central differences for each tensor.

    make_loss() -> scalar loss recomputed from the (possibly perturbed)
    live tensors; tensors: list of leaf double tensors with requires_grad.
    """
    loss = make_loss()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    rng = torch.Generator().manual_seed(seed)
    for t, g in zip(tensors, grads):
        n = t.numel()
        if max_coords is not None and n > max_coords:
            idx = torch.randperm(n, generator=rng)[:max_coords].tolist()
        else:
            idx = None

        def f(vals, _t=t):
            with torch.no_grad():
                _t.copy_(vals)
            return make_loss()

        num = numerical_grad(f, t, h=h, idx=idx)
        err = rel_error(g, num, idx=idx)
        assert err <= tol, f"gradient mismatch ({err:.2e} > {tol}) for tensor of shape {tuple(t.shape)}"


@contextlib.contextmanager
def time_budget(seconds: float, label: str):
    t0 = time.monotonic()
    yield
    elapsed = time.monotonic() - t0
    assert elapsed < seconds, f"{label}: {elapsed:.1f}s exceeded the {seconds:.0f}s budget"


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(1234)
