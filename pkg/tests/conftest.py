import numpy as np
import pytest
import torch

from textuda.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tiny_cfg(tmp_path):
    """Very small training setup that runs a step in well under a second."""
    return TrainConfig(iterations=4, batch_size=2, lr=1e-2, lr_fusion=1e-3, disc_width=8, eval_every=0,
                       out_dir=str(tmp_path / "run"), augment=True,
                       phantom=dict(image_size=32, n_subjects=5, slices_per_subject=3))


def central_diff_check(fn, x, n_coords=20, eps=1e-6, rtol=1e-4, atol=1e-9, seed=0):
    """Compare autograd against central differences on ``n_coords`` random entries of ``x`` (double)."""
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(x.numel(), generator=g)[:n_coords]
    flat = x.detach().view(-1)
    bad = []
    for i in idx.tolist():
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = fn(x).item()
            flat[i] = orig - eps
            down = fn(x).item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic.view(-1)[i].item()
        if abs(a - numeric) > atol + rtol * max(abs(a), abs(numeric)):
            bad.append((i, a, numeric))
    assert len(idx) >= min(n_coords, x.numel())
    assert not bad, f"gradient mismatch at {bad[:5]}"
