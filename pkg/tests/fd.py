"""Central finite-difference oracle used by the gradient suite."""
import torch

STEP = 1e-4
RTOL = 1e-3


def directional_check(fn, tensors, seed=0, step=STEP, rtol=RTOL, atol=1e-7):
    """Compare autograd against central differences along a random direction per tensor.

    ``fn`` maps no arguments to a scalar and reads ``tensors`` (leaf double
    tensors with requires_grad).  Returns a list of (index, analytic, numeric)
    for every failure.
    """
    g = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    failures = []
    for i, (t, grad) in enumerate(zip(tensors, grads)):
        v = torch.randn(t.shape, generator=g, dtype=t.dtype)
        analytic = 0.0 if grad is None else float((grad * v).sum())
        with torch.no_grad():
            t.add_(step * v)
            plus = float(fn())
            t.sub_(2 * step * v)
            minus = float(fn())
            t.add_(step * v)
        numeric = (plus - minus) / (2 * step)
        scale = max(abs(analytic), abs(numeric))
        if abs(analytic - numeric) > atol + rtol * scale:
            failures.append((i, analytic, numeric))
    return failures


def model_params(model):
    names, params = [], []
    for n, p in model.named_parameters():
        names.append(n)
        params.append(p)
    return names, params
