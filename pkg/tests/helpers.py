"""Shared test utilities: finite-difference gradient checks in double precision."""

import torch


def directional_fd_error(fn, inputs, h=1e-5, trials=3, seed=0):
    """Worst relative error between analytic and central-difference derivatives.

    fn maps the input tensors to a scalar. For each trial a random direction v
    is drawn per input; the analytic directional derivative sum(grad_i . v_i)
    is compared to (fn(x+hv) - fn(x-hv)) / 2h. All math in float64.
    """
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().to(torch.float64).requires_grad_(True) for x in inputs]
    out = fn(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    for _ in range(trials):
        dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for x in xs]
        analytic = sum(
            (g * d).sum() for g, d in zip(grads, dirs) if g is not None
        )
        with torch.no_grad():
            plus = fn(*[x + h * d for x, d in zip(xs, dirs)])
            minus = fn(*[x - h * d for x, d in zip(xs, dirs)])
        fd = float(plus - minus) / (2 * h)
        denom = max(abs(fd), abs(float(analytic)), 1e-8)
        worst = max(worst, abs(fd - float(analytic)) / denom)
    return worst


def module_fd_error(module, x, h=1e-6, trials=2, seed=0):
    """FD check of a module's scalarized output wrt its input and parameters.

    The output is projected to a scalar with a fixed random tensor so every
    output element contributes to the gradient. The step is small enough that
    a random direction rarely pushes a ReLU pre-activation across its kink.
    """
    module = module.to(torch.float64)
    x = x.detach().to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(module(x).shape, generator=gen, dtype=torch.float64)
    params = [p for p in module.parameters() if p.requires_grad]

    def value(inp):
        return (module(inp) * proj).sum()

    worst = 0.0
    x_leaf = x.clone().requires_grad_(True)
    out = value(x_leaf)
    grads = torch.autograd.grad(out, [x_leaf, *params], allow_unused=True)
    for _ in range(trials):
        dirs = [
            torch.randn(t.shape, generator=gen, dtype=torch.float64)
            for t in [x_leaf, *params]
        ]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs) if g is not None)
        with torch.no_grad():
            for sign in (1.0, -1.0):
                for p, d in zip(params, dirs[1:]):
                    p.add_(sign * h * d)
                val = value(x + sign * h * dirs[0])
                if sign > 0:
                    plus = val
                else:
                    minus = val
                for p, d in zip(params, dirs[1:]):
                    p.add_(-sign * h * d)
        fd = float(plus - minus) / (2 * h)
        denom = max(abs(fd), abs(float(analytic)), 1e-8)
        worst = max(worst, abs(fd - float(analytic)) / denom)
    return worst
