"""Independent reference implementations shared by the unit and acceptance tests."""
import torch

from pseudoblur import losses as L
from pseudoblur.networks import generator_apply, init_params
from pseudoblur.synthesis import TaskBatch, downsample_batch


def perturbed(spec, seed, dtype=torch.float32, stage_tag=None):
    """Initial parameters with a nonzero output conv so every layer receives gradient."""
    p = init_params(spec, seed, stage_tag, dtype)
    g = torch.Generator().manual_seed(seed)
    return p.replace({k: (torch.randn(v.shape, generator=g, dtype=dtype) * 0.02 if k == "tail.w" else v)
                      for k, v in p.items()})


def literal_outer_step(theta, omega, tasks, alpha, beta, second_order):
    """Independent transcription: inner SGD per train task, Adam on the summed test losses."""
    names = theta.names()
    params = [theta[k].detach().clone().requires_grad_(True) for k in names]
    om = omega.as_dict()

    def run(ps, B):
        p = dict(zip(names, ps))
        D_in = generator_apply(p, B)
        return D_in, generator_apply(p, generator_apply(om, D_in))

    total = 0.0
    for (Btr, Str), (Bte, Ste) in zip(tasks.train, tasks.test):
        Bs, Ss = downsample_batch(Btr), downsample_batch(Str)
        D_in, D_out = run(params, Bs)
        ltr = (Ss - D_in).abs().mean() + (L.luma(Ss) - L.luma(D_out)).abs().mean()
        grads = torch.autograd.grad(ltr, params, create_graph=second_order)
        if second_order:
            adapted = [p - alpha * g for p, g in zip(params, grads)]
        else:
            adapted = [(p - alpha * g).detach().requires_grad_(True) for p, g in zip(params, grads)]
        Bs, Ss = downsample_batch(Bte), downsample_batch(Ste)
        D_in, D_out = run(adapted, Bs)
        lte = (Ss - D_in).abs().mean() + (L.luma(Ss) - L.luma(D_out)).abs().mean()
        wrt = params if second_order else adapted
        gs = torch.autograd.grad(lte, wrt)
        for p, g in zip(params, gs):
            p.grad = g if p.grad is None else p.grad + g
        total += float(lte.detach())
    opt = torch.optim.Adam(params, lr=beta)
    opt.step()
    return {k: p.detach() for k, p in zip(names, params)}


def tiny_tasks(seed, dtype=torch.float64, n=1, size=16):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: torch.rand(1, 3, size, size, generator=g, dtype=dtype) * 1.6 - 0.8  # noqa: E731
    pairs = [(mk(), mk()) for _ in range(2 * n)]
    return TaskBatch(pairs[:n], pairs[n:], [[0]] * n, [[1]] * n)


def _flatten(params):
    names = list(params)
    shapes = [params[k].shape for k in names]
    sizes = [params[k].numel() for k in names]

    def unflat(v):
        return dict(zip(names, (t.view(s) for t, s in zip(torch.split(v, sizes), shapes))))
    return torch.cat([params[k].reshape(-1) for k in names]), unflat


def finite_difference_grad(fn, params, steps=(1e-6, 1e-7, 1e-8), rtol=1e-4, atol=1e-9, chunk=256,
                           only=None):
    """Central differences of a scalar ``fn(params)`` (all entries, or the flat indices ``only``).

    The losses are only piecewise smooth (L1, LeakyReLU). For smooth entries
    central differences at consecutive steps agree to O(h^2); where they do
    not, a kink lies within the larger step and the entry moves on to the
    next smaller pair of steps. A single step skips the cascade.
    """
    from torch.func import vmap
    flat, unflat = _flatten(params)
    batched = vmap(lambda v: fn(unflat(v)))

    def central(idx, h):
        V = flat.expand(len(idx), -1).clone()
        rows = torch.arange(len(idx))
        V[rows, idx] += h
        up = batched(V)
        V[rows, idx] -= 2 * h
        return (up - batched(V)) / (2 * h)

    todo = torch.arange(flat.numel()) if only is None else torch.as_tensor(only)
    out = torch.full_like(flat, float("nan"))
    with torch.no_grad():
        for a in range(0, len(todo), chunk):
            idx = todo[a:a + chunk]
            coarse = central(idx, steps[0])
            out[idx] = coarse
            for h in steps[1:]:
                fine = central(idx, h)
                out[idx] = fine
                kinked = (coarse - fine).abs() > rtol * torch.maximum(coarse.abs(), fine.abs()) + atol
                idx, coarse = idx[kinked], fine[kinked]
                if not len(idx):
                    break
    return out


def gradient_check(fn, params, floor=1e-6, step=1e-6, recheck=1e-4):
    """Max relative error between autograd and finite differences over all entries.

    Every entry is differenced with ``step``; entries off by more than
    ``recheck`` go through the kink cascade of :func:`finite_difference_grad`.
    ``floor`` bounds the denominator so near-zero gradients compare in
    absolute terms.
    """
    leaf = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    grads = torch.autograd.grad(fn(leaf), list(leaf.values()))
    analytic = torch.cat([g.reshape(-1) for g in grads])
    plain = {k: v.detach() for k, v in params.items()}
    floor = torch.tensor(floor, dtype=analytic.dtype)

    def rel(numeric):
        return (analytic - numeric).abs() / torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), floor)

    numeric = finite_difference_grad(fn, plain, steps=(step,))
    suspects = torch.nonzero(rel(numeric) > recheck).flatten()
    if len(suspects):
        redo = finite_difference_grad(fn, plain, only=suspects)
        numeric[suspects] = redo[suspects]
    return float(rel(numeric).max())
