import torch


def fd_check(module, loss_fn, n_params=10, h=1e-5, seed=0):
    """Worst relative error between autograd and central differences over random weights.

    Coordinates are drawn from tensors whose largest gradient is within 100x
    of the global largest, favouring entries within 10x of their tensor's max.

    Relative error is |g - fd| / max(|g|, |fd|, 1e-8); coordinates whose
    gradient is tiny in both are compared absolutely against 1e-10.
    """
    g = torch.Generator().manual_seed(seed)
    module.zero_grad()
    loss_fn().backward()
    grads = [p for p in module.parameters() if p.grad is not None]
    top = max(float(p.grad.abs().max()) for p in grads)
    # at h ~ 1e-5 roundoff swamps gradients far below the largest one
    params = [p for p in grads if float(p.grad.abs().max()) >= 1e-2 * top]
    worst = 0.0
    for _ in range(n_params):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        flat = p.data.view(-1)
        # sample among coordinates carrying a non-negligible share of the gradient
        grad = p.grad.view(-1).abs()
        candidates = torch.nonzero(grad >= 0.1 * grad.max()).view(-1)
        i = int(candidates[int(torch.randint(len(candidates), (1,), generator=g))])
        analytic = float(p.grad.view(-1)[i])
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-8:
            err = 0.0 if abs(analytic - numeric) < 1e-10 else 1.0
        else:
            err = abs(analytic - numeric) / scale
        worst = max(worst, err)
    return worst
