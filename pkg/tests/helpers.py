"""Shared test utilities."""
from medivlad import numerics as nx


def swap_param(module, name: str, value):
    """Replace a (possibly dotted) parameter attribute and return the old one."""
    *path, leaf = name.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    old = getattr(obj, leaf)
    setattr(obj, leaf, value)
    return old


def param_check(module, name: str, forward, eps=1e-3, coords=None, seed=0):
    """grad_check with respect to one named parameter of ``module``."""
    point = dict(module.named_parameters())[name].data.copy()

    def fn(x):
        old = swap_param(module, name, x)
        try:
            return forward()
        finally:
            swap_param(module, name, old)

    return nx.grad_check(fn, point, eps=eps, coords=coords, seed=seed)


def randomize(module, rng, std=0.5):
    """Overwrite every parameter with N(0, std^2) draws (keeps dtype)."""
    for _, p in module.named_parameters():
        p.data = rng.normal(0, std, size=p.shape).astype(p.data.dtype)


def vlad_oracle(f, centers, w, b, fc1_w=None, fc1_b=None, fc2_w=None, fc2_b=None, tau=1.0,
                final_norm=True, uniform=False):
    """Dual-level VLAD in plain Python loops: returns (v, descriptors, frame weights)."""
    import math

    n, d = len(f), len(f[0])
    y = len(centers)
    desc = []
    for i in range(n):
        logits = [sum(f[i][k] * w[k][j] for k in range(d)) + b[j] for j in range(y)]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        alpha = [v / sum(e) for v in e]
        desc.append([alpha[j] * (f[i][k] - centers[j][k]) for j in range(y) for k in range(d)])
    if uniform:
        weights = [1.0 / n] * n
    else:
        hidden = len(fc1_b)
        scores = []
        for i in range(n):
            h = [math.tanh(sum(desc[i][k] * fc1_w[k][m] for k in range(y * d)) + fc1_b[m]) for m in range(hidden)]
            scores.append(sum(h[m] * fc2_w[m][0] for m in range(hidden)) + fc2_b[0])
        top = max(s / tau for s in scores)
        e = [math.exp(s / tau - top) for s in scores]
        weights = [v / sum(e) for v in e]
    pooled = [sum(weights[i] * desc[i][k] for i in range(n)) for k in range(y * d)]
    out = []
    for j in range(y):
        block = pooled[j * d:(j + 1) * d]
        norm = math.sqrt(sum(x * x for x in block))
        out.extend([x / norm for x in block] if norm > 1e-12 else block)
    if final_norm:
        norm = math.sqrt(sum(x * x for x in out))
        out = [x / norm for x in out] if norm > 1e-12 else out
    return out, desc, weights


def model_oracle(model, feats, uniform=False):
    c = model.centroids
    a = model.assigner
    return vlad_oracle(feats.tolist(), c.centers.data.tolist(), c.weight.data.tolist(), c.bias.data.tolist(),
                       a.fc1.weight.data.tolist(), a.fc1.bias.data.tolist(), a.fc2.weight.data.tolist(),
                       a.fc2.bias.data.tolist(), model.tau, model.final_norm, uniform)
