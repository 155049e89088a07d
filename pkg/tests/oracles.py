"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np


def eot_projected_gradient(cost, a, b, eps, iters=100_000):
    """Brute-force minimizer of <C, g> - eps * H(g) over the transport polytope.

    Works on a batch of problems of identical shape: cost (K, m, n), a (K, m),
    b (K, n). Starts from the independent coupling and takes gradient steps
    projected onto the affine marginal subspace; the step is limited so all
    entries stay positive (the entropy keeps the minimizer interior).
    """
    cost = np.asarray(cost, dtype=np.float64)
    g = a[:, :, None] * b[:, None, :]
    for _ in range(iters):
        grad = cost + eps * (np.log(g) + 1.0)
        # orthogonal projection onto {D : row sums = 0, column sums = 0}
        d = (
            grad
            - grad.mean(axis=2, keepdims=True)
            - grad.mean(axis=1, keepdims=True)
            + grad.mean(axis=(1, 2), keepdims=True)
        )
        step = 0.5 * g.min(axis=(1, 2)) / eps
        # never move more than half way to zero on any entry
        ratio = np.where(d > 0, g / np.where(d > 0, d, 1.0), np.inf).min(axis=(1, 2))
        step = np.minimum(step, 0.5 * ratio)
        g = g - step[:, None, None] * d
    return g


def random_eot_instances(k, m, n, seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 1, (k, m, n))
    a = rng.uniform(0.2, 1.0, (k, m))
    b = rng.uniform(0.2, 1.0, (k, n))
    return cost, a / a.sum(axis=1, keepdims=True), b / b.sum(axis=1, keepdims=True)


def gaussian_eot_barycentric_variance(var0, var1, eps):
    """Variance of E[x1 | x0] under the 1-D Gaussian EOT coupling.

    Minimizing -2c - (eps / 2) log(var0 var1 - c^2) over the cross-covariance c
    gives 2 c^2 + eps c - 2 var0 var1 = 0.
    """
    c = (-eps + np.sqrt(eps**2 + 16 * var0 * var1)) / 4.0
    return c**2 / var0


def grid_sinkhorn_barycentric_stats(mean0, var0, mean1, var1, eps, n=301, width=6.0):
    """Mean and variance of E[x1 | x0] under the discretized EOT coupling.

    Both Gaussians are discretized on ``n`` equally spaced nodes spanning
    ``width`` standard deviations on each side; the coupling comes from the
    package's log-domain Sinkhorn with cost ``(x0 - x1)^2``.
    """
    from cortexbridge.bridge import sinkhorn_eot

    def nodes(m, v):
        x = np.linspace(m - width * np.sqrt(v), m + width * np.sqrt(v), n)
        w = np.exp(-((x - m) ** 2) / (2 * v))
        return x, w / w.sum()

    xs, a = nodes(mean0, var0)
    ys, b = nodes(mean1, var1)
    coupling = sinkhorn_eot((xs[:, None] - ys[None, :]) ** 2, a, b, eps, tol=1e-12)
    proj = coupling.barycentric_projection(ys)
    mean = float(a @ proj)
    return mean, float(a @ (proj - mean) ** 2)


def disk_mask(n):
    c = -1 + (np.arange(n) + 0.5) * 2 / n
    x, y = np.meshgrid(c, c)
    return x**2 + y**2 <= 1


def central_difference(fn, x, idx, h=1e-6):
    """Central finite differences of scalar ``fn`` at flat indices ``idx`` of ``x``."""
    out = []
    for i in idx:
        xp = x.clone()
        xm = x.clone()
        xp.view(-1)[i] += h
        xm.view(-1)[i] -= h
        out.append((float(fn(xp).detach()) - float(fn(xm).detach())) / (2 * h))
    return np.array(out)


def relative_error(fn, x, n=12, seed=0):
    """Relative L2 error between autograd and central differences at ``n`` in-disk pixels."""
    import torch

    m = torch.as_tensor(disk_mask(x.shape[-1])).expand_as(x).reshape(-1)
    cand = torch.nonzero(m).reshape(-1)
    rng = np.random.default_rng(seed)
    idx = cand[rng.choice(len(cand), size=min(n, len(cand)), replace=False)].tolist()
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad.reshape(-1)[idx].numpy()
    numeric = central_difference(fn, x.detach(), idx)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
