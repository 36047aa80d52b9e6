"""Shared test utilities: finite-difference oracle and tiny model stubs."""

import numpy as np

from equirob import Tensor, backward
from equirob import autodiff as ad


def numerical_grad(f, x, indices, h=1e-5):
    """Central finite differences of scalar f at the given flat indices."""
    grads = []
    for idx in indices:
        xp = x.copy()
        xm = x.copy()
        xp.flat[idx] += h
        xm.flat[idx] -= h
        grads.append((f(xp) - f(xm)) / (2 * h))
    return np.array(grads)


def analytic_grad(f_tensor, x):
    xt = Tensor(x, requires_grad=True)
    loss = f_tensor(xt)
    backward(loss)
    return xt.grad


def check_grad(f_tensor, x, n_coords=10, h=1e-5, rtol=1e-4, seed=0):
    """Compare analytic gradient against finite differences at random coords."""
    an = analytic_grad(f_tensor, x)
    rng = np.random.default_rng(seed)
    idxs = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    num = numerical_grad(lambda a: f_tensor(Tensor(a)).item(), x, idxs, h=h)
    got = an.flat[idxs]
    denom = np.maximum(np.abs(num), 1e-6)
    rel = np.abs(got - num) / denom
    assert rel.max() < rtol, f"max rel err {rel.max():.2e} at coords {idxs}"


class PointwiseModel:
    """Feature extractor that is exactly the identity; perfectly equivariant
    to any spatial warp."""

    def features(self, x):
        return ad.as_tensor(x)

    def forward(self, x):
        return ad.as_tensor(x)

    def logits(self, x):
        return np.asarray(x, dtype=np.float64)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)
