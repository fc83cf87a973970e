"""Shared test oracles and helpers."""

import numpy as np

from mvdistill import tensor as T


def finite_difference_grads(loss_fn, params, h=1e-3):
    """Central-difference gradients of `loss_fn()` w.r.t. each param tensor.

    `loss_fn` must recompute the loss from the current contents of
    `params` (a dict of Tensors).  All arithmetic runs in float64: this is
    the independent oracle; it never touches the reverse-mode tape.
    """
    grads = {}
    for name, p in params.items():
        assert p.dtype == np.float64, "finite differences need float64 params"
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn())
            flat[i] = orig - h
            fm = float(loss_fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max over entries of |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_relative_error(analytic, numeric):
    """Relative error of a gradient block as a vector: ||a-n|| / max(||a||, ||n||).

    Entry-wise ratios are dominated by fd truncation noise wherever a
    single component is ~0; the vector norm is the meaningful scale.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(build_loss, params, h=1e-3, tol=1e-4):
    """Compare reverse-mode grads of `build_loss(params)` to the fd oracle.

    Returns the worst per-parameter relative error (vector-norm form).
    """
    for p in params.values():
        p.grad = None
    loss = build_loss(params)
    T.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def loss_value():
        with T.no_grad():
            return build_loss(params).item()

    numeric = finite_difference_grads(loss_value, params, h=h)
    worst = 0.0
    for name in params:
        err = grad_relative_error(analytic[name], numeric[name])
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"
    return worst


def random_params(shapes, rng, scale=0.5):
    """Dict of float64 requires_grad tensors with the given shapes."""
    return {
        name: T.Tensor(
            rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64
        )
        for name, shape in shapes.items()
    }
