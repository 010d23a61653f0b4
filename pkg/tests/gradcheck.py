"""Central-difference check over every entry of a set of parameter tensors."""
import numpy as np

from agtcnsd import autodiff as ad


def param_grad_errors(named, loss_fn, step=1e-6):
    """Max relative error per parameter, same formula as ``finite_difference_check``.

    ``loss_fn()`` must rebuild the scalar loss from the current parameter values.
    """
    for t in named.values():
        t.grad = None
    ad.backward(loss_fn())
    errors = {}
    for name, t in named.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        base = t.data.copy()
        numeric = np.empty(base.size)
        with ad.no_grad():
            for i in range(base.size):
                plus = base.copy().reshape(-1)
                plus[i] += step
                t.data = plus.reshape(base.shape)
                fp = loss_fn().item()
                minus = base.copy().reshape(-1)
                minus[i] -= step
                t.data = minus.reshape(base.shape)
                fm = loss_fn().item()
                numeric[i] = (fp - fm) / (2 * step)
        t.data = base
        numeric = numeric.reshape(base.shape)
        errors[name] = float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
    return errors
