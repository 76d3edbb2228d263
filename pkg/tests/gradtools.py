"""Autograd-vs-finite-difference comparison used by several test modules."""

import numpy as np
import torch

from attrcl.verify import GradCheckReport, fd_gradient, relative_error


def check_grad(name, fn, point, step=1e-5) -> GradCheckReport:
    """``fn`` maps a float64 tensor to a scalar tensor."""
    x = torch.tensor(np.asarray(point, dtype=np.float64), requires_grad=True)
    out = fn(x)
    (analytic,) = torch.autograd.grad(out, x)

    def scalar(arr):
        with torch.no_grad():
            return float(fn(torch.from_numpy(arr)))

    numeric = fd_gradient(scalar, point, step)
    return GradCheckReport(name, relative_error(analytic.numpy(), numeric), step)
