"""Pure-numpy row kernels. Reference implementation and fallback for ``_ckernels``.

All functions take 2-D float64 arrays laid out as (rows, features) and reduce
over the last axis.
"""
import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_bwd(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    gh = g * gamma
    gx = (gh - gh.mean(axis=1, keepdims=True)
          - xhat * (gh * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return gx, ggamma, gbeta


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def gelu_bwd(x, g):
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
