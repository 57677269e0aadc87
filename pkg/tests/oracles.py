"""Straight-line reference implementations used as independent test oracles."""

import numpy as np

from conftest import naive_conv


def ref_batchnorm_eval(h, gamma, beta, mean, var, eps=1e-5):
    shape = (1, -1, 1, 1)
    return gamma.reshape(shape) * (h - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) + beta.reshape(shape)


def ref_backbone(net, x):
    """Eval-mode backbone via naive loops."""
    h = x
    for st, stage in zip(net.backbone.spec.stages, net.backbone.stages):
        h = naive_conv(h, stage.weight.data, stage.bias.data, st.stride, st.padding)
        if stage.gamma is not None:
            h = ref_batchnorm_eval(h, stage.gamma.data, stage.beta.data, stage.running_mean, stage.running_var)
        h = np.maximum(h, 0)
    return h


def ref_squash(s):
    n2 = np.sum(s * s, axis=-1, keepdims=True)
    return s * n2 / ((1 + n2) * np.sqrt(n2 + 1e-12))


def ref_primary(filters, biases, D1, x_b):
    """Full-extent conv written as flatten-then-matmul."""
    n = x_b.shape[0]
    dense = filters.reshape(filters.shape[0], -1)
    h = x_b.reshape(n, -1) @ dense.T + biases
    return ref_squash(h.reshape(n, -1, D1))


def ref_routing(u_hat, r):
    n, I, J, D = u_hat.shape
    b = np.zeros((n, I, J))
    for it in range(r):
        e = np.exp(b - b.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        s = np.einsum("nij,nijd->njd", c, u_hat)
        v = ref_squash(s)
        if it < r - 1:
            b = b + np.einsum("nijd,njd->nij", u_hat, v)
    return v, c


def ref_pipeline(net, x):
    x_b = ref_backbone(net, x)
    u = ref_primary(net.primary.filters.data, net.primary.biases.data, net.primary.D1, x_b)
    u_hat = np.einsum("ijdk,nik->nijd", net.caps.W.data, u)
    return ref_routing(u_hat, net.caps.r)


def mac_count_conv(h, w, c_in, c_out, k, stride, pad):
    """Count multiply-accumulates by walking every output position and tap."""
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    macs = 0
    for _ in range(c_out):
        for _i in range(oh):
            for _j in range(ow):
                for _q in range(c_in):
                    for _u in range(k):
                        for _v in range(k):
                            macs += 1
    return macs
