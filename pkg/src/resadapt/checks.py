"""Randomized finite-difference suite over every differentiable op and the full network."""
from __future__ import annotations

import numpy as np

from . import adapters as ad
from .gradcheck import GradCheckReport, finite_diff_check
from .tensor_core import (BatchNormState, batch_norm, batch_norm_backward, classifier_head,
                          classifier_head_backward, conv1x1, conv1x1_backward, conv2d,
                          conv2d_backward, dropout_backward, pool, pool_backward, relu,
                          relu_backward)

CONV_SETTINGS = ((1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (3, 2, 0), (5, 1, 2))


def network_check(net, domain, regime, x, labels, tolerance=1e-6, name=None) -> GradCheckReport:
    """Check the mean cross-entropy gradient of every trainable parameter of ``regime``."""
    from .network import partition_params

    names = [n for n in partition_params(net, domain, regime)[0] if net.params[n].size]
    originals = [net.params[n] for n in names]

    def load(vals):
        for n, v in zip(names, vals):
            net.params[n] = v

    def fwd(*vals):
        load(vals)
        return np.array([net.loss_and_grads(x, labels, domain, [], train=True)[0]])

    def bwd(d, *vals):
        load(vals)
        grads = net.loss_and_grads(x, labels, domain, names, train=True)[2]
        return [grads[n] * d[0] for n in names]

    try:
        return finite_diff_check(fwd, bwd, [o.astype(np.float64) for o in originals],
                                 tolerance=tolerance, name=name or f"network/{regime}")
    finally:
        load(originals)


def _bn_pair(state, train):
    def fwd(x, scale, bias):
        st = state.copy()
        st.scale, st.bias = scale, bias
        return batch_norm(x, st, train)[0]

    def bwd(d, x, scale, bias):
        st = state.copy()
        st.scale, st.bias = scale, bias
        return batch_norm_backward(d, batch_norm(x, st, train)[1])
    return fwd, bwd


def _op_cases(rng, tolerance):
    def dim(lo, hi):
        return int(rng.integers(lo, hi + 1))

    def check(name, fwd, bwd, inputs, **kw):
        return finite_diff_check(fwd, bwd, inputs, tolerance=tolerance, name=name,
                                 seed=int(rng.integers(1 << 31)), **kw)

    for L, stride, pad in CONV_SETTINGS:
        for _ in range(3):
            n, h, w, ci, co = dim(1, 2), dim(L, 7), dim(L, 7), dim(1, 3), dim(1, 3)
            yield check(f"conv2d L={L} s={stride} p={pad} x={n}x{h}x{w}x{ci} cout={co}",
                        lambda x, f, s=stride, p=pad: conv2d(x, f, s, p),
                        lambda d, x, f, s=stride, p=pad: conv2d_backward(d, x, f, s, p),
                        [rng.normal(size=(n, h, w, ci)), rng.normal(size=(L, L, ci, co))])
    for stride in (1, 2):
        for _ in range(2):
            ci, co = dim(1, 4), dim(1, 4)
            yield check(f"conv1x1 s={stride} {ci}->{co}",
                        lambda x, A, s=stride: conv1x1(x, A, s),
                        lambda d, x, A, s=stride: conv1x1_backward(d, x, A, s),
                        [rng.normal(size=(2, dim(2, 5), dim(2, 5), ci)), rng.normal(size=(ci, co))])
    for train in (True, False):
        for _ in range(3):
            c = dim(1, 4)
            st = BatchNormState(np.ones(c), np.zeros(c), rng.normal(size=c), rng.uniform(0.5, 2, c))
            fwd, bwd = _bn_pair(st, train)
            yield check(f"batch_norm {'train' if train else 'eval'} C={c}", fwd, bwd,
                        [rng.normal(size=(dim(2, 3), dim(1, 3), dim(1, 3), c)),
                         rng.uniform(0.5, 1.5, c), rng.normal(size=c)])
    for kind in ("avg2x2", "global_avg"):
        for _ in range(2):
            x = rng.normal(size=(dim(1, 2), 2 * dim(1, 3), 2 * dim(1, 3), dim(1, 3)))
            yield check(f"pool {kind} {x.shape}", lambda x, k=kind: pool(x, k),
                        lambda d, x, k=kind: (pool_backward(d, x.shape, k),), [x])
    for _ in range(3):
        yield check("relu", relu, lambda d, x: (relu_backward(d, x),),
                    [rng.normal(size=(dim(1, 3), dim(1, 4), dim(1, 4), dim(1, 3)))],
                    nondiff=lambda x: [np.abs(x) < 1e-4])
    for p in (0.3, 0.5):
        shape = (2, dim(1, 4), dim(1, 4), dim(1, 3))
        mask = (rng.uniform(size=shape) >= p) / (1 - p)
        yield check(f"dropout p={p}", lambda x, m=mask: x * m,
                    lambda d, x, m=mask: (dropout_backward(d, m),), [rng.normal(size=shape)])
    for _ in range(3):
        n, c, k = dim(2, 6), dim(1, 5), dim(2, 5)
        labels = rng.integers(0, k, n)
        yield check(f"classifier loss N={n} C={c} K={k}",
                    lambda x, w, b, y=labels: np.array(classifier_head(x, w, b, y)[1]),
                    lambda d, x, w, b, y=labels: classifier_head_backward(
                        classifier_head(x, w, b, y)[2], scale=float(d)),
                    [rng.normal(size=(n, c)), rng.normal(size=(c, k)), rng.normal(size=k)])
    for use_bn in (True, False):
        for stride in (1, 2):
            c, ci = dim(1, 3), dim(1, 3)
            bn = BatchNormState.fresh(c) if use_bn else None

            def fwd(x, f, a, s=stride, bn=bn):
                return ad.series_forward(x, f, a, bn.copy() if bn else None, stride=s, train=True)[0]

            def bwd(d, x, f, a, s=stride, bn=bn):
                cache = ad.series_forward(x, f, a, bn.copy() if bn else None, stride=s, train=True)[1]
                return ad.series_backward(d, cache)[:3]
            yield check(f"series adapter bn={use_bn} s={stride}", fwd, bwd,
                        [rng.normal(size=(2, dim(3, 5), dim(3, 5), ci)),
                         rng.normal(size=(3, 3, ci, c)), rng.normal(size=(c, c))])
    for stride, pad in ((1, 1), (2, 1), (1, 0), (2, 0)):
        ci, co = dim(1, 3), dim(1, 3)

        def fwd(x, f, a, s=stride, p=pad):
            return ad.parallel_forward(x, f, a, stride=s, pad=p)[0]

        def bwd(d, x, f, a, s=stride, p=pad):
            dx, dxa, df, da = ad.parallel_backward(d, ad.parallel_forward(x, f, a, stride=s, pad=p)[1])
            return dx + dxa, df, da
        yield check(f"parallel adapter s={stride} p={pad}", fwd, bwd,
                    [rng.normal(size=(2, dim(3, 5), dim(3, 5), ci)),
                     rng.normal(size=(3, 3, ci, co)), rng.normal(size=(ci, co))])


def _network_cases(rng, tolerance):
    from .network import Network, NetworkConfig, PlacementConfig

    x = rng.normal(size=(3, 8, 8, 3))
    y = np.array([0, 1, 2])
    for topology in (ad.PARALLEL, ad.SERIES):
        net = Network(NetworkConfig((2, 4, 4), 1, precision="double"))
        net.add_domain("base", 3, seed=1)
        net.add_domain("d", 3, PlacementConfig(topology=topology), copy_bn_from="base", seed=2)
        for n in net.domain_names("d"):
            if n.endswith("/alpha") or (n.endswith("/bias") and "/bn/" in n):
                net.params[n][:] = rng.normal(size=net.params[n].shape) * 0.3
            elif n.endswith("/scale"):
                net.params[n][:] = 1 + 0.3 * rng.normal(size=net.params[n].shape)
        yield network_check(net, "d", "adapters_only", x, y, tolerance, f"network {topology} adapters")
    net = Network(NetworkConfig((2, 4, 4), 1, precision="double"))
    net.add_domain("base", 3, seed=3)
    yield network_check(net, "base", "finetune_all", x, y, tolerance, "network finetune_all")


def gradient_suite(seed: int = 0, tolerance: float = 1e-6, network: bool = True) -> list:
    """All randomized cases, ops first.  Every report carries its own pass/fail."""
    rng = np.random.default_rng(seed)
    reports = list(_op_cases(rng, tolerance))
    if network:
        reports += list(_network_cases(rng, tolerance))
    return reports
