"""Multi-domain pre-activation ResNet with residual adapters.

Parameters live in one flat ``dict`` keyed by checkpoint names:

* ``universal/layer/<i>/filter``        shared conv banks (stem, body, projections)
* ``domain/<d>/layer/<i>/filter``       per-domain copy (finetune_all regime only)
* ``domain/<d>/layer/<i>/alpha``        adapter matrix
* ``domain/<d>/layer/<i>/gamma`` + ``shared/layer/<i>/beta``  compressed adapter
* ``domain/<d>/layer/<i>/fused``        test-time bank with the adapter folded in
* ``domain/<d>/layer/<i>/bn/<field>``   BN inside a series adapter
* ``domain/<d>/bn/<j>/<field>``         block and final BN layers
* ``domain/<d>/head/weight|bias``       classifier
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapters as ad
from .errors import ConfigError
from .rng import CounterRNG, derive_seed
from .tensor_core import (BatchNormState, batch_norm, batch_norm_backward, classifier_head,
                          classifier_head_backward, conv1x1, conv1x1_backward, conv2d,
                          conv2d_backward, dropout_backward, pool, pool_backward, relu,
                          relu_backward)

MACROS = ("early", "mid", "late")
BN_FIELDS = ("scale", "bias", "running_mean", "running_var")
DTYPES = {"single": np.float32, "double": np.float64}

REGIMES = ("finetune_all", "adapters_only", "head_only", "gammas_only")


@dataclass(frozen=True)
class NetworkConfig:
    macro_widths: tuple = (16, 32, 64)
    blocks_per_macro: int = 2
    filter_size: int = 3
    in_channels: int = 3
    precision: str = "single"

    def __post_init__(self):
        if len(self.macro_widths) != 3 or min(self.macro_widths) < 1:
            raise ConfigError(f"need three positive macro widths, got {self.macro_widths}")
        if self.blocks_per_macro < 1:
            raise ConfigError("blocks_per_macro must be positive")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError("filter size must be odd")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")

    @classmethod
    def full_scale(cls, **kw) -> "NetworkConfig":
        """ResNet-26: widths 64/128/256, four blocks per macro."""
        return cls(macro_widths=(64, 128, 256), blocks_per_macro=4, **kw)

    @property
    def dtype(self):
        return DTYPES[self.precision]


@dataclass(frozen=True)
class PlacementConfig:
    macros: tuple = MACROS
    within: str = "both"            # both | second
    topology: str = ad.PARALLEL
    dropout: float | None = None    # rate applied before the second adapter of each block
    series_bn: bool = True

    def __post_init__(self):
        if not self.macros or any(m not in MACROS for m in self.macros):
            raise ConfigError(f"macro selection must be a non-empty subset of {MACROS}")
        if self.within not in ("both", "second"):
            raise ConfigError("within must be 'both' or 'second'")
        if self.topology not in ad.TOPOLOGIES:
            raise ConfigError(f"topology must be one of {ad.TOPOLOGIES}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")

    def adapts(self, layer: "ConvLayer") -> bool:
        if layer.kind not in ("conv1", "conv2"):
            return False
        if MACROS[layer.macro] not in self.macros:
            return False
        return self.within == "both" or layer.kind == "conv2"


@dataclass(frozen=True)
class ConvLayer:
    index: int
    kind: str       # stem | conv1 | conv2 | proj
    cin: int
    cout: int
    L: int
    macro: int = -1
    block: int = -1

    @property
    def size(self) -> int:
        return self.L * self.L * self.cin * self.cout


@dataclass
class Block:
    macro: int
    cin: int
    cout: int
    downsample: bool
    conv1: int
    conv2: int
    proj: int | None
    bn1: int
    bn2: int


@dataclass
class DomainInfo:
    num_classes: int
    placement: PlacementConfig | None = None


@dataclass
class BudgetReport:
    weight_layers: int
    macro_widths: tuple
    universal: int
    domains: dict = field(default_factory=dict)     # id -> {adapters, bn, head, filters, total}
    shared: int = 0                                 # compressed bases shared by domains
    adapted_layers: dict = field(default_factory=dict)

    @property
    def budget_factor(self) -> float:
        extra = sum(d["total"] for d in self.domains.values()) + self.shared
        return 1.0 + extra / self.universal

    def lines(self) -> list:
        out = [f"weight_layers = {self.weight_layers}",
               f"macro_widths = {'/'.join(str(w) for w in self.macro_widths)}",
               f"universal_params = {self.universal}",
               f"shared_params = {self.shared}"]
        for d, c in sorted(self.domains.items()):
            out.append(f"domain {d}: " + ", ".join(f"{k}={v}" for k, v in c.items()))
        out.append(f"budget_factor = {self.budget_factor:.4f}")
        return out


def build_layers(cfg: NetworkConfig):
    """Conv layer descriptors and residual blocks in evaluation order."""
    L = cfg.filter_size
    layers = [ConvLayer(0, "stem", cfg.in_channels, cfg.macro_widths[0], L)]
    blocks = []
    cin = cfg.macro_widths[0]
    bn = 0
    for m, w in enumerate(cfg.macro_widths):
        for b in range(cfg.blocks_per_macro):
            first = b == 0
            c_in = cin if first else w
            i1 = len(layers)
            layers.append(ConvLayer(i1, "conv1", c_in, w, L, m, b))
            layers.append(ConvLayer(i1 + 1, "conv2", w, w, L, m, b))
            proj = None
            if c_in != w:
                proj = len(layers)
                layers.append(ConvLayer(proj, "proj", c_in, w, 1, m, b))
            blocks.append(Block(m, c_in, w, first and m > 0, i1, i1 + 1, proj, bn, bn + 1))
            bn += 2
        cin = w
    return layers, blocks, bn


class Network:
    def __init__(self, cfg: NetworkConfig, placement: PlacementConfig | None = None):
        self.cfg = cfg
        self.default_placement = placement if placement is not None else PlacementConfig()
        self.layers, self.blocks, nbn = build_layers(cfg)
        self.final_bn = nbn
        self.params: dict = {}
        self.domains: dict = {}
        self.base_domain: str | None = None
        self._tape = None

    # ------------------------------------------------------------- structure

    @property
    def weight_layers(self) -> int:
        """Stem + body convs + classifier; projection shortcuts are not counted."""
        return 1 + sum(1 for l in self.layers if l.kind in ("conv1", "conv2")) + 1

    @property
    def dtype(self):
        return self.cfg.dtype

    def adapted_layers(self, placement: PlacementConfig | None) -> list:
        if placement is None:
            return []
        return [l for l in self.layers if placement.adapts(l)]

    def bn_channels(self) -> list:
        ch = []
        for blk in self.blocks:
            ch += [blk.cin, blk.cout]
        return ch + [self.cfg.macro_widths[-1]]

    # ------------------------------------------------------------ parameters

    def init_universal(self, seed: int) -> None:
        rng = CounterRNG(derive_seed(seed, 0x57))
        for l in self.layers:
            std = np.sqrt(2.0 / (l.L * l.L * l.cin))
            self.params[f"universal/layer/{l.index}/filter"] = (
                rng.normal(l.size) * std).astype(self.dtype).reshape(l.L, l.L, l.cin, l.cout)

    def _init_head(self, domain: str, num_classes: int, seed: int) -> None:
        c = self.cfg.macro_widths[-1]
        rng = CounterRNG(derive_seed(seed, 0x4EAD))
        self.params[f"domain/{domain}/head/weight"] = (
            rng.normal(c * num_classes) * 0.01).astype(self.dtype).reshape(c, num_classes)
        self.params[f"domain/{domain}/head/bias"] = np.zeros(num_classes, self.dtype)

    def _init_bn(self, prefix: str, channels: int) -> None:
        st = BatchNormState.fresh(channels, self.dtype)
        for k in BN_FIELDS:
            self.params[f"{prefix}/{k}"] = getattr(st, k)

    def add_domain(self, domain: str, num_classes: int, placement: PlacementConfig | None = None,
                   copy_bn_from: str | None = None, copy_filters: bool = False,
                   seed: int = 0) -> None:
        """Register a domain with zero adapters, BN copied from ``copy_bn_from`` and a fresh head."""
        domain = str(domain)
        if domain in self.domains:
            raise ConfigError(f"domain {domain!r} already exists")
        if not self.params:
            self.init_universal(seed)
        if self.base_domain is None:
            self.base_domain = domain
        for j, c in enumerate(self.bn_channels()):
            prefix = f"domain/{domain}/bn/{j}"
            if copy_bn_from is not None:
                for k in BN_FIELDS:
                    self.params[f"{prefix}/{k}"] = self.params[f"domain/{copy_bn_from}/bn/{j}/{k}"].copy()
            else:
                self._init_bn(prefix, c)
        for l in self.adapted_layers(placement):
            shape = ad.adapter_shape(placement.topology, l.cin, l.cout)
            self.params[f"domain/{domain}/layer/{l.index}/alpha"] = np.zeros(shape, self.dtype)
            if placement.topology == ad.SERIES and placement.series_bn:
                self._init_bn(f"domain/{domain}/layer/{l.index}/bn", l.cout)
        if copy_filters:
            for l in self.layers:
                self.params[f"domain/{domain}/layer/{l.index}/filter"] = \
                    self.params[f"universal/layer/{l.index}/filter"].copy()
        self._init_head(domain, num_classes, derive_seed(seed, len(self.domains)))
        self.domains[domain] = DomainInfo(num_classes, placement)

    def filter(self, i: int, domain: str) -> np.ndarray:
        own = self.params.get(f"domain/{domain}/layer/{i}/filter")
        return own if own is not None else self.params[f"universal/layer/{i}/filter"]

    def alpha(self, i: int, domain: str):
        a = self.params.get(f"domain/{domain}/layer/{i}/alpha")
        if a is not None:
            return a
        g = self.params.get(f"domain/{domain}/layer/{i}/gamma")
        if g is not None:
            return self.params[f"shared/layer/{i}/beta"] @ g.T
        return None

    def bn_state(self, prefix: str):
        if f"{prefix}/scale" not in self.params:
            return None
        return BatchNormState(*(self.params[f"{prefix}/{k}"] for k in BN_FIELDS))

    def _domain(self, domain) -> tuple:
        domain = str(domain)
        if domain not in self.domains:
            raise ConfigError(f"unknown domain {domain!r}")
        return domain, self.domains[domain]

    # ---------------------------------------------------------------- forward

    def _conv_unit(self, layer: ConvLayer, a, domain, placement, train, drop_rng):
        i, pad = layer.index, layer.L // 2
        fused = self.params.get(f"domain/{domain}/layer/{i}/fused")
        if fused is not None:
            return conv2d(a, fused, 1, pad), ("plain", layer, a, fused)
        f = self.filter(i, domain)
        alpha = self.alpha(i, domain)
        if alpha is None:
            return conv2d(a, f, 1, pad), ("plain", layer, a, f)
        mask = None
        rate = placement.dropout if layer.kind == "conv2" else None
        if placement.topology == ad.PARALLEL:
            xa = a
            if train and rate:
                mask = drop_rng.bernoulli_keep(a.shape, 1.0 - rate).astype(a.dtype) / (1.0 - rate)
                xa = a * mask
            out, cache = ad.parallel_forward(a, f, alpha, adapter_input=xa)
            return out, ("parallel", layer, cache, mask)
        bn = self.bn_state(f"domain/{domain}/layer/{i}/bn")
        if train and rate:
            mask = drop_rng.bernoulli_keep(a.shape[:3] + (layer.cout,), 1.0 - rate).astype(a.dtype) / (1.0 - rate)
        out, cache = ad.series_forward(a, f, alpha, bn, train=train, branch_mask=mask)
        return out, ("series", layer, cache, mask)

    def forward(self, x, domain, train: bool = False, drop_seed: int = 0,
                keep_tape: bool = False, return_features: bool = False):
        """Logits for ``x`` routed through ``domain``'s adapters, BN and head."""
        domain, info = self._domain(domain)
        x = np.asarray(x, dtype=self.dtype)
        placement = info.placement
        drop_rng = CounterRNG(drop_seed)
        tape = []
        feats = []
        stem = self.layers[0]
        h = conv2d(x, self.filter(0, domain), 1, stem.L // 2)
        tape.append(("stem", x))
        for blk in self.blocks:
            xin_shape = h.shape
            if blk.downsample:
                h = pool(h, "avg2x2")
            bn1 = self.bn_state(f"domain/{domain}/bn/{blk.bn1}")
            n1, c_bn1 = batch_norm(h, bn1, train)
            a1 = relu(n1)
            if blk.proj is not None:
                skip = conv1x1(a1, self.filter(blk.proj, domain)[0, 0])
            else:
                skip = h
            c1, cu1 = self._conv_unit(self.layers[blk.conv1], a1, domain, placement, train, drop_rng)
            bn2 = self.bn_state(f"domain/{domain}/bn/{blk.bn2}")
            n2, c_bn2 = batch_norm(c1, bn2, train)
            a2 = relu(n2)
            c2, cu2 = self._conv_unit(self.layers[blk.conv2], a2, domain, placement, train, drop_rng)
            tape.append(("block", blk, xin_shape, h, c_bn1, n1, a1, cu1, c_bn2, n2, cu2))
            h = skip + c2
            feats.append(h)
        bnf = self.bn_state(f"domain/{domain}/bn/{self.final_bn}")
        nf, c_bnf = batch_norm(h, bnf, train)
        af = relu(nf)
        pooled = pool(af, "global_avg")
        tape.append(("final", h.shape, c_bnf, nf, af.shape, pooled))
        logits, _, _ = classifier_head(pooled, self.params[f"domain/{domain}/head/weight"],
                                       self.params[f"domain/{domain}/head/bias"])
        self._tape = (domain, tape) if keep_tape else None
        if return_features:
            return logits, feats + [pooled]
        return logits

    def features(self, x, domain) -> np.ndarray:
        """Eval-mode pooled features feeding the classifier."""
        return self.forward(x, domain, train=False, return_features=True)[1][-1]

    # --------------------------------------------------------------- backward

    def loss_and_grads(self, x, labels, domain, trainable, train: bool = True, drop_seed: int = 0):
        """Mean cross-entropy and gradients for the names in ``trainable``."""
        domain, _ = self._domain(domain)
        if self.fused_layers(domain):
            raise ConfigError(f"domain {domain!r} is fused for inference; unfuse it before training")
        self.forward(x, domain, train=train, drop_seed=drop_seed, keep_tape=True)
        _, tape = self._tape
        pooled = tape[-1][-1]
        wname, bname = f"domain/{domain}/head/weight", f"domain/{domain}/head/bias"
        logits, loss, hcache = classifier_head(pooled, self.params[wname], self.params[bname], labels)
        trainable = set(trainable)
        grads = {}
        dpooled, dw, db = classifier_head_backward(hcache)
        if wname in trainable:
            grads[wname], grads[bname] = dw, db
        if self._needs_trunk(domain, trainable):
            self._backward_trunk(dpooled, domain, trainable, grads)
        self._tape = None
        return loss, logits, grads

    def _needs_trunk(self, domain, trainable) -> bool:
        head = (f"domain/{domain}/head/weight", f"domain/{domain}/head/bias")
        return any(n not in head for n in trainable)

    def _bn_grads(self, prefix, cache, dout, trainable, grads):
        dx, ds, dbias = batch_norm_backward(dout, cache)
        if f"{prefix}/scale" in trainable:
            grads[f"{prefix}/scale"] = ds
            grads[f"{prefix}/bias"] = dbias
        return dx

    def _filter_name(self, i, domain):
        own = f"domain/{domain}/layer/{i}/filter"
        return own if own in self.params else f"universal/layer/{i}/filter"

    def _alpha_grad(self, i, domain, dalpha, trainable, grads):
        an = f"domain/{domain}/layer/{i}/alpha"
        if an in trainable:
            grads[an] = dalpha
            return
        gn = f"domain/{domain}/layer/{i}/gamma"
        if gn in trainable:
            grads[gn] = dalpha.T @ self.params[f"shared/layer/{i}/beta"]

    def _alpha_trainable(self, i, domain, trainable) -> bool:
        return (f"domain/{domain}/layer/{i}/alpha" in trainable
                or f"domain/{domain}/layer/{i}/gamma" in trainable)

    def _conv_unit_backward(self, dout, unit, domain, trainable, grads, need_dx=True):
        kind, layer = unit[0], unit[1]
        fname = self._filter_name(layer.index, domain)
        need_df = fname in trainable
        if kind == "plain":
            _, _, a, f = unit
            dx, df = conv2d_backward(dout, a, f, 1, layer.L // 2, need_dx, need_df)
        elif kind == "parallel":
            _, _, cache, mask = unit
            need_da = self._alpha_trainable(layer.index, domain, trainable)
            dx, dxa, df, dalpha = ad.parallel_backward(dout, cache, need_dx, need_df, need_da)
            if need_dx:
                dx = dx + dropout_backward(dxa, mask)
            if need_da:
                self._alpha_grad(layer.index, domain, dalpha, trainable, grads)
        else:
            _, _, cache, mask = unit
            need_da = self._alpha_trainable(layer.index, domain, trainable)
            dx, df, dalpha, dscale, dbias = ad.series_backward(dout, cache, need_dx, need_df, need_da)
            if need_da:
                self._alpha_grad(layer.index, domain, dalpha, trainable, grads)
            prefix = f"domain/{domain}/layer/{layer.index}/bn"
            if dscale is not None and f"{prefix}/scale" in trainable:
                grads[f"{prefix}/scale"] = dscale
                grads[f"{prefix}/bias"] = dbias
        if need_df:
            grads[fname] = df
        return dx

    def _backward_trunk(self, dpooled, domain, trainable, grads):
        _, tape = self._tape
        _, h_shape, c_bnf, nf, af_shape, _ = tape[-1]
        dh = pool_backward(dpooled, af_shape, "global_avg")
        dh = relu_backward(dh, nf)
        dh = self._bn_grads(f"domain/{domain}/bn/{self.final_bn}", c_bnf, dh, trainable, grads)
        for entry in reversed(tape[1:-1]):
            _, blk, xin_shape, h, c_bn1, n1, a1, cu1, c_bn2, n2, cu2 = entry
            dc2 = dh
            da2 = self._conv_unit_backward(dc2, cu2, domain, trainable, grads)
            dn2 = relu_backward(da2, n2)
            dc1 = self._bn_grads(f"domain/{domain}/bn/{blk.bn2}", c_bn2, dn2, trainable, grads)
            da1 = self._conv_unit_backward(dc1, cu1, domain, trainable, grads)
            if blk.proj is not None:
                pname = self._filter_name(blk.proj, domain)
                P = self.filter(blk.proj, domain)[0, 0]
                dskip_a1, dP = conv1x1_backward(dh, a1, P, need_dA=pname in trainable)
                if dP is not None:
                    grads[pname] = dP[None, None]
                da1 = da1 + dskip_a1
                dhin = 0.0
            else:
                dhin = dh
            dn1 = relu_backward(da1, n1)
            dh = dhin + self._bn_grads(f"domain/{domain}/bn/{blk.bn1}", c_bn1, dn1, trainable, grads)
            if blk.downsample:
                dh = pool_backward(dh, xin_shape, "avg2x2")
        sname = self._filter_name(0, domain)
        if sname in trainable:
            x = tape[0][1]
            grads[sname] = conv2d_backward(dh, x, self.filter(0, domain), 1,
                                           self.layers[0].L // 2, need_dx=False)[1]

    # ------------------------------------------------------------- accounting

    def fused_layers(self, domain) -> list:
        return [l.index for l in self.layers if f"domain/{domain}/layer/{l.index}/fused" in self.params]

    def universal_names(self) -> list:
        return sorted(n for n in self.params if n.startswith("universal/"))

    def domain_names(self, domain) -> list:
        p = f"domain/{domain}/"
        return sorted(n for n in self.params if n.startswith(p))

    def digest(self, prefix: str = "universal/") -> str:
        h = hashlib.sha256()
        for n in sorted(k for k in self.params if k.startswith(prefix)):
            a = np.ascontiguousarray(self.params[n])
            h.update(n.encode())
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def clone(self) -> "Network":
        other = Network(self.cfg, self.default_placement)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.domains = {k: replace(v) for k, v in self.domains.items()}
        other.base_domain = self.base_domain
        return other


def fuse_domain(net: Network, domain) -> list:
    """Fold every adapter of ``domain`` into a ``fused`` bank used by the forward pass.

    The universal filters and the adapters stay in place so ``unfuse_domain`` can
    verify the recovery.  Series adapters fuse only without their internal BN.
    """
    domain, info = net._domain(domain)
    pl = info.placement
    if pl is None:
        raise ConfigError(f"domain {domain!r} has no adapters to fuse")
    if pl.topology == ad.SERIES and pl.series_bn:
        raise ConfigError("series adapters with a batch norm carry a bias and cannot be fused")
    if net.fused_layers(domain):
        raise ConfigError(f"domain {domain!r} is already fused")
    done = []
    for l in net.adapted_layers(pl):
        f, alpha = net.filter(l.index, domain), net.alpha(l.index, domain)
        g = ad.fuse_parallel(f, alpha) if pl.topology == ad.PARALLEL else ad.fuse_series(f, alpha)
        net.params[f"domain/{domain}/layer/{l.index}/fused"] = g.astype(net.dtype)
        done.append(l.index)
    return done


def unfuse_domain(net: Network, domain) -> list:
    """Undo ``fuse_domain``: recover each host bank and check it against the stored one.

    Parallel recovery must agree to within one rounding of ``f + alpha``; series
    recovery goes through a matrix inverse and is checked to 1e-6 relative.
    Mismatches raise ``NumericError``.  The stored banks are never overwritten, so
    a fuse/unfuse pair leaves the checkpoint bitwise unchanged.
    """
    from .errors import NumericError

    domain, info = net._domain(domain)
    fused = net.fused_layers(domain)
    if not fused:
        raise ConfigError(f"domain {domain!r} is not fused")
    for i in fused:
        name = f"domain/{domain}/layer/{i}/fused"
        g, alpha, f = net.params[name], net.alpha(i, domain), net.filter(i, domain)
        if info.placement.topology == ad.PARALLEL:
            back = ad.unfuse_parallel(g, alpha)
            c = f.shape[0] // 2
            bound = np.spacing(np.abs(f[c, c]) + np.abs(alpha))
            off = np.abs(back - f)
            centre_ok = np.all(off[c, c] <= bound)
            off[c, c] = 0
            if not centre_ok or np.any(off):
                raise NumericError(f"layer {i}: unfused bank differs from the stored host bank")
        else:
            back = ad.unfuse_series(g, alpha)
            err = np.abs(back - f).max() / max(np.abs(f).max(), np.finfo(float).tiny)
            if err > 1e-6:
                raise NumericError(f"layer {i}: unfused bank off by {err:.3g} relative")
        del net.params[name]
    return fused


def build_network(cfg: NetworkConfig, placement: PlacementConfig | None = None) -> Network:
    return Network(cfg, placement)


def _is_learned(name: str) -> bool:
    return not (name.endswith("/running_mean") or name.endswith("/running_var"))


def partition_params(net: Network, domain, regime: str):
    """Split parameter names into ``(trainable, frozen)`` for a training regime.

    BN running statistics are buffers and belong to neither set.
    """
    domain, _ = net._domain(domain)
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    learned = [n for n in net.params if _is_learned(n)]
    mine = [n for n in net.domain_names(domain) if _is_learned(n)]
    head = [f"domain/{domain}/head/weight", f"domain/{domain}/head/bias"]
    if regime == "head_only":
        train = head
    elif regime == "gammas_only":
        train = [n for n in mine if n.endswith("/gamma")]
    elif regime == "adapters_only":
        train = [n for n in mine if not n.endswith("/filter")]
    else:
        train = list(mine)
        if domain == net.base_domain:
            train += [n for n in net.universal_names()
                      if f"domain/{domain}/layer/{n.split('/')[2]}/filter" not in net.params]
    train = sorted(train)
    tset = set(train)
    frozen = sorted(n for n in learned if n not in tset)
    return train, frozen


def _size(net: Network, names) -> int:
    return int(sum(net.params[n].size for n in names))


def adapter_param_count(net: Network, placement: PlacementConfig | None) -> int:
    """Adapter parameters a domain with ``placement`` would carry (excluding series-adapter BN)."""
    total = 0
    for l in net.adapted_layers(placement):
        shape = ad.adapter_shape(placement.topology, l.cin, l.cout)
        total += shape[0] * shape[1]
    return total


def count_params(net: Network, placement: PlacementConfig | None = None) -> BudgetReport:
    """Exact parameter budget of ``net`` (BN running statistics excluded).

    With ``placement`` given, ``adapted_layers`` also lists the per-layer adapter
    sizes that placement would add, without requiring a trained domain.
    """
    uni = _size(net, net.universal_names())
    report = BudgetReport(net.weight_layers, net.cfg.macro_widths, uni)
    report.shared = _size(net, [n for n in net.params if n.startswith("shared/")])
    for d in net.domains:
        names = [n for n in net.domain_names(d) if _is_learned(n)]
        ad_names = [n for n in names if n.endswith("/alpha") or n.endswith("/gamma")]
        bn = [n for n in names if "/bn/" in n]
        head = [n for n in names if "/head/" in n]
        filt = [n for n in names if n.endswith("/filter") or n.endswith("/fused")]
        c = {"adapters": _size(net, ad_names), "bn": _size(net, bn),
             "head": _size(net, head), "filters": _size(net, filt)}
        c["total"] = sum(c.values())
        report.domains[d] = c
    if placement is not None:
        for l in net.adapted_layers(placement):
            shape = ad.adapter_shape(placement.topology, l.cin, l.cout)
            report.adapted_layers[l.index] = shape[0] * shape[1]
    return report
