"""Training and evaluation loops for base, per-domain and compressed-adapter training."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_io import Dataset
from .errors import ConfigError, DigestError, NumericError
from .network import Network, NetworkConfig, PlacementConfig, count_params, partition_params
from .rng import CounterRNG, derive_seed
from .tensor_core import OptimizerState, classifier_head, classifier_head_backward, sgd_step

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class WeightDecayPolicy:
    overrides: dict = field(default_factory=dict)
    tiers: tuple = ((8000, 0.002), (50000, 0.0005))
    default: float = 0.0001


def resolve_weight_decay(policy: WeightDecayPolicy, domain: str, train_size: int | None = None) -> float:
    """Explicit override first, otherwise the first tier whose size bound exceeds ``train_size``."""
    if domain in policy.overrides:
        value = float(policy.overrides[domain])
    elif train_size is None:
        raise ConfigError(f"domain {domain!r} has neither an override nor a known training-set size")
    else:
        value = policy.default
        for bound, wd in policy.tiers:
            if train_size < bound:
                value = wd
                break
    if value <= 0:
        raise ConfigError(f"resolved weight decay for {domain!r} must be positive, got {value}")
    return value


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    decay_at: tuple = (0.6, 0.8)
    decay_factor: float = 0.1
    regime: str = "adapters_only"
    weight_decay: float | None = None   # None: resolve from the policy
    policy: WeightDecayPolicy = field(default_factory=WeightDecayPolicy)
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for frac in self.decay_at:
            if epoch >= int(round(frac * self.epochs)):
                lr *= self.decay_factor
        return lr


@dataclass
class RunReport:
    domain: str
    regime: str
    rows: list = field(default_factory=list)    # (epoch, split, loss, accuracy)
    final_accuracy: float = float("nan")
    budget: dict = field(default_factory=dict)
    digest_before: str = ""
    digest_after: str = ""
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"domain": self.domain, "regime": self.regime,
               "final_accuracy": f"{self.final_accuracy:.6f}",
               "universal_digest_before": self.digest_before,
               "universal_digest_after": self.digest_after,
               "wall_clock_s": f"{self.wall_clock:.3f}"}
        out.update({f"budget.{k}": v for k, v in self.budget.items()})
        out.update({f"config.{k}": v for k, v in self.config.items()})
        for i, n in enumerate(self.notes):
            out[f"note.{i}"] = n
        return out


# ------------------------------------------------------------------ evaluation

def predict(logits: np.ndarray) -> np.ndarray:
    """Arg-max with ties going to the lowest class index."""
    return np.argmax(logits, axis=1)


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict(logits) == labels))


def eval_logits(net: Network, domain, ds: Dataset, batch: int = EVAL_BATCH) -> np.ndarray:
    out = [net.forward(ds.images[i:i + batch], domain, train=False)
           for i in range(0, len(ds), batch)]
    return np.concatenate(out) if out else np.zeros((0, 0))


def _loss_acc(logits, labels) -> tuple:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels.astype(np.int64)].mean())
    return loss, accuracy(logits, labels)


def evaluate(net: Network, domain, ds: Dataset) -> float:
    """Top-1 accuracy in eval mode."""
    return accuracy(eval_logits(net, domain, ds), ds.labels)


# -------------------------------------------------------------------- training

def _decay_map(net: Network, trainable, wd: float, regime: str) -> dict:
    out = {}
    for n in trainable:
        if n.endswith("/alpha") or n.endswith("/gamma") or n.endswith("/filter") \
                or n.endswith("/head/weight"):
            out[n] = wd
    return out


def _batches(n: int, batch: int, seed: int, epoch: int):
    perm = CounterRNG(derive_seed(seed, 0xE90C, epoch)).permutation(n)
    for b, i in enumerate(range(0, n, batch)):
        yield b, perm[i:i + batch]


def _fit(net: Network, domain: str, train: Dataset, val: Dataset | None, cfg: TrainConfig,
         trainable, wd: float, report: RunReport) -> None:
    opt = OptimizerState(cfg.lr, cfg.momentum, _decay_map(net, trainable, wd, cfg.regime))
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.lr_at(epoch)
        tot_loss = tot_hit = seen = 0.0
        for b, idx in _batches(len(train), cfg.batch_size, cfg.seed, epoch):
            xb, yb = train.images[idx], train.labels[idx]
            try:
                loss, logits, grads = net.loss_and_grads(
                    xb, yb, domain, trainable, train=True,
                    drop_seed=derive_seed(cfg.seed, 0xD50, epoch, b))
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b} "
                                   f"(lr {opt.learning_rate:g}): {exc}") from exc
            sgd_step(net.params, grads, opt)
            tot_loss += loss * len(idx)
            tot_hit += np.sum(predict(logits) == yb)
            seen += len(idx)
        report.rows.append((epoch, "train", tot_loss / seen, tot_hit / seen))
        if val is not None:
            report.rows.append((epoch, "val", *_loss_acc(eval_logits(net, domain, val), val.labels)))
        log.info("domain %s epoch %d: %s", domain, epoch, report.rows[-1])


def _fit_head(net: Network, domain: str, train: Dataset, val: Dataset | None, cfg: TrainConfig,
              wd: float, report: RunReport) -> None:
    """Head-only training on cached eval-mode features of the frozen trunk."""
    feats = np.concatenate([net.features(train.images[i:i + EVAL_BATCH], domain)
                            for i in range(0, len(train), EVAL_BATCH)])
    vfeats = None
    if val is not None:
        vfeats = np.concatenate([net.features(val.images[i:i + EVAL_BATCH], domain)
                                 for i in range(0, len(val), EVAL_BATCH)])
    wn, bn = f"domain/{domain}/head/weight", f"domain/{domain}/head/bias"
    opt = OptimizerState(cfg.lr, cfg.momentum, {wn: wd})
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.lr_at(epoch)
        tot_loss = tot_hit = seen = 0.0
        for _, idx in _batches(len(train), cfg.batch_size, cfg.seed, epoch):
            yb = train.labels[idx]
            logits, loss, cache = classifier_head(feats[idx], net.params[wn], net.params[bn], yb)
            _, dw, db = classifier_head_backward(cache)
            sgd_step(net.params, {wn: dw, bn: db}, opt)
            tot_loss += loss * len(idx)
            tot_hit += np.sum(predict(logits) == yb)
            seen += len(idx)
        report.rows.append((epoch, "train", tot_loss / seen, tot_hit / seen))
        if vfeats is not None:
            logits = vfeats @ net.params[wn] + net.params[bn]
            report.rows.append((epoch, "val", *_loss_acc(logits, val.labels)))


def _finish(net, domain, report, val, train, t0, before, check_prefixes):
    report.digest_before = before["universal/"]
    report.digest_after = net.digest("universal/")
    for prefix, digest in before.items():
        if prefix in check_prefixes and net.digest(prefix) != digest:
            raise DigestError(f"frozen parameters under {prefix!r} changed during {report.regime}")
    report.final_accuracy = evaluate(net, domain, val if val is not None else train)
    budget = count_params(net)
    report.budget = {"universal": budget.universal, "shared": budget.shared,
                     "budget_factor": f"{budget.budget_factor:.4f}", **budget.domains.get(domain, {})}
    report.wall_clock = time.perf_counter() - t0


def _cfg_dict(cfg: TrainConfig, **extra) -> dict:
    d = asdict(cfg)
    pol = d.pop("policy")
    d["policy.overrides"] = pol["overrides"]
    d["policy.tiers"] = pol["tiers"]
    d["policy.default"] = pol["default"]
    d.update(extra)
    return d


def train_base(train: Dataset, cfg: TrainConfig, net_cfg: NetworkConfig | None = None,
               val: Dataset | None = None, domain: str = "0",
               placement: PlacementConfig | None = None) -> tuple:
    """Train universal filters plus the base domain's BN and head from scratch."""
    t0 = time.perf_counter()
    net = Network(net_cfg or NetworkConfig(), placement)
    net.add_domain(domain, train.num_classes, None, seed=cfg.seed)
    trainable, _ = partition_params(net, domain, "finetune_all")
    wd = cfg.weight_decay if cfg.weight_decay is not None else 5e-4
    report = RunReport(domain, "base", config=_cfg_dict(cfg, weight_decay=wd))
    before = {"universal/": net.digest("universal/")}
    _fit(net, domain, train, val, cfg, trainable, wd, report)
    _finish(net, domain, report, val, train, t0, before, ())
    return net, report


def train_domain(net: Network, domain: str, train: Dataset, cfg: TrainConfig,
                 val: Dataset | None = None, placement: PlacementConfig | None = None) -> RunReport:
    """Add ``domain`` to ``net`` (zero adapters, BN copied from the base) and train it.

    ``regime`` in ``cfg`` decides what moves: adapters_only, head_only or finetune_all
    (a private copy of every filter).  Universal filters are digest-checked.
    """
    t0 = time.perf_counter()
    domain = str(domain)
    regime = cfg.regime
    if regime not in ("adapters_only", "head_only", "finetune_all"):
        raise ConfigError(f"train_domain does not support regime {regime!r}")
    if net.base_domain is None:
        raise ConfigError("network has no base domain; train the base first")
    if domain not in net.domains:
        pl = (placement or net.default_placement) if regime == "adapters_only" else None
        net.add_domain(domain, train.num_classes, pl, copy_bn_from=net.base_domain,
                       copy_filters=regime == "finetune_all", seed=derive_seed(cfg.seed, 0xD0))
    wd = cfg.weight_decay
    if wd is None:
        wd = resolve_weight_decay(cfg.policy, domain, len(train))
    trainable, _ = partition_params(net, domain, regime)
    report = RunReport(domain, regime, config=_cfg_dict(cfg, weight_decay=wd))
    others = [d for d in net.domains if d != domain]
    before = {"universal/": net.digest("universal/"), "shared/": net.digest("shared/")}
    before.update({f"domain/{d}/": net.digest(f"domain/{d}/") for d in others})
    if regime == "head_only":
        _fit_head(net, domain, train, val, cfg, wd, report)
    else:
        _fit(net, domain, train, val, cfg, trainable, wd, report)
    _finish(net, domain, report, val, train, t0, before, tuple(before))
    return report


def finetune_gammas(net: Network, datasets: dict, cfg: TrainConfig, vals: dict | None = None) -> dict:
    """Fine-tune each domain's ``gamma`` factors with the shared ``beta`` frozen.

    ``datasets`` maps domain id to its training set.  BN running statistics keep
    adapting (train-mode forward); head and BN affine parameters stay fixed.
    """
    reports = {}
    vals = vals or {}
    for domain, train in datasets.items():
        t0 = time.perf_counter()
        domain = str(domain)
        trainable, _ = partition_params(net, domain, "gammas_only")
        if not trainable:
            raise ConfigError(f"domain {domain!r} has no compressed adapters")
        wd = cfg.weight_decay
        if wd is None:
            wd = resolve_weight_decay(cfg.policy, domain, len(train))
        report = RunReport(domain, "finetune_gamma", config=_cfg_dict(cfg, weight_decay=wd),
                           notes=["BN running statistics adapt during gamma fine-tuning"])
        before = {"universal/": net.digest("universal/"), "shared/": net.digest("shared/")}
        _fit(net, domain, train, vals.get(domain), cfg, trainable, wd, report)
        _finish(net, domain, report, vals.get(domain), train, t0, before, tuple(before))
        reports[domain] = report
    return reports
