"""Command-line entry point: ``resadapt <command> [flags]``.

Exit status: 0 success, 1 usage or configuration error, 2 numeric or validation failure.
Option precedence: command-line flag, then ``--config`` file, then the built-in default.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DigestError, FormatError, NumericError
from .network import MACROS, NetworkConfig, PlacementConfig

log = logging.getLogger("resadapt")

MODEL = "model.mdck"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ----------------------------------------------------------------- options

def _onoff_float(v: str):
    return None if str(v).lower() in ("off", "none") else float(v)


def _auto_float(v: str):
    return "auto" if str(v).lower() == "auto" else float(v)


def _rank(v: str):
    return v if v in ("half", "full") else int(v)


def _ints(v: str) -> tuple:
    return tuple(int(t) for t in str(v).replace("/", ",").split(",") if t.strip())


def _names(v: str) -> tuple:
    return tuple(t.strip() for t in str(v).split(",") if t.strip())


# dest -> (converter, default, choices)
OPTIONS = {
    "seed": (int, 0, None),
    "precision": (str, "single", ("single", "double")),
    "epochs": (int, 10, None),
    "batch_size": (int, 64, None),
    "lr": (float, 0.1, None),
    "momentum": (float, 0.9, None),
    "widths": (_ints, (16, 32, 64), None),
    "blocks": (int, 2, None),
    "filter_size": (int, 3, None),
    "regime": (str, "adapters_only", ("adapters_only", "head_only", "finetune_all")),
    "topology": (str, "parallel", ("series", "parallel")),
    "placement": (_names, ("all",), None),
    "within": (str, "both", ("both", "second")),
    "wd": (_auto_float, "auto", None),
    "base_wd": (float, 5e-4, None),
    "dropout": (_onoff_float, None, None),
    "series_bn": (str, "on", ("on", "off")),
    "fraction": (float, 1.0, None),
    "rank": (_rank, "half", None),
    "tolerance": (float, 1e-6, None),
    "num_classes": (int, 5, None),
    "per_class": (int, 100, None),
    "size": (int, 16, None),
    "channels": (int, 3, None),
    "palette": (float, 0.0, None),
    "freq": (float, 3.0, None),
    "noise": (float, 0.1, None),
    "name": (str, "synthetic", None),
}


def _add(p, *names, **kw):
    dest = names[0].lstrip("-").replace("-", "_")
    conv, default, choices = OPTIONS[dest]
    kw.setdefault("help", "")
    kw["help"] += f" (default: {default if not isinstance(default, tuple) else ','.join(map(str, default))})"
    p.add_argument(*names, dest=dest, default=None, metavar=kw.pop("metavar", dest.upper()), **kw)


def resolve(args, keys) -> dict:
    """Apply flag > config file > default to each of ``keys``."""
    from .data_io import read_key_values

    cfg = {}
    if args.config:
        cfg = {k.replace("-", "_"): v for k, v in read_key_values(args.config).items()}
        unknown = set(cfg) - set(OPTIONS)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")
    out = {}
    for k in keys:
        conv, default, choices = OPTIONS[k]
        raw = getattr(args, k, None)
        if raw is None:
            raw = cfg.get(k)
        if raw is None:
            out[k] = default
            continue
        try:
            val = conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value {raw!r} for {k}: {exc}") from exc
        if choices is not None and val not in choices:
            raise UsageError(f"{k} must be one of {', '.join(choices)}, got {val!r}")
        out[k] = val
    return out


def explicit(args, key) -> bool:
    """Whether ``key`` came from a flag or the config file rather than the default."""
    if getattr(args, key, None) is not None:
        return True
    if not args.config:
        return False
    from .data_io import read_key_values

    return key in {k.replace("-", "_") for k in read_key_values(args.config)}


# ----------------------------------------------------------------- helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_ckpt(path, precision=None):
    from .data_io import load_network

    net = load_network(_require(path, "checkpoint"))
    if precision and precision != net.cfg.precision:
        net.cfg = replace(net.cfg, precision=precision)
        net.params = {k: v.astype(net.cfg.dtype) for k, v in net.params.items()}
    return net


def _load_data(path, dtype=np.float32):
    from .data_io import load_dataset

    ds = load_dataset(_require(path, "dataset"))
    ds.images = ds.images.astype(dtype)
    return ds


def _placement(r) -> PlacementConfig:
    macros = MACROS if "all" in r["placement"] else r["placement"]
    return PlacementConfig(tuple(macros), r["within"], r["topology"], r["dropout"], r["series_bn"] == "on")


def _train_cfg(r, regime, weight_decay):
    from .trainer import TrainConfig

    return TrainConfig(epochs=r["epochs"], batch_size=r["batch_size"], lr=r["lr"],
                       momentum=r["momentum"], regime=regime, weight_decay=weight_decay, seed=r["seed"])


def _budget_dict(net):
    from .network import count_params

    b = count_params(net)
    return {"universal": b.universal, "domains": b.domains}


def _finish_run(out, report, net, stem="run"):
    from .data_io import save_network
    from .report import plot_budget, write_run

    paths = write_run(report, out, stem)
    if net is not None:
        save_network(out / MODEL, net)
        paths += [out / MODEL, plot_budget(_budget_dict(net), out / "budget.png")]
    print(f"domain {report.domain} ({report.regime}): final accuracy {report.final_accuracy:.4f}")
    return paths


def _pairs(items, what) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError(f"{what} entries take the form DOMAIN=DIR, got {it!r}")
        d, p = it.split("=", 1)
        out[d.strip()] = p.strip()
    return out


# ---------------------------------------------------------------- commands

TRAIN_KEYS = ["seed", "precision", "epochs", "batch_size", "lr", "momentum"]


def cmd_gen_data(args):
    from .data_io import SyntheticDomainSpec, generate_domain, save_dataset
    from .report import write_manifest

    r = resolve(args, ["seed", "num_classes", "per_class", "size", "channels", "palette",
                       "freq", "noise", "name"])
    spec = SyntheticDomainSpec(r["seed"], r["num_classes"], r["per_class"], r["size"], r["channels"],
                               r["palette"], r["freq"], r["noise"], r["name"])
    out = _out(args)
    ds = generate_domain(spec)
    save_dataset(out, ds)
    _preview(ds, out / "preview.png")
    write_manifest(out, "gen-data", r, outputs=["images.mdtb", "labels.mdtb", "meta.txt", "preview.png"])
    print(f"wrote {len(ds)} images ({ds.num_classes} classes) to {out}")


def _preview(ds, path, per_class=4):
    from .report import plt

    k = ds.num_classes
    fig, axes = plt.subplots(per_class, k, figsize=(1.1 * k, 1.1 * per_class), squeeze=False)
    for c in range(k):
        idx = np.flatnonzero(ds.labels == c)[:per_class]
        for r in range(per_class):
            ax = axes[r][c]
            ax.axis("off")
            if r < len(idx):
                img = ds.images[idx[r]]
                ax.imshow(np.clip(img if img.shape[-1] == 3 else img[..., 0], 0, 1),
                          cmap=None if img.shape[-1] == 3 else "gray")
        axes[0][c].set_title(str(c), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train_base(args):
    from .report import write_manifest
    from .trainer import train_base

    r = resolve(args, TRAIN_KEYS + ["widths", "blocks", "filter_size", "base_wd"])
    out = _out(args)
    dtype = np.float64 if r["precision"] == "double" else np.float32
    train = _load_data(args.data, dtype)
    val = _load_data(args.val, dtype) if args.val else None
    net_cfg = NetworkConfig(r["widths"], r["blocks"], r["filter_size"], train.images.shape[-1], r["precision"])
    net, rep = train_base(train, _train_cfg(r, "finetune_all", r["base_wd"]), net_cfg, val, args.domain)
    paths = _finish_run(out, rep, net)
    inputs = {"data": args.data, **({"val": args.val} if args.val else {})}
    write_manifest(out, "train-base", {**r, "domain": args.domain}, inputs, paths)


def cmd_train_domain(args):
    from .data_io import subsample
    from .report import write_manifest
    from .trainer import train_domain

    r = resolve(args, TRAIN_KEYS + ["regime", "topology", "placement", "within", "wd",
                                    "dropout", "series_bn", "fraction"])
    out = _out(args)
    net = _load_ckpt(args.base, r["precision"] if explicit(args, "precision") else None)
    train = _load_data(args.data, net.dtype)
    if not 0 < r["fraction"] <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    train = subsample(train, r["fraction"], r["seed"])
    val = _load_data(args.val, net.dtype) if args.val else None
    wd = None if r["wd"] == "auto" else r["wd"]
    rep = train_domain(net, args.domain, train, _train_cfg(r, r["regime"], wd), val, _placement(r))
    paths = _finish_run(out, rep, net)
    inputs = {"base": args.base, "data": args.data, **({"val": args.val} if args.val else {})}
    write_manifest(out, "train-domain", {**r, "domain": args.domain}, inputs, paths)


def cmd_eval(args):
    from .report import write_key_values, write_manifest
    from .trainer import evaluate

    r = resolve(args, ["seed", "precision"])
    out = _out(args)
    net = _load_ckpt(args.ckpt, r["precision"] if explicit(args, "precision") else None)
    ds = _load_data(args.data, net.dtype)
    acc = evaluate(net, args.domain, ds)
    write_key_values(out / "eval.txt", {"domain": args.domain, "samples": len(ds), "accuracy": f"{acc:.6f}"})
    write_manifest(out, "eval", {**r, "domain": args.domain}, {"ckpt": args.ckpt, "data": args.data},
                   ["eval.txt"])
    print(f"accuracy = {acc:.6f}")


def _fuse_common(args, fn, command):
    from .data_io import save_network
    from .report import write_manifest

    r = resolve(args, ["seed"])
    out = _out(args)
    net = _load_ckpt(args.ckpt)
    layers = fn(net, args.domain)
    save_network(out / MODEL, net)
    write_manifest(out, command, {**r, "domain": args.domain, "layers": layers}, {"ckpt": args.ckpt}, [MODEL])
    print(f"{command}: domain {args.domain}, {len(layers)} layers")


def cmd_fuse(args):
    from .network import fuse_domain

    _fuse_common(args, fuse_domain, "fuse")


def cmd_unfuse(args):
    from .network import unfuse_domain

    _fuse_common(args, unfuse_domain, "unfuse")


def cmd_compress(args):
    from .compression import compress_network
    from .data_io import save_network
    from .report import write_key_values, write_manifest

    r = resolve(args, ["seed", "rank"])
    out = _out(args)
    net = _load_ckpt(args.ckpt)
    domains = list(_names(args.domains))
    if len(domains) < 1:
        raise UsageError("--domains needs at least one domain id")
    facts = compress_network(net, domains, r["rank"])
    T = len(domains)
    lines = {}
    for i, f in facts.items():
        cin, cout = f.beta.shape[0], f.gammas[0].shape[0]
        s2 = f.singular_values ** 2
        lines[f"layer.{i}"] = (f"K={f.K} stored={f.stored_elements()} uncompressed={T * cin * cout} "
                               f"tail_energy={np.sqrt(s2[f.K:].sum() / max(s2.sum(), 1e-300)):.3e}")
    total = sum(f.stored_elements() for f in facts.values())
    full = sum(T * f.beta.shape[0] * f.gammas[0].shape[0] for f in facts.values())
    lines["total.stored"] = total
    lines["total.uncompressed"] = full
    lines["total.ratio"] = f"{total / full:.6f}"
    save_network(out / MODEL, net)
    write_key_values(out / "compress.txt", lines)
    write_manifest(out, "compress", {**r, "domains": domains}, {"ckpt": args.ckpt}, [MODEL, "compress.txt"])
    for k, v in lines.items():
        print(f"{k} = {v}")


def cmd_finetune_gamma(args):
    from .data_io import save_network
    from .report import write_manifest, write_run
    from .trainer import finetune_gammas

    r = resolve(args, TRAIN_KEYS + ["wd"])
    out = _out(args)
    net = _load_ckpt(args.fact)
    data = _pairs(args.data, "--data")
    if not data:
        raise UsageError("finetune-gamma needs at least one --data DOMAIN=DIR")
    vals = {d: _load_data(p, net.dtype) for d, p in _pairs(args.val, "--val").items()}
    sets = {d: _load_data(p, net.dtype) for d, p in data.items()}
    wd = None if r["wd"] == "auto" else r["wd"]
    reports = finetune_gammas(net, sets, _train_cfg(r, "gammas_only", wd), vals)
    paths = []
    for d, rep in reports.items():
        paths += write_run(rep, out, f"gamma_{d}")
        print(f"domain {d} (gamma fine-tune): final accuracy {rep.final_accuracy:.4f}")
    save_network(out / MODEL, net)
    inputs = {"fact": args.fact, **{f"data.{d}": p for d, p in data.items()}}
    write_manifest(out, "finetune-gamma", r, inputs, paths + [out / MODEL])


def cmd_report_params(args):
    from .network import Network, count_params
    from .report import plot_budget, write_key_values, write_manifest

    r = resolve(args, ["seed", "widths", "blocks", "filter_size", "topology", "placement", "within"])
    out = _out(args)
    if args.ckpt:
        net = _load_ckpt(args.ckpt)
    else:
        widths = r["widths"] if explicit(args, "widths") else (64, 128, 256)
        blocks = r["blocks"] if explicit(args, "blocks") else 4
        net = Network(NetworkConfig(widths, blocks, r["filter_size"]))
        net.init_universal(r["seed"])
    budget = count_params(net, _placement({**r, "dropout": None, "series_bn": "on"}))
    lines = budget.lines()
    for i in sorted({int(n.split("/")[2]) for n in net.params if n.startswith("shared/layer/")}):
        beta = net.params[f"shared/layer/{i}/beta"]
        gammas = [v for n, v in net.params.items() if n.endswith(f"/layer/{i}/gamma")]
        lines.append(f"layer {i}: compressed storage {beta.size + sum(g.size for g in gammas)} "
                     f"= beta {beta.shape[0]}x{beta.shape[1]} + {len(gammas)} gammas "
                     f"(uncompressed {len(gammas) * beta.shape[0] * gammas[0].shape[0]})")
    for line in lines:
        print(line)
    (out / "params.txt").write_text("\n".join(lines) + "\n")
    outputs = ["params.txt"]
    if net.domains:
        plot_budget(_budget_dict(net), out / "budget.png")
        outputs.append("budget.png")
    write_key_values(out / "params_summary.txt", {"weight_layers": budget.weight_layers,
                                                  "macro_widths": "/".join(map(str, budget.macro_widths)),
                                                  "universal": budget.universal,
                                                  "budget_factor": f"{budget.budget_factor:.6f}"})
    write_manifest(out, "report-params", r, {"ckpt": args.ckpt} if args.ckpt else {}, outputs)


def cmd_gradcheck(args):
    from .checks import gradient_suite
    from .report import write_manifest

    r = resolve(args, ["seed", "precision", "tolerance"])
    if r["precision"] != "double":
        raise UsageError("gradient checks need --precision double")
    out = _out(args)
    reports = gradient_suite(r["seed"], r["tolerance"])
    lines = [str(rep) for rep in reports]
    failed = sum(not rep.passed for rep in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} checks passed")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out, "gradcheck", r, outputs=["gradcheck.txt"])
    print("\n".join(lines))
    if failed:
        raise NumericError(f"{failed} gradient checks exceeded tolerance {r['tolerance']:g}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value file; flags override it")
    _add(shared, "--seed", type=str)
    _add(shared, "--precision", type=str, help="single or double")
    shared.add_argument("--out", default="out", help="output directory (default: out)")
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    train = argparse.ArgumentParser(add_help=False)
    for flag in ("--epochs", "--batch-size", "--lr", "--momentum"):
        _add(train, flag)

    p = Parser(prog="resadapt", description="Residual adapters for multi-domain image classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", parents=[shared], help="write a synthetic domain")
    for flag in ("--num-classes", "--per-class", "--size", "--channels", "--palette", "--freq",
                 "--noise", "--name"):
        _add(g, flag)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("train-base", parents=[shared, train], help="train universal filters on domain 0")
    b.add_argument("--data", required=True)
    b.add_argument("--val")
    b.add_argument("--domain", default="0")
    _add(b, "--widths", help="three comma-separated widths")
    _add(b, "--blocks")
    _add(b, "--filter-size")
    _add(b, "--base-wd", help="weight decay for base training")
    b.set_defaults(func=cmd_train_base)

    d = sub.add_parser("train-domain", parents=[shared, train], help="adapt a trained base to a new domain")
    d.add_argument("--base", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--val")
    d.add_argument("--domain", required=True)
    _add(d, "--regime")
    _add(d, "--topology")
    _add(d, "--placement", help="all or a comma list of early,mid,late")
    _add(d, "--within")
    _add(d, "--wd", help="value or auto")
    _add(d, "--dropout", help="rate or off")
    _add(d, "--series-bn", help="on or off")
    _add(d, "--fraction")
    d.set_defaults(func=cmd_train_domain)

    e = sub.add_parser("eval", parents=[shared], help="top-1 accuracy of one domain")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", required=True)
    e.set_defaults(func=cmd_eval)

    for name, fn, text in (("fuse", cmd_fuse, "fold a domain's adapters into its filters"),
                           ("unfuse", cmd_unfuse, "drop fused filters after verifying them")):
        f = sub.add_parser(name, parents=[shared], help=text)
        f.add_argument("--ckpt", required=True)
        f.add_argument("--domain", required=True)
        f.set_defaults(func=fn)

    c = sub.add_parser("compress", parents=[shared], help="joint low-rank factorization of adapters")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--domains", required=True, help="comma-separated domain ids")
    _add(c, "--rank", help="K, half or full")
    c.set_defaults(func=cmd_compress)

    t = sub.add_parser("finetune-gamma", parents=[shared, train], help="fine-tune gammas with beta frozen")
    t.add_argument("--fact", required=True)
    t.add_argument("--data", action="append", help="DOMAIN=DIR, repeatable")
    t.add_argument("--val", action="append", help="DOMAIN=DIR, repeatable")
    _add(t, "--wd", help="value or auto")
    t.set_defaults(func=cmd_finetune_gamma)

    rp = sub.add_parser("report-params", parents=[shared], help="parameter budget")
    rp.add_argument("--ckpt")
    _add(rp, "--widths", help="used without --ckpt (default there: 64,128,256)")
    _add(rp, "--blocks", help="used without --ckpt (default there: 4)")
    _add(rp, "--filter-size")
    _add(rp, "--topology")
    _add(rp, "--placement")
    _add(rp, "--within")
    rp.set_defaults(func=cmd_report_params)

    gc = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    _add(gc, "--tolerance")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"resadapt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, DigestError, FormatError) as exc:
        print(f"resadapt {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
