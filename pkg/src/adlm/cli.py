"""Command-line entry point: ``adlm {pretrain,relevance,train,eval,audit}``.

Exit codes: 0 success, 1 audit failure, 2 usage error, 3 invalid config,
4 missing input file, 5 invalid privacy budget, 6 training diverged,
7 raw data read during training.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from adlm import __version__, audit, lrp
from adlm._container import atomic_write_text
from adlm import mechanism as mech
from adlm.config import ConfigError, RunConfig, dump_config, help_text, load_config
from adlm.data import DataLoadError, find_split, fit_bounds, load_mnist, scale_features, synthetic_dataset
from adlm.network import ConfigurationError, build_network, load_checkpoint, save_checkpoint
from adlm.trainer import (RawDataAccessError, TrainingDiverged, build_manifest, evaluate, file_hash,
                          pretrain, train, write_manifest)

EXIT_OK, EXIT_AUDIT, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_BUDGET, EXIT_DIVERGED, EXIT_RAW_ACCESS = range(8)

log = logging.getLogger("adlm")


def _split_list(text):
    return [t for t in text.replace(",", " ").split() if t]


def build_parser():
    parser = argparse.ArgumentParser(prog="adlm", description="Differentially private training with adaptive Laplace noise.",
                                     epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--mechanism", choices=("adlm", "ilm", "noiseless"))
    common.add_argument("--epsilon", type=float)
    common.add_argument("--epsilon-split", help="three relative shares, e.g. 1,1,1")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir", help="IDX directory (default $ADLM_DATA_DIR)")
    common.add_argument("--out-dir")
    common.add_argument("--mu", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--lr-decay", type=float)
    common.add_argument("--arch", help="comma-separated layer tokens")
    common.add_argument("--loss", choices=("taylor", "exact"))
    common.add_argument("--dataset", choices=("mnist", "synthetic"))
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (("pretrain", "noiseless pretraining of the relevance model"),
                       ("relevance", "export average and private relevance (CSV + PGM heatmap)"),
                       ("train", "private (or baseline) training"),
                       ("eval", "test accuracy of a checkpoint"),
                       ("audit", "sensitivity and privacy-ratio checks")):
        p = sub.add_parser(name, parents=[common], help=desc, description=desc, epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name in ("relevance", "eval"):
            p.add_argument("--checkpoint", help="checkpoint file (default: from out-dir)")
        if name == "train":
            p.add_argument("--pretrained", help="pretrained relevance model checkpoint")
            p.add_argument("--save-perturbed", action="store_true", help="also write the perturbed dataset")
            p.add_argument("--perturbed", help="reuse a saved perturbed dataset")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "mechanism": args.mechanism, "epsilon": args.epsilon, "batch_size": args.batch_size,
        "epochs": args.epochs, "seed": args.seed, "data_dir": args.data_dir, "out_dir": args.out_dir,
        "mu": args.mu, "lr": args.lr, "lr_decay": args.lr_decay, "loss": args.loss, "dataset": args.dataset,
    }
    if args.epsilon_split:
        overrides["epsilon_split"] = [float(v) for v in _split_list(args.epsilon_split)]
    if args.arch:
        overrides["arch"] = _split_list(args.arch)
    return cfg.replace(**overrides)


def load_data(cfg):
    """Scaled ``(train, test, input_hashes)``; test is scaled with train bounds."""
    if cfg.dataset == "synthetic":
        full = synthetic_dataset(cfg.synthetic_n, cfg.synthetic_d, cfg.synthetic_classes, cfg.seed)
        cut = int(0.8 * full.n)
        idx = np.arange(full.n)
        return full.subset(idx[:cut]), full.subset(idx[cut:]), {"synthetic": [cfg.synthetic_n, cfg.synthetic_d,
                                                                             cfg.synthetic_classes, cfg.seed]}
    hashes = {}
    for split in ("train", "test"):
        for path in find_split(cfg.data_dir, split):
            hashes[os.path.basename(path)] = file_hash(path)
    raw_train = load_mnist(cfg.data_dir, "train")
    raw_test = load_mnist(cfg.data_dir, "test")
    bounds = fit_bounds(raw_train)
    return scale_features(raw_train, bounds), scale_features(raw_test, bounds), hashes


def _out(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(cfg, args):
    train_set, test_set, inputs = load_data(cfg)
    tc = cfg.train_config()
    tc.validate()
    net = pretrain(tc, train_set)
    ckpt = _out(cfg, "pretrained.ckpt")
    save_checkpoint(ckpt, net, cfg.seed, {"role": "pretrained", "epochs": cfg.pretrain_epochs})
    acc = evaluate(net, test_set)
    _write_json(_out(cfg, "pretrain.json"), {"test_accuracy": acc})
    write_manifest(_out(cfg, "pretrain-manifest.json"),
                   build_manifest(cfg.to_dict(), inputs, {"pretrained.ckpt": file_hash(ckpt)}))
    print(json.dumps({"checkpoint": ckpt, "test_accuracy": acc}))
    return EXIT_OK


def cmd_relevance(cfg, args):
    train_set, _, inputs = load_data(cfg)
    ckpt = args.checkpoint or _out(cfg, "pretrained.ckpt")
    net, _ = load_checkpoint(ckpt)
    rel = lrp.average_relevance(net, train_set, cfg.mu, batch_size=cfg.batch_size, normalization=cfg.normalization)
    budget = cfg.train_config().budget()
    priv = mech.privatize_relevance(rel, budget.eps1, train_set.n, mech.substream(cfg.seed, "relevance-noise"),
                                    cfg.noise_multiplier)
    outputs = {}
    for name, values in (("relevance.csv", rel.values), ("private_relevance.csv", priv.values)):
        lrp.write_relevance_csv(_out(cfg, name), values)
        outputs[name] = file_hash(_out(cfg, name))
    if train_set.image_shape is not None:
        for name, values in (("relevance.pgm", rel.values), ("private_relevance.pgm", priv.values)):
            lrp.write_pgm(_out(cfg, name), values, train_set.image_shape)
            outputs[name] = file_hash(_out(cfg, name))
    write_manifest(_out(cfg, "relevance-manifest.json"),
                   build_manifest(cfg.to_dict(), dict(inputs, checkpoint=file_hash(ckpt)), outputs,
                                  {"epsilon1": budget.eps1, "noise_scale": priv.scale}))
    print(json.dumps({k: _out(cfg, k) for k in outputs}))
    return EXIT_OK


def cmd_train(cfg, args):
    train_set, test_set, inputs = load_data(cfg)
    tc = cfg.train_config()
    pretrained = None
    if args.pretrained:
        pretrained, _ = load_checkpoint(args.pretrained)
        inputs["pretrained"] = file_hash(args.pretrained)
    perturbed = None
    if args.perturbed:
        perturbed = mech.PerturbedDataset.load(args.perturbed)
        inputs["perturbed"] = file_hash(args.perturbed)
    result = train(tc, train_set, test_set, pretrained=pretrained, perturbed=perturbed)
    ckpt = _out(cfg, "model.ckpt")
    save_checkpoint(ckpt, result.net, cfg.seed, {"role": "model", "mechanism": cfg.mechanism,
                                                 "epsilon_spent": repr(tc.epsilon_spent())})
    metrics = _out(cfg, "metrics.csv")
    result.log.write(metrics)
    outputs = {"model.ckpt": file_hash(ckpt), "metrics.csv": result.log.content_hash()}
    if args.save_perturbed:
        pd_path = _out(cfg, "perturbed.pds")
        result.perturbed.save(pd_path)
        outputs["perturbed.pds"] = file_hash(pd_path)
    write_manifest(_out(cfg, "manifest.json"),
                   build_manifest(cfg.to_dict(), inputs, outputs,
                                  {"final_test_accuracy": result.log.final_accuracy,
                                   "epsilon_spent": repr(tc.epsilon_spent())}))
    print(json.dumps({"checkpoint": ckpt, "metrics": metrics, "test_accuracy": result.log.final_accuracy}))
    return EXIT_OK


def cmd_eval(cfg, args):
    _, test_set, _ = load_data(cfg)
    ckpt = args.checkpoint or _out(cfg, "model.ckpt")
    net, _ = load_checkpoint(ckpt)
    acc = evaluate(net, test_set)
    _write_json(_out(cfg, "eval.json"), {"accuracy": acc})
    print(json.dumps({"accuracy": acc}))
    return EXIT_OK


def cmd_audit(cfg, args):
    d = cfg.synthetic_d if cfg.dataset == "synthetic" else 784
    m = cfg.synthetic_classes if cfg.dataset == "synthetic" else 10
    net = build_network(cfg.arch, (d,), m, np.random.default_rng(0))
    report = audit.run_audit(cfg.epsilon, cfg.epsilon_split, cfg.batch_size, d, net.h0_units, net.top_units, m,
                             cfg.audit_records, cfg.seed, cfg.audit_trials)
    atomic_write_text(_out(cfg, "audit.json"), report.to_json())
    for c in report.checks:
        print(f"{c['status']:<5} {c['check']}")
    print("audit", "PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_AUDIT


COMMANDS = {"pretrain": cmd_pretrain, "relevance": cmd_relevance, "train": cmd_train, "eval": cmd_eval,
            "audit": cmd_audit}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        log.info("resolved config:\n%s", dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except mech.ParameterError as exc:
        print(f"adlm: invalid privacy budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, ConfigurationError) as exc:
        print(f"adlm: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataLoadError) as exc:
        print(f"adlm: missing or unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"adlm: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except RawDataAccessError as exc:
        print(f"adlm: {exc}", file=sys.stderr)
        return EXIT_RAW_ACCESS


if __name__ == "__main__":
    sys.exit(main())
