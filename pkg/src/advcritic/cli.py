"""Command-line entry point: train, attack, evaluate, compare.

Exit codes: 0 ok, 1 attack did not succeed on every input, 2 usage/config
error or missing checkpoint, 3 training diverged, 4 report fingerprint
mismatch.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from advcritic import attack as atk
from advcritic import config as cfgmod
from advcritic import defense, nn
from advcritic import evaluate as ev

EXIT_OK = 0
EXIT_ATTACK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4

log = logging.getLogger("advcritic")


class UsageError(Exception):
    pass


def _config_args(p):
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default=None)
    p.add_argument("--config", help="YAML config file (merged over the preset)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry, e.g. train.lam=0.3 (repeatable)",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="advcritic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier (ours / none / at)")
    _config_args(p)
    p.add_argument("--defense", choices=defense.DEFENSES)
    p.add_argument("--epsilon", type=float, help="FGSM step for --defense at")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attack", help="attack images from the test split")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="first test image")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--method", choices=("ours", "deepfool", "fgsm"), default="ours")
    p.add_argument("--target", type=int, help="target class (default: closest boundary)")
    p.add_argument(
        "--confidence",
        default="match-original",
        help="float in (0,1) or 'match-original' (C = p of the predicted class)",
    )
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--clip", type=float, default=0.1, help="per-iteration l2 clip (0: none)")
    p.add_argument("--step", choices=("adaptive", "fixed"), default="adaptive")
    p.add_argument("--step-norm", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1, help="FGSM step")
    p.add_argument("--png", action="store_true", help="also write grayscale PNGs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="robustness reports for one or more checkpoints")
    _config_args(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--name", nargs="+", help="model names (default: checkpoint stems)")
    p.add_argument("--attacks", nargs="*", default=["deepfool", "ours"])
    p.add_argument("--subset", type=int, help="evaluate the first N test images")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="comparison table from saved report JSON files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="write the table as CSV here")
    return parser


def _resolve(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    return cfgmod.resolve(args.preset, args.config, overrides)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def cmd_train(args):
    extra = []
    for key in ("defense", "epsilon", "epochs", "seed"):
        val = getattr(args, key)
        if val is not None:
            extra.append((["train", key], val))
    doc = _resolve(args, extra)
    tcfg = cfgmod.train_config(doc)
    train_set, _, test_set = cfgmod.load_datasets(doc)
    os.makedirs(args.out, exist_ok=True)
    cfgmod.dump(doc, os.path.join(args.out, "config.yaml"))
    _write_json(
        os.path.join(args.out, "fingerprints.json"),
        {
            "config": cfgmod.fingerprint(doc),
            "train": train_set.fingerprint,
            "test": test_set.fingerprint,
        },
    )
    log_path = os.path.join(args.out, "log.jsonl")
    log_fh = open(log_path, "w")

    def on_epoch(rec, model):
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()

    try:
        result = defense.train(tcfg, train_set, test_set, on_epoch)
    except defense.TrainingDivergedError as exc:
        _write_json(os.path.join(args.out, "diverged.json"), exc.snapshot)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        log_fh.close()
    nn.save_params(result.classifier.params, os.path.join(args.out, "classifier.ckpt"))
    if result.critic is not None:
        nn.save_params(result.critic.params, os.path.join(args.out, "critic.ckpt"))
    final = result.log[-1] if result.log else {}
    print(f"trained {tcfg.defense}: test error {final.get('test_error')}% -> {args.out}")
    return EXIT_OK


def _load_classifier(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        model = nn.load_model(path)
    except nn.CheckpointError as exc:
        raise UsageError(f"cannot load {path}: {exc}") from exc
    if not isinstance(model, nn.Classifier):
        raise UsageError(f"{path} is not a classifier checkpoint")
    return model


def _run_config(args, checkpoint):
    """Config stored next to a trained checkpoint, unless one is given explicitly."""
    if args.preset is None and args.config is None:
        stored = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.yaml")
        if os.path.exists(stored):
            return cfgmod.resolve(None, stored, args.overrides)
    return _resolve(args)


def _parse_confidence(text):
    if text in ("match-original", "original"):
        return None
    try:
        c = float(text)
    except ValueError as exc:
        raise UsageError(f"bad --confidence {text!r}") from exc
    if not 0 < c < 1:
        raise UsageError("--confidence must lie in (0, 1)")
    return c


def _save_png(path, image):
    from PIL import Image

    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def cmd_attack(args):
    model = _load_classifier(args.checkpoint)
    doc = _run_config(args, args.checkpoint)
    _, _, test_set = cfgmod.load_datasets(doc)
    stop = args.index + args.count
    if args.index < 0 or args.count < 1 or stop > len(test_set):
        raise UsageError(f"selection [{args.index}, {stop}) outside test set of {len(test_set)}")
    x = test_set.images[args.index : stop]
    y = test_set.labels[args.index : stop]
    pred = model.predict(x)
    clip = args.clip if args.clip and args.clip > 0 else None
    conf_arg = _parse_confidence(args.confidence)
    if args.method == "fgsm":
        x_adv = atk.fgsm(x, pred, args.epsilon, model)
        probs = model.predict_probs(x_adv)
        new = np.argmax(probs, axis=1)
        res = atk.AttackResult(
            x_adv, x_adv - x, np.ones(len(x), dtype=np.int64), new != pred,
            probs[np.arange(len(x)), new], new,
        )
    elif args.method == "deepfool":
        res = atk.deepfool(x, model, args.max_iter, 0.02, clip, record_trace=True)
    else:
        if args.target is not None:
            if not 0 <= args.target < model.k:
                raise UsageError(f"--target must lie in [0, {model.k})")
            targets = np.full(len(x), args.target, dtype=np.int64)
        else:
            targets = atk.closest_boundary_targets(model, x, pred)
        if conf_arg is None:
            p = model.predict_probs(x)[np.arange(len(x)), pred]
            conf = np.minimum(p, ev.MAX_CONFIDENCE)
        else:
            conf = np.full(len(x), conf_arg)
        acfg = atk.AttackConfig(
            confidence=float(conf[0]),
            max_iter=args.max_iter,
            step=args.step,
            step_norm=args.step_norm,
            clip=clip,
        )
        res = atk.high_confidence_attack(x, targets, acfg, model, confidence=conf,
                                         record_trace=True)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "x.npy"), x)
    np.save(os.path.join(args.out, "x_adv.npy"), res.x_adv)
    np.save(os.path.join(args.out, "r.npy"), res.r)
    if res.trace:
        atk.write_trace_csv(res.trace, os.path.join(args.out, "trace.csv"))
    if args.png:
        for j in range(len(x)):
            _save_png(os.path.join(args.out, f"adv_{args.index + j}.png"), res.x_adv[j])
    summary = {
        "method": args.method,
        "checkpoint": args.checkpoint,
        "checkpoint_hash": ev.params_hash(model.params),
        "test_fingerprint": test_set.fingerprint,
        "config": doc,
        "attack": vars(args) | {"func": None},
        "examples": [
            {
                "index": args.index + j,
                "label": int(y[j]),
                "prediction": int(pred[j]),
                "target": int(res.target[j]),
                "adv_prediction": int(model.predict(res.x_adv[j : j + 1])[0]),
                "success": bool(res.success[j]),
                "confidence": float(res.confidence[j]),
                "iterations": int(res.iterations[j]),
                "r_norm": float(np.linalg.norm(res.r[j])),
            }
            for j in range(len(x))
        ],
    }
    summary["attack"].pop("func")
    _write_json(os.path.join(args.out, "attack.json"), summary)
    cfgmod.dump(doc, os.path.join(args.out, "config.yaml"))
    n_ok = int(np.sum(res.success))
    print(f"{args.method}: {n_ok}/{len(x)} succeeded -> {args.out}")
    return EXIT_OK if n_ok == len(x) else EXIT_ATTACK_FAILED


def cmd_evaluate(args):
    if not args.attacks:
        raise UsageError("need at least one attack")
    bad = [a for a in args.attacks if a not in ev.ATTACKS]
    if bad:
        raise UsageError(f"unknown attacks {bad}; choose from {list(ev.ATTACKS)}")
    names = args.name or [
        os.path.basename(os.path.dirname(os.path.abspath(c))) or c for c in args.checkpoint
    ]
    if len(names) != len(args.checkpoint):
        raise UsageError("--name needs one entry per checkpoint")
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    models = [_load_classifier(c) for c in args.checkpoint]
    docs = [_run_config(args, c) for c in args.checkpoint]
    reports = []
    os.makedirs(args.out, exist_ok=True)
    for name, model, doc in zip(names, models, docs):
        _, _, test_set = cfgmod.load_datasets(doc)
        if args.subset is not None:
            if args.subset < 1:
                raise UsageError("--subset must be positive")
            test_set = test_set.head(args.subset)
        for attack in args.attacks:
            rep = ev.robustness(
                model, test_set, attack, name=name,
                fingerprint={"seed": doc["train"].get("seed", 0), "preset": doc.get("preset"),
                             "subset": args.subset},
            )
            rep.save(os.path.join(args.out, f"{name}_{attack}"))
            reports.append(rep)
        cfgmod.dump(doc, os.path.join(args.out, f"{name}_config.yaml"))
    text, table = ev.compare(reports)
    with open(os.path.join(args.out, "comparison.csv"), "w") as fh:
        fh.write(table)
    print(text, end="")
    return EXIT_OK


def cmd_compare(args):
    reports = []
    for path in args.reports:
        try:
            with open(path) as fh:
                reports.append(ev.RobustnessReport.from_json(fh.read()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from exc
    text, table = ev.compare(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ev.ReportMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
