"""Command-line entry point.

    maxmin-attack emit-fixtures --out data/
    maxmin-attack train  --model NetA --data data/ --zoo zoo/
    maxmin-attack attack --model NetA --method MAXMIN --transforms T,S,R --out adv.csv
    maxmin-attack matrix --models NetA,NetB,NetC --methods MIM,AIM,MAXMIN --out asr.csv
    maxmin-attack sweep  --model NetA --method BIM --transforms T,S,R --out sweep.csv

A ``--config`` file holds ``key = value`` lines (``#`` starts a comment)
whose keys are flag names; explicit flags override it. Failures exit
non-zero after printing one ``error code=... message=...`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from .attacks import AttackSpec, run_attack
from .data import build_eval_set, desk_splits, load_idx_dir
from .errors import AttackToolkitError, SpecError
from .experiments import (craft, render, run_loss_sweep, run_transfer_matrix, sweep_magnitudes,
                          write_atomic)
from .zoo import Zoo, build, default_config, load, predict, save, train

log = logging.getLogger("maxmin_attack")

DEFAULTS = {
    "config": None,
    "model": "NetA",
    "models": None,
    "sources": None,
    "method": "MAXMIN",
    "methods": "MIM,DIM,T,S,R,AIM,MAXMIN",
    "epsilon": 16.0,
    "iters": 10,
    "mu": 1.0,
    "prob": 0.5,
    "transforms": "T,S,R",
    "grid_points": 7,
    "seed": 0,
    "data_seed": 0,
    "data": "synth",
    "zoo": "zoo",
    "n": 1000,
    "epochs": None,
    "out": None,
    "format": None,
}
COMMAND_DEFAULTS = {"sweep": {"method": "BIM"}}
INT_KEYS = {"iters", "grid_points", "seed", "data_seed", "n", "epochs"}
FLOAT_KEYS = {"epsilon", "mu", "prob"}


def read_config(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            if key not in DEFAULTS:
                raise SpecError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def resolve(args):
    """Fill unset flags from the config file, then from DEFAULTS, coercing types."""
    cfg = read_config(args.config) if args.config else {}
    defaults = dict(DEFAULTS, **COMMAND_DEFAULTS.get(args.command, {}))
    for key, default in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, default))
    for key in INT_KEYS:
        if getattr(args, key) is not None:
            setattr(args, key, int(getattr(args, key)))
    for key in FLOAT_KEYS:
        setattr(args, key, float(getattr(args, key)))
    if args.format is None:
        args.format = "json" if args.out and str(args.out).endswith(".json") else "csv"
    if args.format not in ("csv", "json"):
        raise SpecError(f"unknown format {args.format!r}")
    return args


def _split_list(value):
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _spec(args, method):
    return AttackSpec(method, epsilon=args.epsilon, iterations=args.iters, mu=args.mu,
                      prob=args.prob, transforms=args.transforms if method in ("AIM", "MAXMIN")
                      else (), grid_points=args.grid_points, seed=args.seed)


def _datasets(args):
    if args.data == "synth":
        return desk_splits(args.data_seed)
    return load_idx_dir(args.data, "train"), load_idx_dir(args.data, "test")


def _model_path(args, name):
    return os.path.join(args.zoo, f"{name}.wgrd")


def _load_model(args, name):
    path = name if name.endswith(".wgrd") else _model_path(args, name)
    if not os.path.exists(path):
        raise SpecError(f"model file {path} not found; run `train --model {name}` first")
    return load(path)


def _write(args, text, default_name):
    out = args.out or default_name
    write_atomic(out, text)
    log.info("wrote %s", out)
    return out


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_emit_fixtures(args):
    """Write the synthetic desk splits as IDX files plus small malformed IDX fixtures."""
    out = args.out or "data"
    os.makedirs(out, exist_ok=True)
    train_set, test_set = desk_splits(args.data_seed)
    for split, ds in (("train", train_set), ("test", test_set)):
        img, lbl = data_mod.IDX_FILES[split]
        data_mod.write_idx_images(os.path.join(out, img), ds.images)
        data_mod.write_idx_labels(os.path.join(out, lbl), ds.labels)
    fixtures = os.path.join(out, "fixtures")
    os.makedirs(fixtures, exist_ok=True)
    tiny = np.array([[[0, 1], [2, 255]], [[10, 20], [30, 40]]])
    data_mod.write_idx_images(os.path.join(fixtures, "tiny-images-idx3-ubyte"), tiny)
    data_mod.write_idx_labels(os.path.join(fixtures, "tiny-labels-idx1-ubyte"), [3, 7])
    data_mod.write_idx_labels(os.path.join(fixtures, "three-labels-idx1-ubyte"), [1, 2, 3])
    with open(os.path.join(fixtures, "tiny-images-idx3-ubyte"), "rb") as fh:
        raw = fh.read()
    with open(os.path.join(fixtures, "bad-magic-idx3-ubyte"), "wb") as fh:
        fh.write(b"\x00\x00\x08\x02" + raw[4:])
    with open(os.path.join(fixtures, "truncated-idx3-ubyte"), "wb") as fh:
        fh.write(raw[:-3])
    print(json.dumps({"out": out, "train": len(train_set), "test": len(test_set)}))
    return 0


def cmd_train(args):
    name = args.model
    train_set, test_set = _datasets(args)
    config = default_config(name, seed=args.seed)
    if args.epochs is not None:
        config.epochs = args.epochs
    model = build(name, train_set.images.shape[1:], train_set.num_classes, seed=args.seed,
                  name=name)
    train(model, train_set, config, eval_data=test_set)
    path = args.out or _model_path(args, name)
    save(model, path)
    print(json.dumps({"model": name, "path": path,
                      "test_accuracy": round(model.training_meta["clean_accuracy"], 4)}))
    return 0


def cmd_attack(args):
    model = _load_model(args, args.model)
    _, test_set = _datasets(args)
    eval_set = build_eval_set(test_set, model, min(args.n, len(test_set)), strict=False)
    spec = _spec(args, args.method)
    records = []
    for start in range(0, len(eval_set), 500):
        idx = eval_set.indices[start:start + 500]
        x, y = test_set.images[idx], test_set.labels[idx]
        result = run_attack(spec, model, x, y, indices=idx)
        preds = predict(model, result.adversarial)[0]
        linf = np.abs(result.adversarial - x).reshape(len(x), -1).max(axis=1)
        for j, i in enumerate(idx):
            records.append({"index": int(i), "label": int(y[j]), "adv_pred": int(preds[j]),
                            "fooled": bool(preds[j] != y[j]), "linf": float(linf[j]),
                            "initial_loss": float(result.loss_trace[0, j]),
                            "final_loss": float(result.loss_trace[-1, j])})
    columns = ["index", "label", "adv_pred", "fooled", "linf", "initial_loss", "final_loss"]
    if args.format == "json":
        text = json.dumps({"model": model.name, "attack": spec.label, "seed": spec.seed,
                           "spec_digest": spec.digest(), "images": records},
                          sort_keys=True, indent=1) + "\n"
    else:
        lines = [",".join(columns)]
        for r in records:
            lines.append(",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else
                                  ("true" if r[c] is True else "false" if r[c] is False
                                   else str(r[c])) for c in columns))
        text = "\n".join(lines) + "\n"
    _write(args, text, f"attack-{model.name}-{spec.label}.{args.format}")
    fooled = sum(r["fooled"] for r in records)
    print(json.dumps({"model": model.name, "attack": spec.label, "n_images": len(records),
                      "n_fooled": fooled,
                      "asr_percent": round(100.0 * fooled / max(len(records), 1), 4)}))
    return 0


def _zoo(args):
    names = _split_list(args.models) if args.models else None
    if names is None:
        return Zoo.from_dir(args.zoo)
    zoo = Zoo()
    for name in names:
        zoo.add(_load_model(args, name))
    return zoo


def cmd_matrix(args):
    zoo = _zoo(args)
    _, test_set = _datasets(args)
    sources = _split_list(args.sources) if args.sources else \
        [n for n in zoo.names() if not n.endswith("_adv")]
    eval_sets = {s: build_eval_set(test_set, zoo[s], min(args.n, len(test_set)), strict=False)
                 for s in sources}
    specs = [_spec(args, m) for m in _split_list(args.methods)]
    report = run_transfer_matrix(zoo, eval_sets, specs)
    _write(args, render(report, args.format), f"asr.{args.format}")
    return 0


def cmd_sweep(args):
    model = _load_model(args, args.model)
    _, test_set = _datasets(args)
    eval_set = build_eval_set(test_set, model, min(args.n, len(test_set)), strict=False)
    sweeps = []
    for method in _split_list(args.method):
        spec = _spec(args, method)
        adversarial = craft(spec, model, eval_set)
        for kind in _split_list(args.transforms.replace("+", ",")):
            mags = sweep_magnitudes(kind, spec, test_set.images.shape[2], args.grid_points)
            sweeps.append(run_loss_sweep(model, eval_set, spec, kind, mags,
                                         adversarial=adversarial))
    _write(args, render(sweeps, args.format), f"sweep.{args.format}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="maxmin-attack", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--data-seed", type=int)
        p.add_argument("--data", help="'synth' or a directory of IDX files")
        p.add_argument("--zoo", help="directory holding <name>.wgrd files")
        p.add_argument("--out")
        p.add_argument("--format", choices=["csv", "json"])

    def attack_flags(p):
        p.add_argument("--epsilon", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--mu", type=float)
        p.add_argument("--prob", type=float)
        p.add_argument("--transforms")
        p.add_argument("--grid-points", type=int)
        p.add_argument("--n", type=int, help="eval-set size")

    p = sub.add_parser("emit-fixtures", help="write IDX data and malformed fixtures")
    common(p)
    p.set_defaults(func=cmd_emit_fixtures)

    p = sub.add_parser("train", help="train one zoo model (suffix _adv for adversarial)")
    common(p)
    p.add_argument("--model")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one model, write per-image results")
    common(p)
    attack_flags(p)
    p.add_argument("--model")
    p.add_argument("--method")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("matrix", help="source x attack x target success-rate matrix")
    common(p)
    attack_flags(p)
    p.add_argument("--models", help="comma-separated; default: every model in --zoo")
    p.add_argument("--sources", help="comma-separated; default: models without _adv")
    p.add_argument("--methods", "--method", dest="methods")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="mean loss of adversarials versus transform magnitude")
    common(p)
    attack_flags(p)
    p.add_argument("--model")
    p.add_argument("--method", help="base attacks, comma-separated (e.g. BIM,MIM,DIM)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        return args.func(args)
    except (AttackToolkitError, OSError, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        message = str(exc).replace("\n", " ")
        print(f"error code={code} message={message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
