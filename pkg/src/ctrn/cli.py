"""``ctrn`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Machine-readable results go to JSON files (or stdout); human
summaries go to stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .cooccurrence import CooccurrenceModel, export_cooccurrence
from .data import FormatError, SyntheticSpec, generate, read_dataset, split_ids, write_dataset
from .metrics import MetricError, action_conditional, cooccurring_map, per_frame_map
from .model import CTRN, CtrnConfig, cgcn_attention_adjacency, fuse_logits
from .training import NumericalError, fit, predict_logits

CONFIG_SCHEMA_VERSION = 1
SCORES_FORMAT = "ctrn-scores"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TINY_MODEL = {"D1": 16, "D2": 8, "C": 3, "L": 2, "K": 3}

DEFAULT_RUN = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "seed": 0,
    "model": {"D2": 16, "L": 3, "K": 9},
    "data": {"C": 10, "T": 64, "D1": 64, "num_videos": 20},
    "split": {"test_fraction": 0.25, "val_fraction": 0.0},
    "train": {"epochs": 300, "batch_size": 8, "lr": 1e-3, "factor": 0.3, "patience": 10,
              "clip_norm": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, assignments) -> dict:
    for item in assignments or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_RUN)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            user = json.loads(path.read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        version = user.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise UsageError(f"unsupported config schema_version {version}")
        cfg = _merge(cfg, user)
    cfg = _apply_set(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    return cfg


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = dict(cfg["data"])
    d.setdefault("seed", cfg["seed"])
    try:
        spec = SyntheticSpec.from_dict(d)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data spec: {exc}") from exc
    return spec


def _model_config(cfg: dict, D1: int, C: int) -> CtrnConfig:
    d = dict(cfg["model"])
    d["D1"], d["C"] = D1, C
    try:
        return CtrnConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    spec = _synthetic_spec(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    videos = generate(spec)
    split = split_ids([v.id for v in videos], cfg["split"]["test_fraction"], spec.seed,
                      cfg["split"].get("val_fraction", 0.0))
    write_dataset(out, videos, split)
    cfg["data"] = spec.to_dict()
    _write_json(out / "config.json", cfg)
    _info(f"wrote {len(videos)} videos to {out} ({', '.join(f'{k}: {len(v)}' for k, v in split.items())})")
    return EXIT_OK


def cmd_cooc(args) -> int:
    videos, split = read_dataset(args.dataset)
    ids = split.get(args.split)
    if ids is None:
        raise UsageError(f"split {args.split!r} not in {sorted(split)}")
    labels = [videos[i].labels for i in ids]
    try:
        model = CooccurrenceModel.from_labels(labels, args.theta, args.p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    export_cooccurrence(model, args.out)
    _info(f"{len(labels)} videos, {len(model.links())} co-occurrence links at theta={args.theta}")
    return EXIT_OK


def _split_records(videos, split, name):
    return [(videos[i].features, videos[i].labels) for i in split.get(name, [])]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    videos, split = read_dataset(args.dataset)
    train = _split_records(videos, split, "train")
    if not train:
        raise FormatError(f"{args.dataset}: empty train split")
    val = _split_records(videos, split, "val") or None
    D1 = train[0][0].shape[1]
    C = train[0][1].shape[1]
    mcfg = _model_config(cfg, D1, C)
    cfg["model"] = mcfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    model = CTRN(mcfg, seed=cfg["seed"])
    t = cfg["train"]
    start = time.time()
    result = fit(model, train, val, epochs=t["epochs"], batch_size=t["batch_size"], seed=cfg["seed"],
                 lr=t["lr"], factor=t["factor"], patience=t["patience"], clip_norm=t.get("clip_norm"),
                 log_path=out / "log.jsonl")
    save_checkpoint(out / "checkpoint.ctrn", model,
                    meta={"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss})
    last = result.log[-1]
    _info(f"trained {t['epochs']} epochs in {time.time() - start:.1f}s; best epoch {result.best_epoch} "
          f"(val loss {result.best_val_loss:.4f}); last train loss {last['train_loss']:.4f}")
    return EXIT_OK


def _read_scores(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("format") != SCORES_FORMAT:
        raise FormatError(f"{path}: not a {SCORES_FORMAT} document")
    return {vid: np.asarray(v["logits"], dtype=float) for vid, v in doc["videos"].items()}


def write_scores(path, logits: dict[str, np.ndarray]) -> None:
    doc = {"format": SCORES_FORMAT, "version": 1,
           "videos": {vid: {"logits": z.tolist()} for vid, z in sorted(logits.items())}}
    Path(path).write_text(json.dumps(doc))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def evaluate_scores(probs, labels, taus) -> dict:
    result = {"per_frame": per_frame_map(probs, labels).to_dict()}
    try:
        result["cooccurring"] = cooccurring_map(probs, labels).to_dict()
    except MetricError as exc:
        result["cooccurring"] = None
        _info(f"co-occurring mAP unavailable: {exc}")
    result["action_conditional"] = [action_conditional(probs, labels, tau).to_dict() for tau in taus]
    return result


def cmd_eval(args) -> int:
    videos, split = read_dataset(args.dataset)
    ids = split.get(args.split)
    if ids is None:
        raise UsageError(f"split {args.split!r} not in {sorted(split)}")
    if args.scores:
        table = _read_scores(args.scores)
        missing = [i for i in ids if i not in table]
        if missing:
            raise FormatError(f"scores file lacks videos {missing[:5]}")
        logits = [table[i] for i in ids]
    else:
        model = load_checkpoint(args.checkpoint)
        logits = predict_logits(model, [videos[i].features for i in ids])
        if args.write_scores:
            write_scores(args.write_scores, dict(zip(ids, logits)))
    labels = [videos[i].labels for i in ids]
    for vid, z, y in zip(ids, logits, labels):
        if z.shape != y.shape:
            raise FormatError(f"{vid}: scores {z.shape} do not match labels {y.shape}")
    taus = [int(t) for t in args.taus.split(",")] if args.taus else []
    if any(t < 0 for t in taus):
        raise UsageError("taus must be non-negative")
    result = evaluate_scores([_sigmoid(z) for z in logits], labels, taus)
    result["split"] = args.split
    result["num_videos"] = len(ids)
    _write_json(args.out, result)
    _info(f"per-frame mAP {result['per_frame']['map']:.4f} over {len(ids)} videos")
    for block in result["action_conditional"]:
        vals = " ".join(f"{k}={block[k]:.4f}" if block[k] is not None else f"{k}=n/a"
                        for k in ("P_AC", "R_AC", "F1_AC", "mAP_AC"))
        _info(f"  tau={block['tau']}: {vals}")
    return EXIT_OK


def gradcheck_report(mcfg: CtrnConfig, T: int = 4, seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Max relative gradient error per named parameter of a training-mode loss."""
    mcfg = CtrnConfig.from_dict({**mcfg.to_dict(), "dtype": "float64"})
    rng = np.random.default_rng(seed)
    model = CTRN(mcfg, seed=seed)
    W = model.params["rtm.weight"].data.reshape(mcfg.D1, -1)
    b = model.params["rtm.bias"].data.reshape(-1)
    # Central differences are wrong across a ReLU kink, so redraw the probe
    # until no RTM pre-activation lies within reach of a weight step.
    for _ in range(1000):
        X = rng.standard_normal((T, mcfg.D1))
        if np.abs(X @ W + b).min() > 10 * eps * max(1.0, np.abs(X).max()):
            break
    Y = (rng.random((T, mcfg.C)) < 0.5).astype(float)
    model.set_cooccurrence(CooccurrenceModel.from_labels([Y], mcfg.theta, mcfg.reweight_p).A_S)

    def f():
        model.seed_dropout(seed)
        return model.loss(X, Y, training=True)

    params = model.parameters()
    errors = tn.grad_check_report(f, params, eps)
    return {p.name: errors[i] for i, p in enumerate(params)}


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args) if args.config else {"model": dict(TINY_MODEL), "seed": 0}
    cfg = _apply_set(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    m = cfg["model"]
    mcfg = _model_config(cfg, m.get("D1", TINY_MODEL["D1"]), m.get("C", TINY_MODEL["C"]))
    n = sum(p.data.size for p in CTRN(mcfg).parameters())
    if n > 5000:
        _info(f"warning: {n} parameters; finite differences need {2 * n} forward passes and may take long")
    start = time.time()
    report = gradcheck_report(mcfg, T=args.T, seed=cfg.get("seed", 0), eps=args.eps)
    worst = max(report.values())
    doc = {"max_relative_error": report, "worst": worst, "tolerance": args.tol,
           "passed": worst < args.tol, "seconds": time.time() - start}
    _write_json(args.out, doc)
    _info(f"gradcheck: worst relative error {worst:.3e} over {len(report)} parameters")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_fuse(args) -> int:
    a, b = _read_scores(args.a), _read_scores(args.b)
    if set(a) != set(b):
        raise FormatError("score files cover different videos")
    fused = {}
    for vid in a:
        try:
            fused[vid] = fuse_logits(a[vid], b[vid])
        except ValueError as exc:
            raise FormatError(f"{vid}: {exc}") from exc
    write_scores(args.out, fused)
    _info(f"fused {len(fused)} videos")
    return EXIT_OK


def cmd_export_adjacency(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    if args.dataset:
        videos, split = read_dataset(args.dataset)
        vid = sorted(split.get("test") or split["train"])[0]
        probe, probe_name = videos[vid].features, vid
    else:
        probe = np.random.default_rng(args.seed).standard_normal((args.T, cfg.D1))
        probe_name = f"gaussian(seed={args.seed}, T={args.T})"
    attn = []
    with tn.no_grad():
        h = model.rtm(np.asarray(probe, dtype=np.dtype(cfg.dtype))[None], False)
        for i in range(cfg.L):
            entry = {"block": i}
            if cfg.use_cgcn:
                base = model.params[f"block{i}.cgcn.adjacency"].data
                att = cgcn_attention_adjacency(h, model.params[f"block{i}.cgcn.W1"],
                                               model.params[f"block{i}.cgcn.W2"]).data[0]
                entry.update(base=base.tolist(), attention=att.tolist(), superimposed=(base + att).tolist())
            attn.append(entry)
            h = model.block(i, h, False)
    doc = {"L": cfg.L, "C": cfg.C, "probe": probe_name, "blocks": attn,
           "A_S": model.A_S.tolist(), "use_gclassifier": cfg.use_gclassifier}
    _write_json(args.out, doc)
    _info(f"exported {len(attn)} blocks")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctrn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run config JSON")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override a config entry (value parsed as JSON)")
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cooc", help="co-occurrence statistics of a dataset split")
    c.add_argument("--dataset", required=True)
    c.add_argument("--split", default="train")
    c.add_argument("--theta", type=float, default=0.05)
    c.add_argument("--p", type=float, default=0.2)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cooc)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a scores file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--scores")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--taus", default="0", help="comma-separated windows in snippets")
    e.add_argument("--write-scores", help="also store the checkpoint's logits here")
    e.add_argument("--out", default="-")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    common(gc)
    gc.add_argument("--T", type=int, default=4)
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--out", default="-")
    gc.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fuse", help="average the logits of two score files")
    f.add_argument("a")
    f.add_argument("b")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    x = sub.add_parser("export-adjacency", help="dump C-GCN adjacencies and A_S")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", help="take the probe video from this dataset")
    x.add_argument("--T", type=int, default=16)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", default="-")
    x.set_defaults(func=cmd_export_adjacency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _info(f"error: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _info(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (FormatError, OSError, KeyError, json.JSONDecodeError) as exc:
        _info(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
