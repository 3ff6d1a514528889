"""Command line: ``eriqa <subcommand> [--config FILE] [--set key=value ...]``.

Exit status is 0 on success, 1 when the run itself fails (the reason goes to
stderr on one line) and 2 for usage errors, including an unreadable config or
an unknown override key.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .checkpoint import load_backbone, load_model
from .forge import read_manifest
from .gradsuite import SUITE, run_suite
from .model import FUSION_KINDS, UnpairedIqaModel
from .trainer import ImageBank, eval_references, make_splits

log = logging.getLogger("eriqa")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="JSON run config; missing keys take their defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. pretrain.lr=1e-4 (value parsed as JSON, else a string)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=S")


def _data_args(p, out=True):
    p.add_argument("--manifest", required=True, help="corpus directory or its manifest.csv")
    p.add_argument("--splits", help="splits.json written by the splits command (default: derived from config)")
    p.add_argument("--split", type=int, help="which repeat of the split plan (shorthand for --set split=I)")
    p.add_argument("--fusion", choices=FUSION_KINDS, help="shorthand for --set fusion=K")
    if out:
        p.add_argument("--out", required=True, help="run directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="eriqa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="generate the synthetic distortion corpus")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("splits", help="write content-disjoint train/test splits")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, help="train share of pristine ids (splits.ratio)")
    p.add_argument("--repeats", type=int, help="number of repeats (splits.repeats)")

    p = sub.add_parser("pretrain", help="distortion-classification pre-training")
    _common(p)
    _data_args(p)

    p = sub.add_parser("finetune", help="quality regression on pseudo-MOS")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", help="pre-trained model to start from (default: fresh init)")
    p.add_argument("--backbone", help="semantic backbone file (default: trained in this run)")

    p = sub.add_parser("eval", help="score the test side of a split and report SROCC/PLCC and D/L/P")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="compare fusion modules over repeated splits")
    _common(p)
    _data_args(p)
    p.add_argument("--pretrain-manifest", help="corpus for pre-training (default: forged with ablate.pretrain_corpus_seed)")
    p.add_argument("--backbone")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and fusion module")
    _common(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--only", action="append", choices=sorted(SUITE), help="restrict to these entries")
    p.add_argument("--out", help="optional run directory for gradcheck.csv")

    p = sub.add_parser("dump-features", help="write per-stage pre-fusion features")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", help="model to probe (default: fresh init of config fusion)")
    p.add_argument("--stage", type=int, default=0, help="0..3")
    p.add_argument("--limit", type=int, default=16, help="test samples to dump")
    return ap


# ---------------------------------------------------------------------------


def _manifest(args):
    path = Path(args.manifest)
    if not (path / "manifest.csv").exists() and not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    return read_manifest(path)


def _split(cfg, args, manifest):
    plan = P.split_plan(cfg, manifest, args.splits)
    i = cfg["split"]
    if not 0 <= i < len(plan.repeats):
        raise UsageError(f"split {i} out of range 0..{len(plan.repeats) - 1}")
    return plan, plan.repeats[i]


def cmd_forge(cfg, args):
    out = P.open_run_dir(args.out, cfg, "forge")
    m = P.forge_corpus(cfg, out)
    print(f"forged {len(m.samples)} samples from {len(m.pristine_ids)} pristine images into {out}")


def cmd_splits(cfg, args):
    m = _manifest(args)
    out = P.open_run_dir(args.out, cfg, "splits")
    s = cfg["splits"]
    plan = make_splits(m, s["ratio"], s["repeats"], s["seed"])
    (out / "splits.json").write_text(plan.to_json())
    print(f"wrote {len(plan.repeats)} splits to {out / 'splits.json'}")


def cmd_pretrain(cfg, args):
    m = _manifest(args)
    _, split = _split(cfg, args, m)
    out = P.open_run_dir(args.out, cfg, "pretrain")
    _, res = P.run_pretrain(cfg, m, split, cfg["fusion"], out)
    print(f"best held-out accuracy {res.best_metric:.4f}")


def cmd_finetune(cfg, args):
    m = _manifest(args)
    _, split = _split(cfg, args, m)
    out = P.open_run_dir(args.out, cfg, "finetune")
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = UnpairedIqaModel.create(cfg["fusion"], m.n_classes, seed=cfg["seed"])
    bb = load_backbone(args.backbone) if args.backbone else P.get_backbone(cfg, out / "backbone.uiqa")
    model, res = P.run_finetune(cfg, m, split, model, bb, out)
    table, report = P.evaluate_model(cfg, m, split, model)
    P.write_eval(out, table, report)
    print(f"best held-out SROCC {res.best_metric:.4f}")


def cmd_eval(cfg, args):
    m = _manifest(args)
    _, split = _split(cfg, args, m)
    model = load_model(args.checkpoint)
    if model.backbone is None:
        raise ValueError(f"{args.checkpoint} holds no backbone; scoring needs a fine-tuned model")
    out = P.open_run_dir(args.out, cfg, "eval")
    table, report = P.evaluate_model(cfg, m, split, model)
    P.write_eval(out, table, report)
    wa = report["weighted_average"]
    print(f"SROCC {wa['srocc']:.4f} PLCC {wa['plcc']:.4f}")


def cmd_ablate(cfg, args):
    m = _manifest(args)
    plan = P.split_plan(cfg, m, args.splits)
    out = P.open_run_dir(args.out, cfg, "ablate")
    pre = read_manifest(args.pretrain_manifest) if args.pretrain_manifest else None
    bb = load_backbone(args.backbone) if args.backbone else None
    P.run_ablation(cfg, m, out, plan=plan, backbone=bb, pretrain_manifest=pre)
    sys.stdout.write((out / "ablation.csv").read_text())


def cmd_gradcheck(cfg, args):
    rows = run_suite(args.trials, cfg["seed"], args.only)
    lines = ["name,trials,max_rel_error,passed,seconds"]
    lines += [f"{r.name},{r.trials},{r.max_rel_error:.3e},{int(r.passed)},{r.seconds:.2f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = P.open_run_dir(args.out, cfg, "gradcheck")
        (out / "gradcheck.csv").write_text(text)
    sys.stdout.write(text)
    bad = [r.name for r in rows if not r.passed]
    if bad:
        raise RuntimeError(f"gradient check failed for {', '.join(bad)}")


def cmd_dump_features(cfg, args):
    m = _manifest(args)
    _, split = _split(cfg, args, m)
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = UnpairedIqaModel.create(cfg["fusion"], m.n_classes, seed=cfg["seed"])
    out = P.open_run_dir(args.out, cfg, "dump-features")
    bank = ImageBank(m)
    samples = bank.samples(split[1])[: args.limit]
    refs = eval_references(samples, split[1], cfg["eval"]["ref_seed"])
    path = out / f"features_stage{args.stage}.uiqa"
    n = P.dump_features(model, m, samples, refs, args.stage, path)
    print(f"wrote {n} tensors to {path}")


COMMANDS = {
    "forge": cmd_forge,
    "splits": cmd_splits,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-features": cmd_dump_features,
}


def _shorthands(args):
    """Dedicated flags win over --set and the config file."""
    keys = {"seed": "seed", "split": "split", "fusion": "fusion", "ratio": "splits.ratio", "repeats": "splits.repeats"}
    out = []
    for attr, key in keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(P.parse_override(f"{key}={json.dumps(value)}"))
    if getattr(args, "seed", None) is not None and args.command == "splits":
        out.append({"splits": {"seed": args.seed}})
    return out


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = P.resolve_config(args.config, args.overrides + _shorthands(args))
        if getattr(args, "stage", 0) not in range(4):
            raise UsageError(f"--stage must lie in 0..3, got {args.stage}")
        COMMANDS[args.command](cfg, args)
    except (UsageError, P.ConfigError) as exc:
        print(f"eriqa {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is operational
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"eriqa {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
