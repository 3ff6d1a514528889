"""Run configuration and the experiment drivers behind the command line.

A run config is one nested JSON object.  Every knob is reachable by a dotted
path (``pretrain.lr``, ``forge.n_pristine``) so command-line overrides can
address it; the fully resolved object is written to each run directory.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .checkpoint import backbone_bytes, backbone_from_bytes, load_backbone, load_model, save_model, save_tensors
from .forge import ForgeConfig, build_corpus, read_manifest
from .metrics import DegenerateCorrelation, dumps_report, evaluate_table, srocc
from .model import UnpairedIqaModel, images_to_batch
from .report import ablation_csv, ablation_figure, ablation_markdown, history_figure, scatter_figure
from .trainer import (
    ImageBank,
    SplitPlan,
    TrainConfig,
    make_splits,
    pretrain,
    pretrain_backbone,
    finetune,
    score_table,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad config file or override; reported as a usage error."""


def default_config():
    return {
        "seed": 0,
        "fusion": "mafe",
        "split": 0,
        "forge": ForgeConfig().to_dict(),
        "splits": {"ratio": 0.8, "repeats": 10, "seed": 0},
        "backbone": {"seed": 0, "n_train": 2000, "n_test": 500, "epochs": 4, "batch_size": 32, "lr": 2e-3,
                     "size": 64},
        "pretrain": asdict(TrainConfig.defaults("pretrain")),
        "finetune": asdict(TrainConfig.defaults("finetune")),
        "eval": {"ref_seed": 0},
        "ablate": {"kinds": ["none", "bottleneck", "cosine", "mafe"], "repeats": 5, "pretrain_corpus_seed": 1000},
    }


def _merge(base, extra, path=""):
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} expects an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_override(text):
    """``a.b=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def resolve_config(path=None, overrides=()):
    cfg = default_config()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        _merge(cfg, loaded)
    for item in overrides:
        _merge(cfg, item if isinstance(item, dict) else parse_override(item))
    return cfg


def build_id():
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"eriqa-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"eriqa-{__version__}"


def open_run_dir(out, cfg, command):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out / "build.txt").write_text(build_id() + "\n")
    (out / "run.json").write_text(json.dumps({"command": command, "seed": cfg["seed"], "build": build_id()},
                                             indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# Steps


def train_config(cfg, stage, **changes):
    d = dict(cfg[stage])
    d.update(changes)
    d["stage"] = stage
    return TrainConfig.from_dict(d)


def forge_corpus(cfg, out):
    return build_corpus(ForgeConfig.from_dict(cfg["forge"]), out)


def split_plan(cfg, manifest, splits_path=None):
    if splits_path is not None:
        return SplitPlan.from_json(Path(splits_path).read_text())
    s = cfg["splits"]
    return make_splits(manifest, s["ratio"], s["repeats"], s["seed"])


def get_backbone(cfg, cache=None):
    """Train the semantic backbone, or reuse ``cache`` when it already exists."""
    if cache is not None and Path(cache).exists():
        return load_backbone(cache)
    b = cfg["backbone"]
    bb, acc = pretrain_backbone(b["seed"], b["n_train"], b["n_test"], b["epochs"], b["batch_size"], b["lr"], b["size"])
    log.info("backbone shape-task accuracy %.3f", acc)
    if cache is not None:
        Path(cache).write_bytes(backbone_bytes(bb))
    return bb


def run_pretrain(cfg, manifest, split, fusion, out=None, model_seed=None):
    tc = train_config(cfg, "pretrain")
    seed = cfg["seed"] if model_seed is None else model_seed
    model = UnpairedIqaModel.create(fusion, manifest.n_classes, seed=seed)
    result = pretrain(model, ImageBank(manifest), split, tc)
    if out is not None:
        out = Path(out)
        save_model(model, out / f"pretrain_{fusion}.uiqa")
        (out / f"pretrain_{fusion}_history.csv").write_text(result.history_csv())
        history_figure(result.history, out / f"pretrain_{fusion}_history.png", "held-out accuracy")
    return model, result


def run_finetune(cfg, manifest, split, model, backbone, out=None, tag=None, seed=None):
    tc = train_config(cfg, "finetune", **({} if seed is None else {"seed": seed}))
    model.backbone = backbone
    result = finetune(model, ImageBank(manifest), split, tc)
    if out is not None:
        out = Path(out)
        tag = tag or model.fusion_kind
        save_model(model, out / f"finetune_{tag}.uiqa")
        (out / f"finetune_{tag}_history.csv").write_text(result.history_csv())
        history_figure(result.history, out / f"finetune_{tag}_history.png", "held-out SROCC")
    return model, result


def evaluate_model(cfg, manifest, split, model, name="desk"):
    bank = ImageBank(manifest)
    test = bank.samples(split[1])
    scale = cfg["finetune"]["target_scale"]
    table = score_table(model, bank, test, split[1], cfg["eval"]["ref_seed"], scale)
    return table, evaluate_table(table, name)


def write_eval(out, table, report):
    out = Path(out)
    (out / "scores.csv").write_text(table.to_csv())
    (out / "report.json").write_text(dumps_report(report) + "\n")
    scatter_figure(table, out / "scatter.png")


def held_out_srocc(table):
    d = table.select(lambda r: r[3] > 0)
    try:
        return srocc(d.y, d.yhat)
    except DegenerateCorrelation:
        return 0.0


def run_ablation(cfg, manifest, out, kinds=None, repeats=None, plan=None, backbone=None, pretrain_manifest=None):
    """Every fusion kind over the same splits; returns {kind: [SROCC per split]}.

    Each kind is pre-trained once on a separate corpus (its own seed, so no
    content is shared with the desk corpus) and then fine-tuned per split.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ab = cfg["ablate"]
    kinds = list(kinds or ab["kinds"])
    repeats = repeats or ab["repeats"]
    plan = plan or split_plan(cfg, manifest)
    if repeats > len(plan.repeats):
        raise ValueError(f"ablation asks for {repeats} splits but the plan holds {len(plan.repeats)}")
    backbone = backbone or get_backbone(cfg, out / "backbone.uiqa")
    bb_blob = backbone_bytes(backbone)
    if pretrain_manifest is None:
        pre_dir = out / "pretrain_corpus"
        fc = dict(cfg["forge"], seed=ab["pretrain_corpus_seed"])
        pretrain_manifest = (read_manifest(pre_dir) if (pre_dir / "manifest.csv").exists()
                             else build_corpus(ForgeConfig.from_dict(fc), pre_dir))
    pre_split = make_splits(pretrain_manifest, cfg["splits"]["ratio"], 1, cfg["splits"]["seed"]).repeats[0]
    per_seed = {}
    for kind in kinds:
        ck = out / f"pretrain_{kind}.uiqa"
        if not ck.exists():
            run_pretrain(cfg, pretrain_manifest, pre_split, kind, out)
        per_seed[kind] = []
        for rep in range(repeats):
            model = load_model(ck)
            bb = backbone_from_bytes(bb_blob)
            model, _ = run_finetune(cfg, manifest, plan.repeats[rep], model, bb, out, tag=f"{kind}_split{rep}",
                                    seed=cfg["seed"] + rep)
            table, _ = evaluate_model(cfg, manifest, plan.repeats[rep], model)
            (out / f"scores_{kind}_split{rep}.csv").write_text(table.to_csv())
            per_seed[kind].append(held_out_srocc(table))
            log.info("ablation %s split %d SROCC %.4f", kind, rep, per_seed[kind][-1])
    (out / "ablation.csv").write_text(ablation_csv(per_seed))
    (out / "ablation.md").write_text(ablation_markdown(per_seed))
    ablation_figure(per_seed, out / "ablation.png")
    return per_seed


def dump_features(model, manifest, samples, refs, stage, path):
    """Pre-fusion features of one stage for each sample, as a named-tensor file."""
    if not 0 <= stage < 4:
        raise ValueError(f"stage must lie in 0..3, got {stage}")
    bank = ImageBank(manifest)
    named = []
    for s, r in zip(samples, refs):
        model.feature_hook = []
        d = images_to_batch([bank.images[s.path]], model.dtype)
        e = images_to_batch([bank.pristine[r]], model.dtype)
        model.main_features(d, e)
        _, f_d, f_er = model.feature_hook[stage]
        named.append((f"{s.path}.f_d", f_d[0]))
        if f_er is not None:
            named.append((f"{s.path}.f_er", f_er[0]))
    model.feature_hook = None
    save_tensors(path, named, model.fusion_kind, model.n_classes)
    return len(named)
