"""Acceptance criteria 1-10, one pass/fail line each (see the ``criterion`` fixture).

Criteria 5-7 train real models on the full desk corpus with the settings in
configs/desk.json and take most of the suite's runtime (about an hour on one
CPU core).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from eriqa import pipeline as P
from eriqa.checkpoint import load_model, model_bytes, save_model
from eriqa.forge import ForgeConfig, build_corpus
from eriqa.gradsuite import run_suite
from eriqa.metrics import (
    DegenerateCorrelation,
    ScoreTable,
    dumps_report,
    fit_logistic,
    l_test,
    logistic,
    p_test,
    plcc,
    srocc,
    srocc_closed_form,
    weighted_average,
)
from eriqa.model import MafeParams, TinyBackbone, UnpairedIqaModel, cosine_fusion, images_to_batch, mafe_attention
from eriqa.report import ablation_markdown
from eriqa.tensor import Tensor
from eriqa.trainer import ImageBank, batch_sum_loss, make_splits, pair_external_reference

from oracles import brute_spearman, textbook_pearson

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@pytest.fixture(scope="session")
def cfg():
    return P.resolve_config(DESK)


@pytest.fixture(scope="session")
def desk(cfg, tmp_path_factory):
    return P.forge_corpus(cfg, tmp_path_factory.mktemp("desk"))


# -- 1 ------------------------------------------------------------------------------------

def test_c01_gradient_suite(criterion):
    t0 = time.perf_counter()
    rows = run_suite(trials=20, seed=0, tol=1e-4)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in rows)
    failed = [r.name for r in rows if not r.passed]
    ok = not failed and worst <= 1e-4 and secs < 120
    assert criterion(1, ok, f"{len(rows)} entries x 20 trials, max rel err {worst:.2e}, {secs:.1f} s"
                     + (f", failed: {failed}" if failed else ""))


# -- 2 ------------------------------------------------------------------------------------

def test_c02_metric_oracles(criterion):
    rng = np.random.default_rng(2024)
    worst_s = worst_p = worst_cf = 0.0
    for i in range(1000):
        n = int(rng.integers(3, 51))
        if i % 2:
            y = rng.integers(0, max(2, n // 3), n).astype(float)
            yh = rng.integers(0, max(2, n // 3), n).astype(float)
        else:
            y, yh = rng.standard_normal(n), rng.standard_normal(n)
        try:
            s = srocc(y, yh)
        except DegenerateCorrelation:
            continue
        worst_s = max(worst_s, abs(s - brute_spearman(list(y), list(yh))))
        if i % 2 == 0:
            worst_cf = max(worst_cf, abs(srocc_closed_form(y, yh) - s))
            try:
                params = fit_logistic(yh, y)
            except ValueError:
                continue
            worst_p = max(worst_p, abs(plcc(y, yh, params) - textbook_pearson(list(y), list(params(yh)))))
    ok = max(worst_s, worst_p, worst_cf) <= 1e-12
    assert criterion(2, ok, f"1000 tables: |srocc-oracle| {worst_s:.1e}, |plcc-oracle| {worst_p:.1e}, "
                            f"|closed form-general| {worst_cf:.1e}")


# -- 3 ------------------------------------------------------------------------------------

def test_c03_logistic_fit(criterion):
    q = np.linspace(-3, 3, 60)
    beta = (40.0, 1.5, 0.3, 2.0, 30.0)
    y = logistic(q, beta)
    params = fit_logistic(q, y)
    mse = float(np.mean((params(q) - y) ** 2))
    r = plcc(y, q, params)
    qa = np.linspace(0, 5, 30)
    ra = plcc(-2.5 * qa + 7, qa)
    ok = mse < 1e-8 and r > 1 - 1e-9 and abs(ra - 1) <= 1e-9
    assert criterion(3, ok, f"residual MSE {mse:.1e}, PLCC 1-{1 - r:.1e}, affine PLCC 1-{1 - ra:.1e}")


# -- 4 ------------------------------------------------------------------------------------

def test_c04_weighted_average(criterion):
    wa = weighted_average((0.970, 0.948, 0.865, 0.864, 0.929), (779, 866, 3000, 1162, 10073))
    assert criterion(4, abs(wa - 0.915) <= 0.001, f"WA SROCC {wa:.4f} (target 0.915 +- 0.001)")


# -- 5 ------------------------------------------------------------------------------------

def test_c05_pretraining_learnability(criterion, cfg, desk):
    bank = ImageBank(desk)
    split = make_splits(desk, cfg["splits"]["ratio"], 1, cfg["splits"]["seed"]).repeats[0]
    # initial loss at the zero-initialised head, first training batch
    model = UnpairedIqaModel.create(cfg["fusion"], desk.n_classes, seed=0)
    rng = np.random.default_rng(0)
    batch = bank.samples(split[0])[:64]
    refs = [pair_external_reference(s.pristine_id, split[0], rng) for s in batch]
    d = np.stack([bank.images[s.path] for s in batch])
    r = np.stack([bank.pristine[p] for p in refs])
    loss0 = batch_sum_loss(model, d, r, [s.class_label for s in batch])
    expect = len(batch) * math.log(desk.n_classes)
    loss_ok = abs(loss0 - expect) <= 0.02 * expect
    t0 = time.perf_counter()
    accs = []
    for seed in range(3):
        run = dict(cfg, seed=seed, pretrain=dict(cfg["pretrain"], seed=seed))
        _, res = P.run_pretrain(run, desk, split, "none")
        accs.append(res.best_metric)
    secs = time.perf_counter() - t0
    med = float(np.median(accs))
    ok = med >= 0.90 and secs < 15 * 60 and loss_ok
    assert criterion(5, ok, f"median held-out accuracy {med:.3f} over seeds {[round(a, 3) for a in accs]} "
                            f"(need 0.90), {secs / 60:.1f} min; initial batch-sum loss {loss0:.3f} vs "
                            f"N ln 26 = {expect:.3f}")


# -- 6 and 7 share one ablation run ------------------------------------------------------

@pytest.fixture(scope="session")
def ablation(cfg, desk, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    plan = make_splits(desk, cfg["splits"]["ratio"], cfg["ablate"]["repeats"], cfg["splits"]["seed"])
    backbone = P.get_backbone(cfg, out / "backbone.uiqa")
    pre_cfg = ForgeConfig.from_dict(dict(cfg["forge"], seed=cfg["ablate"]["pretrain_corpus_seed"]))
    pre = build_corpus(pre_cfg, out / "pretrain_corpus")
    per_seed, seconds = {}, {}
    for kind in cfg["ablate"]["kinds"]:
        t0 = time.perf_counter()
        per_seed.update(P.run_ablation(cfg, desk, out / kind, kinds=[kind], plan=plan, backbone=backbone,
                                       pretrain_manifest=pre))
        seconds[kind] = time.perf_counter() - t0
    return out, plan, per_seed, seconds


def test_c06_finetuning_learnability(criterion, cfg, desk, ablation):
    out, plan, per_seed, seconds = ablation
    ls, ps = [], []
    for rep in range(len(per_seed["mafe"])):
        table = ScoreTable.from_csv((out / "mafe" / f"scores_mafe_split{rep}.csv").read_text())
        ls.append(l_test(table))
        ps.append(p_test(table))
    med, l_med, p_med = (float(np.median(v)) for v in (per_seed["mafe"], ls, ps))
    secs = seconds["mafe"]
    ok = med >= 0.85 and l_med >= 0.90 and p_med >= 0.90 and secs < 30 * 60
    assert criterion(6, ok, f"MAFE median SROCC {med:.4f} over {len(per_seed['mafe'])} splits, "
                            f"L {l_med:.3f}, P {p_med:.3f}, {secs / 60:.1f} min")


def test_c07_ablation_direction(criterion, ablation, capsys):
    out, _, per_seed, _ = ablation
    med = {k: float(np.median(v)) for k, v in per_seed.items()}
    table = ablation_markdown(per_seed)
    (out / "ablation.md").write_text(table)
    checks = {
        "mafe >= max(cosine, bottleneck) - 0.005": med["mafe"] >= max(med["cosine"], med["bottleneck"]) - 0.005,
        "mafe >= none + 0.005": med["mafe"] >= med["none"] + 0.005,
        "cosine >= none": med["cosine"] >= med["none"],
        "bottleneck >= none": med["bottleneck"] >= med["none"],
        "mafe >= none": med["mafe"] >= med["none"],
    }
    failed = [k for k, v in checks.items() if not v]
    summary = ", ".join(f"{k} {med[k]:.4f}" for k in ("none", "bottleneck", "cosine", "mafe"))
    ok = not failed
    with capsys.disabled():
        print("\n" + table)
    assert criterion(7, ok, f"median SROCC {summary}" + (f"; failed: {failed}" if failed else ""))


# -- 8 ------------------------------------------------------------------------------------

def test_c08_baseline_ignores_reference(criterion, desk):
    bank = ImageBank(desk)
    rng = np.random.default_rng(8)
    model = UnpairedIqaModel.create("none", desk.n_classes, seed=8, backbone=TinyBackbone.init(rng))
    model.classifier.weight.data[:] = rng.standard_normal(model.classifier.weight.shape)
    model.score_head.weight.data[:] = rng.standard_normal(model.score_head.weight.shape)
    samples = [s for s in desk.samples if s.level > 0][:16]
    d = images_to_batch([bank.images[s.path] for s in samples])
    ids = desk.pristine_ids

    def refs():
        return images_to_batch([bank.pristine[pair_external_reference(s.pristine_id, ids, rng)] for s in samples])

    base_s, base_l = model.forward_score(d, refs()).data, model.forward_pretrain(d, refs()).data
    same = 0
    for _ in range(10):
        r = refs()
        same += np.array_equal(model.forward_score(d, r).data, base_s) and \
            np.array_equal(model.forward_pretrain(d, r).data, base_l)
    assert criterion(8, same == 10, f"{same}/10 reference swaps bit-identical (scores and logits)")


# -- 9 ------------------------------------------------------------------------------------

def test_c09_mafe_bounds_and_cosine_identities(criterion):
    rng = np.random.default_rng(9)
    lo, hi, inside = 1.0, 0.0, 0
    for i in range(1000):
        dtype = np.float64 if i % 2 else np.float32
        c = int(rng.integers(2, 17))
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        p = MafeParams.init(rng, c, dtype)
        scale = rng.uniform(0.1, 5.0)
        fd = Tensor((rng.standard_normal((2, c, h, w)) * scale).astype(dtype))
        fe = Tensor((rng.standard_normal((2, c, h, w)) * scale).astype(dtype))
        a = mafe_attention(p, fd, fe).data
        inside += bool(np.all((a > 0) & (a < 1)))
        lo, hi = min(lo, a.min()), max(hi, a.max())
    # identities: f with itself, and with a partner that is exactly orthogonal per channel
    ident = 0
    for _ in range(100):
        f = rng.standard_normal((4, 6, 6))
        mask = rng.random((4, 6, 6)) < 0.5
        mask[:, 0, 0], mask[:, 0, 1] = True, False
        f_on = np.where(mask, f, 0.0)
        perp = np.where(mask, 0.0, rng.standard_normal((4, 6, 6)))
        ident += np.array_equal(cosine_fusion(Tensor(f), Tensor(f)).data, 2 * f) and \
            np.array_equal(cosine_fusion(Tensor(f_on), Tensor(perp)).data, f_on)
    ok = inside == 1000 and ident == 100
    assert criterion(9, ok, f"attention in ({lo:.4f}, {hi:.4f}) for {inside}/1000 inputs; "
                            f"cosine identities exact in {ident}/100 draws")


# -- 10 -----------------------------------------------------------------------------------

def test_c10_determinism_and_formats(criterion, cfg, tmp_path):
    small = dict(cfg, forge=dict(cfg["forge"], n_pristine=10),
                 pretrain=dict(cfg["pretrain"], epochs=1), finetune=dict(cfg["finetune"], epochs=1))
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        m = P.forge_corpus(small, root / "corpus")
        digest = b"".join((root / "corpus" / s.path).read_bytes() for s in m.samples)
        digest += (root / "corpus" / "manifest.csv").read_bytes()
        split = make_splits(m, 0.8, 1, 0).repeats[0]
        model, _ = P.run_pretrain(small, m, split, "mafe", root)
        model, _ = P.run_finetune(small, m, split, model, TinyBackbone.init(np.random.default_rng(10)), root)
        table, report = P.evaluate_model(small, m, split, model)
        outs.append((digest, model_bytes(model), (root / "pretrain_mafe.uiqa").read_bytes(),
                     dumps_report(report), table.to_csv()))
    same = [x == y for x, y in zip(*outs)]
    first = tmp_path / "a" / "finetune_mafe.uiqa"
    again = tmp_path / "rewrite.uiqa"
    save_model(load_model(first), again)
    rewrite = again.read_bytes() == first.read_bytes()
    ok = all(same) and rewrite
    names = ["corpus", "fine-tuned checkpoint", "pre-trained checkpoint", "report", "scores"]
    assert criterion(10, ok, "identical across two runs: " + ", ".join(f"{n} {'yes' if s else 'NO'}"
                                                                        for n, s in zip(names, same))
                     + f"; write-read-write identical: {'yes' if rewrite else 'NO'}")
