"""End-to-end acceptance checks, one test per criterion, each printing PASS/FAIL."""
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from cyclet.augment import AugDecision, AugPolicy, apply, decide
from cyclet.cli import cmd_bench, cmd_train_student
from cyclet.config import load_config, parse_config
from cyclet.cycle import CycleSchedule, cycle_train
from cyclet.data import load_image_set, load_manifest
from cyclet.evaluation import ScoreInputs, challenge_score, topk_accuracy
from cyclet.models import ModelConfig, build_student
from cyclet.nncore import checksum
from cyclet.nncore.optim import LrSchedule, lr_at
from cyclet.ssda import pseudo_label
from cyclet import pipeline
from gradcases import CASES, check
from oracles import challenge_score_oracle, pseudo_label_oracle, simplex_grid, topk_oracle
from conftest import TINY_INI

ACCEPTANCE_INI = Path(__file__).resolve().parent.parent / "configs" / "acceptance.ini"


@pytest.fixture
def verdict(capsys):
    def _say(n: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}" + (f": {detail}" if detail else ""))
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return _say


def test_c01_gradient_oracle(verdict):
    t0 = time.perf_counter()
    worst = {name: max(check(case, seed) for seed in range(20)) for name, case in CASES.items()}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(1, "gradients match float64 central differences", ok, detail)


def test_c02_pseudo_label_grid(verdict):
    grid = simplex_grid()
    taus = (0.0, 0.5, 0.8, 0.85, 0.9, 1.0)
    agree = total = 0
    for tau in taus:
        for vec in grid:
            probs = [float(v) for v in vec]
            total += 1
            agree += pseudo_label(probs, tau) == pseudo_label_oracle(probs, tau)
    boundary = pseudo_label([0.85, 0.10, 0.05], 0.85) == (0, 0.85)
    verdict(2, "pseudo_label equals brute-force oracle", len(grid) == 231 and agree == total and boundary,
            f"{agree}/{total} agree, boundary accepted={boundary}")


def test_c03_augmentation_branches(verdict):
    rng = np.random.default_rng(7)
    pol = AugPolicy()
    n = 100_000
    branches = [decide(pol, rng).branch for _ in range(n)]
    freq = {b: branches.count(b) / n for b in ("flip", "identity", "randaug")}
    target = {"flip": 0.3, "identity": 0.4, "randaug": 0.3}
    within = all(abs(freq[b] - target[b]) < 0.01 for b in target)
    images = [rng.integers(0, 256, size=(int(rng.integers(2, 17)),) * 2 + (3,), dtype=np.uint8) for _ in range(100)]
    ident = all(np.array_equal(apply(x, AugDecision(0.5, "identity")), x) for x in images)
    flip = AugDecision(0.1, "flip")
    invol = all(np.array_equal(apply(apply(x, flip), flip), x) for x in images)
    detail = " ".join(f"{b}={f:.4f}" for b, f in freq.items()) + f"; identity exact={ident}; flip involution={invol}"
    verdict(3, "branch frequencies, identity and flip", within and ident and invol, detail)


def test_c04_freeze_invariants(verdict, tiny_dataset_root):
    data = load_image_set(load_manifest(tiny_dataset_root / "train.csv", 3), 10)
    model = build_student(ModelConfig(num_classes=3, input_side=8, width_multiplier=0.25, hidden_units=8), 0)
    sums = [checksum(model.group("backbone").params)]
    sched = CycleSchedule.default(batch_size=8)
    _, log = cycle_train(model, data, sched, seed=0, policy=AugPolicy(),
                         on_stage_end=lambda i, s, m: sums.append(checksum(m.group("backbone").params)))
    head = {p.name for p in model.group("head").params}
    frozen_ok = sums[1] == sums[0] and sums[3] == sums[2] and sums[2] != sums[1]
    grads_ok = log.grad_params["Exploitation"] == head and log.grad_params["Stabilization"] == head
    verdict(4, "backbone frozen in stages 1 and 3", frozen_ok and grads_ok and len(log.records) == 50,
            f"checksums stable={frozen_ok}; head-only grads={grads_ok}; epochs={len(log.records)}")


def test_c05_lr_schedule(verdict):
    s = LrSchedule(1e-3, 0.1, 20)
    want = {0: 1e-3, 19: 1e-3, 20: 1e-4, 40: 1e-5}
    errs = {e: abs(lr_at(s, e) - v) / v for e, v in want.items()}
    verdict(5, "staircase learning rate", max(errs.values()) <= 1e-12,
            ", ".join(f"lr({e})={lr_at(s, e):.3g}" for e in want))


def test_c06_score_formula(verdict):
    got = challenge_score(ScoreInputs(0.94, 0.9917, 1.61, 1.0))
    want = challenge_score_oracle(0.94, 0.9917, 1.61, 1.0)
    verdict(6, "composite score", abs(got - want) < 1e-9 and str(got).startswith("2.3996273"), f"{got!r} vs {want!r}")


def test_c07_topk_oracle(verdict):
    rng = np.random.default_rng(11)
    probs = rng.dirichlet(np.ones(10), size=1000)
    probs[::5, 3] = probs[::5, 7]
    labels = rng.integers(0, 10, size=1000)
    match = monotone = 0
    for i in range(1000):
        p, y = probs[i:i + 1], labels[i:i + 1]
        a1, a3 = topk_accuracy(p, y, 1), topk_accuracy(p, y, 3)
        match += a1 == topk_oracle(p, y, 1) and a3 == topk_oracle(p, y, 3)
        monotone += a1 <= a3
    verdict(7, "top-k equals sort oracle", match == 1000 and monotone == 1000, f"{match}/1000 match, {monotone}/1000 monotone")


def _pooled(a: list[float], b: list[float]) -> float:
    return math.sqrt((statistics.variance(a) + statistics.variance(b)) / 2)


def test_c08_end_to_end_trends(verdict, tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cfg = parse_config(ACCEPTANCE_INI.read_text(encoding="utf-8"), base, str(ACCEPTANCE_INI))
    cfg.validate()
    t0 = time.perf_counter()
    pipeline.ensure_dataset(cfg)
    teacher = pipeline.load_or_train_teacher(cfg, cfg.out_dir)
    ab = pipeline.Ablation(cfg, teacher, cfg.out_dir)
    full = ab.cells(cfg.ssda.tau_student, True)
    tau0 = ab.cells(0.0, True)
    baseline = ab.cells(None, False)
    elapsed = time.perf_counter() - t0

    stage = [[c.stage_metrics[k][0] for c in full] for k in range(3)]
    means = [statistics.fmean(s) for s in stage]
    tol = [_pooled(stage[k], stage[k + 1]) for k in range(2)]
    stages_ok = all(means[k + 1] >= means[k] - tol[k] for k in range(2))
    strict = means[0] <= means[1] <= means[2]
    m_full = statistics.fmean(c.top1 for c in full)
    m_tau0 = statistics.fmean(c.top1 for c in tau0)
    m_base = statistics.fmean(c.top1 for c in baseline)
    detail = (
        f"stages {means[0]:.4f} -> {means[1]:.4f} -> {means[2]:.4f} "
        f"(pooled sd {tol[0]:.4f}, {tol[1]:.4f}; strict order {strict}); "
        f"SSDA+Aug {m_full:.4f} vs baseline {m_base:.4f}; tau=0.8 {m_full:.4f} vs tau=0 {m_tau0:.4f}; "
        f"{len(full)} seeds, {elapsed / 60:.1f} min"
    )
    ok = stages_ok and m_full >= m_base and m_full >= m_tau0 and elapsed < 15 * 60 and len(full) == 5
    verdict(8, "stage, SSDA x Aug and threshold trends", ok, detail)


@pytest.fixture
def tiny_run(tmp_path, tiny_dataset_root):
    cfg = parse_config(TINY_INI, tmp_path)
    cfg.dataset.root = str(tiny_dataset_root)
    cfg.ssda.enabled = False
    return cfg


def test_c09_student_determinism(verdict, tiny_run, tmp_path):
    a = cmd_train_student(tiny_run, out=tmp_path / "a")
    b = cmd_train_student(tiny_run, out=tmp_path / "b")
    same = (tmp_path / "a/student.ckpt").read_bytes() == (tmp_path / "b/student.ckpt").read_bytes()
    verdict(9, "train-student is bit-reproducible", same and a.checksum == b.checksum, f"checksum {a.checksum[:16]}")


def test_c10_latency_harness(verdict, tiny_run, tmp_path):
    cmd_train_student(tiny_run, out=tmp_path / "s")
    cfg = parse_config(TINY_INI.replace("iterations = 5\nwarmup = 1\n", ""), tmp_path)
    assert cfg.eval.iterations == 20
    rep = cmd_bench(cfg, checkpoint=tmp_path / "s/student.ckpt", out=tmp_path / "b")
    rows = (tmp_path / "b/latency.csv").read_text().splitlines()[1:]
    ok = rep.iterations == 20 and len(rows) == 20 and rep.min_ms <= rep.mean_ms <= rep.max_ms
    verdict(10, "bench emits 20 post-warmup samples", ok,
            f"{rep.iterations} samples, mean {rep.mean_ms:.3f} ms in [{rep.min_ms:.3f}, {rep.max_ms:.3f}]")
