"""``cyclet`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from cyclet import pipeline, ssda
from cyclet.config import RunConfig, load_config
from cyclet.data import generate_synthetic, load_manifest, write_manifest
from cyclet.errors import ConfigError, CycletError, DataError
from cyclet.evaluation import LatencyReport, Metrics, ScoreInputs, challenge_score, evaluate, measure_latency
from cyclet.models import load_checkpoint

log = logging.getLogger("cyclet")

COMMANDS = ("gen-data", "train-teacher", "pseudo-label", "train-student", "eval", "bench", "ablate", "report")


def _run_dir(cfg: RunConfig, out, name: str) -> Path:
    d = Path(out).resolve() if out else cfg.out_dir / name
    d.mkdir(parents=True, exist_ok=True)
    cfg.save(d / "config.ini")
    return d


def _need(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise DataError(f"{what} not found", path)
    return Path(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out=None) -> dict[str, Path]:
    root = Path(out).resolve() if out else cfg.dataset_root
    paths = generate_synthetic(cfg.synth_spec(), root)
    cfg.save(root / "config.ini")
    for split, p in paths.items():
        m = load_manifest(p, cfg.dataset.num_classes, split, check_images=False)
        print(f"{split:5s} {len(m):5d} images  {p}")
    return paths


def cmd_train_teacher(cfg: RunConfig, out=None) -> pipeline.TeacherResult:
    cfg.validate(require_dataset=True)
    d = _run_dir(cfg, out, "teacher")
    res = pipeline.train_teacher(cfg, d)
    for ev in res.log.events:
        print(f"warning: {ev}")
    r = res.report
    print(f"teacher phase A  top1={res.phase_a['top1']:.4f} top3={res.phase_a['top3']:.4f}")
    print(f"teacher curation tau={r.tau} accepted {r.accepted}/{r.total}")
    print(f"checkpoints in {d}")
    return res


def cmd_pseudo_label(cfg: RunConfig, checkpoint=None, out=None) -> tuple[Path, ssda.CurationReport]:
    cfg.validate(require_dataset=True)
    ckpt = _need(Path(checkpoint) if checkpoint else cfg.out_dir / "teacher" / "teacher.ckpt", "teacher checkpoint")
    teacher = load_checkpoint(ckpt)
    d = _run_dir(cfg, out, "pseudo")
    pseudo, report = pipeline.pseudo_manifest(cfg, pipeline.teacher_probs(cfg, teacher), cfg.ssda.tau_student)
    write_manifest(pseudo, d / "pseudo.csv")
    info = {**report.as_dict(), "pseudo_accuracy": pipeline.pseudo_accuracy(cfg, pseudo), "checkpoint": str(ckpt)}
    (d / "curation.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(f"tau={report.tau} accepted {report.accepted}/{report.total} ({report.acceptance_rate:.1%})")
    print("per-class: " + " ".join(str(n) for n in report.per_class))
    return d / "pseudo.csv", report


def cmd_train_student(cfg: RunConfig, pseudo=None, out=None) -> pipeline.StudentResult:
    cfg.validate(require_dataset=True)
    manifest = None
    if cfg.ssda.enabled:
        path = _need(Path(pseudo) if pseudo else cfg.out_dir / "pseudo" / "pseudo.csv", "pseudo manifest")
        manifest = load_manifest(path, cfg.dataset.num_classes, "train")
    d = _run_dir(cfg, out, "student")
    res = pipeline.train_student(cfg, cfg.run.seed, manifest, None, d)
    for i, (t1, t3) in enumerate(res.stage_metrics, start=1):
        print(f"after stage {i}: top1={t1:.4f} top3={t3:.4f}")
    print(f"checkpoint {d / 'student.ckpt'}")
    return res


def _resize_for(cfg: RunConfig, arch: str) -> int:
    return cfg.teacher.resize_side if arch == "teacher" else cfg.student.resize_side


def _write_latency(report: LatencyReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "ms"])
        for i, ms in enumerate(report.samples_ms):
            w.writerow([i, f"{ms:.6f}"])


def _latency_line(r: LatencyReport) -> str:
    return (f"latency over {r.iterations} runs (warmup {r.warmup}): mean={r.mean_ms:.3f} ms "
            f"std={r.std_ms:.3f} min={r.min_ms:.3f} max={r.max_ms:.3f}")


def cmd_bench(cfg: RunConfig, checkpoint=None, out=None) -> LatencyReport:
    cfg.validate()
    ckpt = _need(Path(checkpoint) if checkpoint else cfg.out_dir / "student" / "student.ckpt", "checkpoint")
    model = load_checkpoint(ckpt)
    d = _run_dir(cfg, out, "bench")
    report = measure_latency(model, cfg.eval.iterations, cfg.eval.warmup, cfg.run.seed)
    _write_latency(report, d / "latency.csv")
    print(_latency_line(report))
    return report


def cmd_eval(cfg: RunConfig, checkpoint=None, out=None) -> tuple[Metrics, LatencyReport, float]:
    cfg.validate(require_dataset=True)
    ckpt = _need(Path(checkpoint) if checkpoint else cfg.out_dir / "student" / "student.ckpt", "checkpoint")
    model = load_checkpoint(ckpt)
    d = _run_dir(cfg, out, "eval")
    test = pipeline.manifests(cfg)["test"]
    metrics = evaluate(model, test, _resize_for(cfg, model.config.arch))
    latency = measure_latency(model, cfg.eval.iterations, cfg.eval.warmup, cfg.run.seed)
    score = challenge_score(ScoreInputs(metrics.top1, metrics.top3, latency.mean_ms, cfg.eval.C))
    _write_latency(latency, d / "latency.csv")
    with open(d / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["checkpoint", "n_examples", "top1", "top3", "runtime_ms", "C", "score"])
        w.writerow([str(ckpt), metrics.n_examples, f"{metrics.top1:.6f}", f"{metrics.top3:.6f}",
                    f"{latency.mean_ms:.6f}", repr(cfg.eval.C), f"{score:.6f}"])
    print(f"top1={metrics.top1:.4f} top3={metrics.top3:.4f} on {metrics.n_examples} test images")
    print(_latency_line(latency))
    print(f"score={score:.6f} (C={cfg.eval.C})")
    return metrics, latency, score


def cmd_ablate(cfg: RunConfig, which: str, checkpoint=None, out=None) -> list[pipeline.ExperimentReport]:
    cfg.validate()
    pipeline.ensure_dataset(cfg)
    d = _run_dir(cfg, out, "ablate")
    teacher = pipeline.load_or_train_teacher(cfg, d, checkpoint)
    ab = pipeline.Ablation(cfg, teacher, d)
    names = pipeline.ABLATIONS if which == "all" else (which,)
    reports = []
    for name in names:
        rep = ab.run(name)
        path = rep.write(d)
        print(f"\n{name} ({path})\n{rep.to_markdown()}")
        reports.append(rep)
    return reports


def cmd_report(cfg: RunConfig, out=None) -> Path:
    d = Path(out).resolve() if out else cfg.out_dir / "ablate"
    tables = sorted(d.glob("ablate_*.csv"))
    if not tables:
        raise DataError("no ablation tables found; run `cyclet ablate` first", d)
    parts = ["# Ablation report", ""]
    for t in tables:
        with open(t, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        parts += [f"## {t.stem.removeprefix('ablate_')}", "",
                  "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        parts += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        parts.append("")
    snap = d / "config.ini"
    if snap.is_file():
        parts += ["## Config", "", "```ini", snap.read_text(encoding="utf-8").strip(), "```", ""]
    path = d / "report.md"
    path.write_text("\n".join(parts), encoding="utf-8")
    print("\n".join(parts))
    return path


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="output directory for this command")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cyclet", description="Teacher/student SSDA with cycle training.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train-teacher", parents=[common], help="two-phase teacher fine-tuning")
    p = sub.add_parser("pseudo-label", parents=[common], help="curate pseudo-labels at tau_student")
    p.add_argument("--checkpoint", help="teacher checkpoint")
    p = sub.add_parser("train-student", parents=[common], help="cycle-train the student")
    p.add_argument("--pseudo", help="pseudo manifest from pseudo-label")
    for name, text in (("eval", "test accuracy, latency and score"), ("bench", "latency only")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="model checkpoint")
    p = sub.add_parser("ablate", parents=[common], help="threshold / stage / SSDA x Aug sweeps")
    p.add_argument("which", choices=[*pipeline.ABLATIONS, "all"])
    p.add_argument("--checkpoint", help="teacher checkpoint (trained when omitted)")
    sub.add_parser("report", parents=[common], help="collect ablation tables into report.md")
    return parser


def _dispatch(args, cfg: RunConfig):
    c = args.command
    if c == "gen-data":
        return cmd_gen_data(cfg, args.out)
    if c == "train-teacher":
        return cmd_train_teacher(cfg, args.out)
    if c == "pseudo-label":
        return cmd_pseudo_label(cfg, args.checkpoint, args.out)
    if c == "train-student":
        return cmd_train_student(cfg, args.pseudo, args.out)
    if c == "eval":
        return cmd_eval(cfg, args.checkpoint, args.out)
    if c == "bench":
        return cmd_bench(cfg, args.checkpoint, args.out)
    if c == "ablate":
        return cmd_ablate(cfg, args.which, args.checkpoint, args.out)
    return cmd_report(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        cfg.validate()
        _dispatch(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return e.exit_code
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return e.exit_code
    except CycletError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
