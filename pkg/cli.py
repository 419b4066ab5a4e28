"""
cli.py - 命令行入口

    python cli.py [--config FILE] [--set key=value ...] [--force] [--log-level LEVEL] <subcommand> ...

子命令：prepare / select / pretrain / train / synthesize / eval-wer / eval-mi /
        mi-bench / plot / report / serve

退出码：0 成功；2 用法或校验失败；3 运行期失败（含 mi-bench 未通过）。
数值默认值都在配置里；子命令上的 --steps / --seed / --n 只是覆盖项。
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import database
from corpus.engine import load_manifest
from errors import InputError, MRTTSError
from evaluation.asr import make_adapter
from evaluation.engine import (
    compare_mi_trajectories,
    embedding_distance_report,
    evaluate_content_quality,
    read_mi_trajectory,
    write_mi_plot,
    write_wer_report,
)
from mi_constraint.engine import estimate_posthoc_mi, run_gaussian_benchmark
from pipeline import engine as pipeline
from pipeline.checkpoint import load_checkpoint
from pipeline.systems import PRETRAIN_SYSTEM_ID
from settings import MIConfig, build_config, read_pairs

logger = logging.getLogger("mrtts")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"


# ---------------------------------------------------------------------------
# 配置
# ---------------------------------------------------------------------------

def _overrides(args: argparse.Namespace, extra: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    for key, value in (extra or {}).items():
        if value is not None:
            pairs[key] = str(value)
    return pairs


def _fresh_config(args: argparse.Namespace, extra: Optional[Dict[str, str]] = None):
    pairs = read_pairs(Path(args.config)) if args.config else {}
    pairs.update(_overrides(args, extra))
    return build_config(pairs)


def _run_config(args: argparse.Namespace, run_dir: Path, extra: Optional[Dict[str, str]] = None):
    return pipeline.run_config(run_dir, _overrides(args, extra), Path(args.config) if args.config else None)


def _run_id(run_dir: Path, system_id: str, seed: int) -> str:
    return f"{Path(run_dir).resolve().name}:{system_id}:{seed}"


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_prepare(args: argparse.Namespace) -> int:
    if args.manifest is None and args.toy is None:
        raise InputError("prepare needs --manifest PATH or --toy N")
    cfg = _fresh_config(args)
    manifest = pipeline.prepare_run(
        Path(args.out), cfg,
        manifest_path=Path(args.manifest) if args.manifest else None,
        toy=args.toy, seed=args.seed, force=args.force, workers=args.workers,
    )
    print(f"prepared {len(manifest)} utterances in {args.out}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(args, run_dir, {"selection.n_references": args.n})
    index = pipeline.select_run(
        run_dir, cfg, embedder_name=args.embedder,
        embedder_root=Path(args.embedder_root) if args.embedder_root else None, workers=args.workers,
    )
    print(f"selected {cfg.selection.n_references} references for {len(index)} targets")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(args, run_dir, {"system.steps": args.steps, "system.seed": args.seed})
    ckpt = pipeline.pretrain_run(run_dir, cfg, force=args.force)
    print(f"pre-trained style encoder: step={ckpt.step} config_hash={ckpt.config_hash}")
    return EXIT_OK


def _register(run_dir: Path, ckpt) -> None:
    records = pipeline.read_records(run_dir / pipeline.RECORDS_FILE)
    try:
        mi_tail = read_mi_trajectory(run_dir).tail_mean
    except InputError:
        mi_tail = None
    cfg = ckpt.config
    summary = database.RunSummary(
        run_id=_run_id(run_dir, ckpt.system_id, cfg.system.seed),
        system_id=ckpt.system_id,
        architecture=cfg.system.architecture.value,
        n_references=cfg.system.n_references,
        steps=ckpt.step,
        seed=cfg.system.seed,
        config_hash=ckpt.config_hash,
        final_l_mel=records[-1].losses.l_mel,
        mi_tail_mean=mi_tail,
        run_dir=str(run_dir.resolve()),
    )

    async def _write():
        await database.init_db()
        await database.record_run(summary)

    asyncio.run(_write())
    logger.info("registered run %s", summary.run_id)


def cmd_train(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data) if args.data else run_dir
    cfg = _run_config(args, data_dir, {
        "system.system_id": args.system, "system.steps": args.steps, "system.seed": args.seed,
    })
    ckpt = pipeline.train_run(
        run_dir, cfg, data_dir=data_dir,
        pretrained_path=Path(args.pretrained) if args.pretrained else None, force=args.force,
    )
    print(f"trained {ckpt.system_id}: step={ckpt.step} config_hash={ckpt.config_hash}")
    if args.register:
        _register(run_dir, ckpt)
    return EXIT_OK


def _load_for_inference(run_dir: Path, data_dir: Path, system_id: Optional[str]):
    ckpt = pipeline.load_run_system(run_dir, system_id)
    cfg = ckpt.config
    manifest = pipeline.load_run(data_dir, cfg)
    index, cache = pipeline.load_run_selection(data_dir)
    return ckpt, cfg, manifest, index, cache


def cmd_synthesize(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data) if args.data else run_dir
    ckpt, cfg, manifest, index, cache = _load_for_inference(run_dir, data_dir, args.system)
    out_dir = Path(args.out) if args.out else run_dir / pipeline.SAMPLES_DIR
    texts = [args.text] if args.text else [u.text for u in manifest][: args.limit]
    for i, text in enumerate(texts):
        result = pipeline.synthesize(text, ckpt, manifest, index, cache, seed=args.seed)
        name = args.name if (args.name and len(texts) == 1) else f"{ckpt.system_id}_{i:04d}"
        path = pipeline.write_synthesis(result, out_dir, name, text, cfg)
        refs = ",".join(result.reference_ids) or "-"
        print(f"{path} steps={result.stop_step} refs={refs} max_steps_exceeded={result.max_steps_exceeded}")
    return EXIT_OK


def cmd_eval_wer(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    if args.ground_truth:
        manifest = load_manifest(run_dir / pipeline.MANIFEST_FILE)
        samples = [(u.id, manifest.resolve_audio(u), u.text) for u in manifest]
    else:
        samples = pipeline.read_samples_index(Path(args.samples) if args.samples else run_dir / pipeline.SAMPLES_DIR)

    options = {"timeout": args.timeout} if args.adapter == "http" else {}
    adapter = make_adapter(args.adapter, samples, **options)
    try:
        report = evaluate_content_quality(samples, adapter, workers=args.workers)
    finally:
        adapter.close()
    out = Path(args.out) if args.out else run_dir / "wer_report.txt"
    write_wer_report(report, out)
    sys.stdout.write(report.to_text())
    if args.register and report.aggregate is not None:
        ckpt = pipeline.load_run_system(run_dir, args.system)
        run_id = _run_id(run_dir, ckpt.system_id, ckpt.config.system.seed)

        async def _write():
            await database.init_db()
            return await database.record_wer(run_id, report.aggregate)

        if not asyncio.run(_write()):
            logger.warning("run %s is not registered; WER not recorded", run_id)
    return EXIT_OK


def cmd_eval_mi(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data) if args.data else run_dir
    ckpt, cfg, manifest, index, _ = _load_for_inference(run_dir, data_dir, args.system)
    pretrained = load_checkpoint(
        Path(args.pretrained) if args.pretrained else pipeline.checkpoint_path(data_dir, PRETRAIN_SYSTEM_ID)
    )
    model, cfg = pipeline.load_system(ckpt)
    frozen = pipeline.load_frozen(pretrained, cfg)
    ids, E, E_prime = pipeline.style_pairs(model, frozen, manifest, cfg, index)
    estimate = estimate_posthoc_mi(E, E_prime, cfg.mi, steps=args.steps)
    print(f"system={ckpt.system_id} utterances={len(ids)} posthoc_mi={estimate.value!r}")
    return EXIT_OK


def cmd_mi_bench(args: argparse.Namespace) -> int:
    cfg = MIConfig(seed=args.seed)
    result = run_gaussian_benchmark(args.rho, samples=args.samples, steps=args.steps, cfg=cfg, batch_size=args.batch_size)
    print(result.to_text())
    return EXIT_OK if result.passed else EXIT_RUNTIME


def cmd_plot(args: argparse.Namespace) -> int:
    comparison = compare_mi_trajectories([Path(r) for r in args.runs], args.labels)
    sys.stdout.write(comparison.to_text())
    out = write_mi_plot(comparison, Path(args.out))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    data_dir = Path(args.data) if args.data else run_dir
    ckpt, cfg, manifest, index, _ = _load_for_inference(run_dir, data_dir, args.system)
    pretrained = load_checkpoint(pipeline.checkpoint_path(data_dir, PRETRAIN_SYSTEM_ID))
    frozen = pipeline.load_frozen(pretrained, cfg)
    report = embedding_distance_report(ckpt, frozen, manifest, index)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from main import serve

    serve(host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrtts", description="multi-reference expressive TTS workbench")
    parser.add_argument("--config", help="experiment config file (key=value)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--force", action="store_true", help="regenerate outputs that already exist")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build or generate a corpus and extract mels")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--toy", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("select", help="embed transcripts and build the reference index")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--embedder", default="toy-hash:d=32:layers=3:seed=0")
    p.add_argument("--embedder-root")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("pretrain", help="train the single-reference GST system")
    p.add_argument("--run", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one system of the ablation matrix")
    p.add_argument("--run", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="prepared run dir holding corpus, index and pre-trained encoder")
    p.add_argument("--pretrained")
    p.add_argument("--register", action="store_true", help="record the run in the results database")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize text with a trained system")
    p.add_argument("--run", required=True)
    p.add_argument("--text")
    p.add_argument("--out")
    p.add_argument("--name")
    p.add_argument("--system")
    p.add_argument("--data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=10, help="utterances to synthesize when --text is absent")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval-wer", help="WER of synthesized samples via an ASR adapter")
    p.add_argument("--run", required=True)
    p.add_argument("--adapter", choices=["mock", "http"], default="mock")
    p.add_argument("--samples")
    p.add_argument("--ground-truth", action="store_true", help="evaluate the corpus audio itself")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--system")
    p.add_argument("--register", action="store_true")
    p.set_defaults(func=cmd_eval_wer)

    p = sub.add_parser("eval-mi", help="post-hoc MI between E and E' of a trained system")
    p.add_argument("--run", required=True)
    p.add_argument("--system")
    p.add_argument("--data")
    p.add_argument("--pretrained")
    p.add_argument("--steps", type=int, default=500)
    p.set_defaults(func=cmd_eval_mi)

    p = sub.add_parser("mi-bench", help="MI estimator check on correlated Gaussians")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mi_bench)

    p = sub.add_parser("plot", help="compare MI trajectories across runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="per-utterance distance between E and E'")
    p.add_argument("--run", required=True)
    p.add_argument("--system")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the results portal")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)
    try:
        return args.func(args)
    except MRTTSError as e:
        print(f"error: {e.msg}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as e:
        # torch 的数值与后端错误
        error = MRTTSError(f"{type(e).__name__}: {e}")
        print(f"error: {error.msg}", file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
