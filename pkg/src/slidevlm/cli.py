"""One binary, subcommand per pipeline stage.

Every command writes its outputs under --run-dir and records them in
manifest.json with content hashes; nothing emits timestamps, so rerunning
a command with the same inputs and seed reproduces every byte. Exit codes:
0 success, 2 bad config or usage (the error line names the failing key),
3 missing input file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .curation import (
    ClientError,
    EndpointConfig,
    LiveChatClient,
    MockChatClient,
    PromptCache,
    ReportRecord,
    run_curation,
    save_candidates,
    split_assign,
)
from .encoders import PatchEncoder, load_embeddings, save_embeddings
from .evaluation import (
    caption_eval,
    load_records,
    random_baseline,
    majority_vote_baseline,
    thumbnail_baseline,
    vqa_eval,
    write_record_csv,
    write_summary_csv,
)
from .interpret import load_trace, render_overlay, saliency, saliency_csv, save_trace
from .lm import Vocab
from .model import SlideInputs, SlideVLM
from .numerics import CheckpointError, UsageError, load_checkpoint, save_checkpoint
from .slide_io import (
    PatchGrid,
    Raster,
    Region,
    SlideSpec,
    read_raster,
    synth_slide,
    thumbnail,
    tile_slide,
    write_raster,
)
from .training import StageConfig, TrainSample, run_stage

# -- run-dir bookkeeping ------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record_outputs(run_dir: Path, names: list[str]) -> None:
    """Merge this command's outputs into manifest.json (name -> sha256)."""
    manifest_path = run_dir / "manifest.json"
    manifest = {"outputs": {}}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    for name in names:
        manifest["outputs"][name] = _sha256_file(run_dir / name)
    manifest_path.write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _load_jsonl(path: Path, required: set[str]) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if set(row) != required:
                raise UsageError(
                    f"{path}:{lineno}: expected keys {sorted(required)}, got {sorted(row)}"
                )
            rows.append(row)
    return rows


def _slide_inputs(slides_dir: Path, slide_id: str) -> SlideInputs:
    emb_path = slides_dir / f"{slide_id}.emb"
    grid_path = slides_dir / f"{slide_id}.grid"
    emb = load_embeddings(emb_path)
    coords = None
    if grid_path.exists():
        grid = PatchGrid.load(grid_path)
        coords = [(e.row, e.col) for e in grid.tissue_entries()]
    return SlideInputs(emb, coords)


def _replay_model(path: Path):
    """Patch -> reply table keyed by sha256(pixels)[:16], 'default' fallback."""
    table = json.loads(path.read_text(encoding="utf-8"))

    def model(patch: Raster) -> str:
        key = hashlib.sha256(patch.pixels.tobytes()).hexdigest()[:16]
        if key in table:
            return table[key]
        if "default" in table:
            return table["default"]
        raise UsageError(f"replay file has no entry for patch {key} and no default")

    return model


# -- commands -----------------------------------------------------------------------


def _cmd_synth(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    regions = []
    for text in args.region or []:
        parts = text.split(":")
        if len(parts) != 5:
            raise UsageError(f"--region wants label:x:y:w:h, got {text!r}")
        label, x, y, w, h = parts[0], *map(int, parts[1:])
        regions.append(Region(label, x, y, w, h))
    spec = SlideSpec(args.width, args.height, args.patch_size, regions)
    raster, labels = synth_slide(seed, spec)
    write_raster(run_dir / "slide.ppm", raster)
    label_map = {f"{r},{c}": lab for (r, c), lab in labels.items()}
    (run_dir / "labels.json").write_text(
        json.dumps(label_map, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _record_outputs(run_dir, ["slide.ppm", "labels.json"])
    print(f"slide {raster.width}x{raster.height} regions={len(regions)}")
    return 0


def _cmd_tile(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    raster = read_raster(args.slide)
    grid = tile_slide(raster, patch_size=cfg.tree["model"]["patch_size"])
    grid.save(run_dir / "grid.txt")
    _record_outputs(run_dir, ["grid.txt"])
    print(f"tiles={len(grid.entries)} tissue={len(grid.tissue_entries())}")
    return 0


def _cmd_encode(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    raster = read_raster(args.slide)
    grid = PatchGrid.load(args.grid)
    encoder = PatchEncoder(
        dim=cfg.tree["model"]["patch_dim"],
        patch_size=cfg.tree["model"]["patch_size"],
        seed=seed,
    )
    emb = encoder.encode_grid(raster, grid)
    save_embeddings(run_dir / "embeddings.bin", emb)
    _record_outputs(run_dir, ["embeddings.bin"])
    print(f"embeddings n={emb.n_patches} dim={emb.dim}")
    return 0


def _cmd_train(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    rows = _load_jsonl(Path(args.samples), {"slide_id", "kind", "prompt", "target"})
    samples = [TrainSample(r["slide_id"], r["kind"], r["prompt"], r["target"]) for r in rows]
    slides_dir = Path(args.slides_dir)
    slides = {s.slide_id: _slide_inputs(slides_dir, s.slide_id) for s in samples}

    vocab_path = run_dir / "vocab.txt"
    if vocab_path.exists():
        vocab = Vocab.load(vocab_path)
    else:
        vocab = Vocab.build([s.prompt for s in samples] + [s.target for s in samples])
        vocab.save(vocab_path)

    model = SlideVLM(cfg.model_config(), vocab, seed=seed)
    if args.init is not None:
        tensors, _ = load_checkpoint(args.init)
        model.load_tensors(tensors)
    save_checkpoint(
        run_dir / "init.ckpt",
        model.tensors(),
        {"kind": "init", "stage": args.stage, "seed": seed},
    )

    overrides = cfg.stage_overrides(args.stage)
    stage_cfg = StageConfig(
        stage=args.stage,
        lr=args.lr if args.lr is not None else overrides["lr"],
        epochs=args.epochs if args.epochs is not None else overrides["epochs"],
        seed=seed,
        accum_steps=overrides["accum_steps"],
        weight_decay=overrides["weight_decay"],
    )
    result = run_stage(stage_cfg, samples, model, slides, out_dir=run_dir)
    outputs = ["vocab.txt", "init.ckpt", "loss.csv"]
    outputs += [str(Path(p).relative_to(run_dir)) for p in result.checkpoints]
    if result.best_checkpoint is not None:
        outputs.append(str(Path(result.best_checkpoint).relative_to(run_dir)))
    _record_outputs(run_dir, sorted(set(outputs)))
    print(f"stage={args.stage} steps={len(result.losses)} best_epoch_loss={result.best_epoch_loss:.6f}")
    return 0


def _cmd_infer(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    vocab = Vocab.load(args.vocab)
    model = SlideVLM(cfg.model_config(), vocab, seed=seed)
    tensors, _ = load_checkpoint(args.checkpoint)
    model.load_tensors(tensors)
    emb = load_embeddings(args.emb)
    coords = None
    if args.grid is not None:
        grid = PatchGrid.load(args.grid)
        coords = [(e.row, e.col) for e in grid.tissue_entries()]
    text, trace = model.generate(
        SlideInputs(emb, coords), args.prompt, max_len=args.max_len
    )
    (run_dir / "answer.txt").write_text(text + "\n", encoding="utf-8")
    outputs = ["answer.txt"]
    if trace is not None:
        save_trace(run_dir / "trace.ckpt", trace)
        outputs.append("trace.ckpt")
    _record_outputs(run_dir, outputs)
    print(text)
    return 0


def _judge_client(args, cfg: RunConfig):
    if getattr(args, "judge_replay", None) is not None:
        return MockChatClient.from_replay(args.judge_replay)
    chat = cfg.tree["clients"]["chat"]
    if getattr(args, "judge", False):
        if not chat["base_url"]:
            raise UsageError("--judge needs clients.chat.base_url in the config")
        return LiveChatClient(EndpointConfig(**chat))
    return None


def _cmd_caption_eval(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    rows = _load_jsonl(Path(args.pairs), {"candidate", "reference"})
    pairs = [(r["candidate"], r["reference"]) for r in rows]
    client = _judge_client(args, cfg)
    report = caption_eval(pairs, client=client, jobs=cfg.jobs)
    payload = {
        "n": report.n,
        "bleu": {str(k): v for k, v in report.bleu.items()},
        "rouge_l": report.rouge_l,
        "judge_mean": report.judge_mean,
        "judge_missing": report.judge_missing,
        "judge_prompt_sha256": report.judge_prompt_sha256,
    }
    (run_dir / "caption_report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _record_outputs(run_dir, ["caption_report.json"])
    print(f"bleu1={report.bleu[1]:.4f} rouge_l={report.rouge_l:.4f}")
    return 0


def _cmd_vqa_eval(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    records = load_records(args.records)
    if args.predictor == "random":
        predictions = random_baseline(records, seed=seed)
    else:
        predictions = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    report = vqa_eval(records, predictions)
    write_record_csv(run_dir / "vqa_records.csv", records, predictions)
    write_summary_csv(run_dir / "vqa_summary.csv", report)
    _record_outputs(run_dir, ["vqa_records.csv", "vqa_summary.csv"])
    acc = report.overall_accuracy
    print(f"overall={'n/a' if acc is None else f'{acc:.4f}'} n={report.total}")
    return 0


def _cmd_baseline(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    if args.kind == "random":
        records = load_records(args.records)
        predictions = random_baseline(records, seed=seed)
        (run_dir / "predictions.json").write_text(
            json.dumps(predictions, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        report = vqa_eval(records, predictions)
        write_summary_csv(run_dir / "vqa_summary.csv", report)
        _record_outputs(run_dir, ["predictions.json", "vqa_summary.csv"])
        acc = report.overall_accuracy
        print(f"overall={'n/a' if acc is None else f'{acc:.4f}'} n={report.total}")
        return 0
    options = args.options.split("|")
    model = _replay_model(Path(args.replay))
    raster = read_raster(args.slide)
    if args.kind == "majority":
        grid = PatchGrid.load(args.grid)
        answer = majority_vote_baseline(
            raster, grid, model, options, k_patches=args.k, seed=seed
        )
    else:
        answer = thumbnail_baseline(raster, model, options)
    (run_dir / "answer.txt").write_text(("" if answer is None else answer) + "\n", encoding="utf-8")
    _record_outputs(run_dir, ["answer.txt"])
    print("none" if answer is None else answer)
    return 0


def _cmd_interpret(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    trace = load_trace(args.trace)
    sal = saliency(trace, k=args.k, renormalize=not args.no_renormalize)
    raster = read_raster(args.slide)
    grid = PatchGrid.load(args.grid)
    overlay = render_overlay(thumbnail(raster, target=1024), grid, sal)
    write_raster(run_dir / "overlay.ppm", overlay)
    (run_dir / "saliency.csv").write_text(saliency_csv(sal), encoding="utf-8")
    _record_outputs(run_dir, ["overlay.ppm", "saliency.csv"])
    print(" ".join(str(i) for i, _ in sal.entries))
    return 0


def _cmd_curate(args, cfg: RunConfig, run_dir: Path, seed: int) -> int:
    rows = _load_jsonl(Path(args.reports), {"patient_id", "report_text", "slide_ids"})
    reports = [ReportRecord(r["patient_id"], r["report_text"], r["slide_ids"]) for r in rows]
    if args.replay is not None:
        client = MockChatClient.from_replay(args.replay)
    else:
        chat = cfg.tree["clients"]["chat"]
        if not chat["base_url"]:
            raise UsageError("curate needs --replay or clients.chat.base_url in the config")
        client = LiveChatClient(EndpointConfig(**chat))
    filter_clients = None
    if args.filter_replay:
        if len(args.filter_replay) != 4:
            raise UsageError("--filter-replay must be given exactly 4 times")
        filter_clients = [
            MockChatClient.from_replay(p, model=f"filter{i}")
            for i, p in enumerate(args.filter_replay)
        ]
    cache = PromptCache(args.cache_dir if args.cache_dir else run_dir / "cache")
    result = run_curation(
        reports, client, cache, filter_clients=filter_clients, jobs=cfg.jobs
    )

    def dump_jsonl(name: str, rows_iter) -> None:
        with open(run_dir / name, "w", encoding="utf-8") as fh:
            for row in rows_iter:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    dump_jsonl(
        "cleaned.jsonl",
        ({"patient_id": k, "cleaned": v} for k, v in sorted(result.cleaned.items())),
    )
    dump_jsonl(
        "captions.jsonl",
        ({"patient_id": k, "caption": v} for k, v in sorted(result.captions.items())),
    )
    save_candidates(run_dir / "candidates.jsonl", result.candidates)
    save_candidates(run_dir / "kept.jsonl", result.kept)
    dump_jsonl(
        "drops.jsonl",
        ({"item": d.item, "reason": d.reason, "payload": d.payload} for d in result.drops),
    )
    (run_dir / "flagged.json").write_text(
        json.dumps(result.flagged, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    split = split_assign(reports, seed=seed)
    (run_dir / "split.json").write_text(
        json.dumps(
            {"train": sorted(split.train), "test": sorted(split.test)}, indent=2
        )
        + "\n",
        encoding="utf-8",
    )
    _record_outputs(
        run_dir,
        [
            "cleaned.jsonl",
            "captions.jsonl",
            "candidates.jsonl",
            "kept.jsonl",
            "drops.jsonl",
            "flagged.json",
            "split.json",
        ],
    )
    print(
        f"reports={len(reports)} candidates={len(result.candidates)} "
        f"kept={len(result.kept)} flagged={len(result.flagged)}"
    )
    return 0


# -- argument parsing ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidevlm", description="Whole-slide vision-language pipeline."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file (defaults apply without it)")
    common.add_argument("--run-dir", default=".", help="directory for outputs and manifest.json")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=None, help="overrides the config worker cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic slide",
                       description="Writes slide.ppm and labels.json.")
    p.add_argument("--width", type=int, default=448)
    p.add_argument("--height", type=int, default=448)
    p.add_argument("--patch-size", type=int, default=224)
    p.add_argument("--region", action="append", help="label:x:y:w:h, repeatable")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", parents=[common], help="tile a slide into a patch grid",
                       description="Reads a PPM/PGM slide; writes grid.txt.")
    p.add_argument("--slide", required=True)
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("encode", parents=[common], help="encode tissue patches",
                       description="Reads slide + grid; writes embeddings.bin.")
    p.add_argument("--slide", required=True)
    p.add_argument("--grid", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("train", parents=[common], help="run one training stage",
                       description="Reads samples.jsonl and a slides dir of <id>.emb/<id>.grid; "
                                   "writes vocab.txt, init.ckpt, per-epoch and best checkpoints, loss.csv.")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2))
    p.add_argument("--samples", required=True)
    p.add_argument("--slides-dir", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--lr", type=float, default=None, help="overrides the config stage lr")
    p.add_argument("--epochs", type=int, default=None, help="overrides the config stage epochs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", parents=[common], help="greedy decoding for one slide",
                       description="Writes answer.txt and trace.ckpt.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--grid", default=None, help="grid file supplying patch coordinates")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-len", type=int, default=48)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("caption-eval", parents=[common], help="caption metrics over pairs",
                       description="Reads pairs.jsonl (candidate/reference); writes caption_report.json.")
    p.add_argument("--pairs", required=True)
    p.add_argument("--judge", action="store_true", help="rate pairs with the configured chat client")
    p.add_argument("--judge-replay", default=None, help="replay file standing in for the judge")
    p.set_defaults(func=_cmd_caption_eval)

    p = sub.add_parser("vqa-eval", parents=[common], help="closed-set VQA accuracy",
                       description="Reads records.jsonl and predictions; writes vqa_records.csv, vqa_summary.csv.")
    p.add_argument("--records", required=True)
    p.add_argument("--predictions", default=None, help="JSON {record id: letter}")
    p.add_argument("--predictor", choices=("random",), default=None,
                   help="generate predictions instead of reading them")
    p.set_defaults(func=_cmd_vqa_eval)

    p = sub.add_parser("baseline", parents=[common], help="slide-level answer baselines",
                       description="random: predictions.json + vqa_summary.csv over records; "
                                   "majority/thumbnail: answer.txt via a replay model.")
    p.add_argument("--kind", choices=("random", "majority", "thumbnail"), required=True)
    p.add_argument("--records", default=None, help="records.jsonl (random)")
    p.add_argument("--slide", default=None, help="slide PPM (majority, thumbnail)")
    p.add_argument("--grid", default=None, help="grid file (majority)")
    p.add_argument("--options", default=None, help="option texts joined with | (majority, thumbnail)")
    p.add_argument("--replay", default=None, help="patch-keyed reply table (majority, thumbnail)")
    p.add_argument("--k", type=int, default=30, help="patches to sample (majority)")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("interpret", parents=[common], help="saliency overlay from a trace",
                       description="Reads trace.ckpt, slide, grid; writes overlay.ppm and saliency.csv.")
    p.add_argument("--trace", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--no-renormalize", action="store_true",
                   help="rank raw attention mass instead of row-renormalized")
    p.set_defaults(func=_cmd_interpret)

    p = sub.add_parser("curate", parents=[common], help="report -> caption/QA pipeline",
                       description="Reads reports.jsonl; writes cleaned/captions/candidates/kept/drops/"
                                   "flagged/split files. Chat traffic is cached under --cache-dir.")
    p.add_argument("--reports", required=True)
    p.add_argument("--replay", default=None, help="replay file standing in for the chat model")
    p.add_argument("--filter-replay", action="append", default=[],
                   help="replay file for one filter model; give exactly 4")
    p.add_argument("--cache-dir", default=None, help="prompt cache (default <run-dir>/cache)")
    p.set_defaults(func=_cmd_curate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.tree["seed"] = args.seed
        if args.jobs is not None:
            cfg.tree["jobs"] = args.jobs
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "vqa-eval" and (args.predictions is None) == (args.predictor is None):
            raise UsageError("vqa-eval needs exactly one of --predictions / --predictor")
        if args.command == "baseline":
            need = {"random": ("records",), "majority": ("slide", "grid", "options", "replay"),
                    "thumbnail": ("slide", "options", "replay")}[args.kind]
            for flag in need:
                if getattr(args, flag) is None:
                    raise UsageError(f"baseline --kind {args.kind} needs --{flag.replace('_', '-')}")
        return args.func(args, cfg, run_dir, cfg.seed)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        missing = exc.filename if exc.filename else str(exc)
        print(f"error: missing-input: {missing}", file=sys.stderr)
        return 3
    except (UsageError, CheckpointError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except ClientError as exc:
        print(f"error: client: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
