"""Command-line entry point: ``virtuoso <command> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, describe_keys, load_config
from .corpus import CorpusError, ManifestError, default_corpus_spec, generate_corpus, load_corpus_spec, write_audio
from .frontend import save_mel
from .losses import LossError

OUT_ENV = "VIRTUOSO_OUT"
HELP_WIDTH = 100


class CommandError(RuntimeError):
    pass


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else _out_root() / default


def _manifests(args) -> list[Path]:
    paths = [Path(m) for m in (args.manifest or [])]
    if getattr(args, "corpus", None):
        root = Path(args.corpus)
        paths += [root / n for n in ("paired_tts.jsonl", "paired_asr.jsonl", "untranscribed_speech.jsonl",
                                     "unspoken_text.jsonl")]
    if not paths:
        raise CommandError("training: at least one --manifest or a --corpus directory is required")
    for p in paths:
        if not p.exists():
            raise CommandError(f"training: manifest not found: {p}")
    return paths


def _config(args):
    if args.config and not Path(args.config).exists():
        raise CommandError(f"config: file not found: {args.config}")
    return load_config(args.config, args.overrides or [])


def _save_output(path: Path, mel: np.ndarray, waveform=None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".vau":
        if waveform is None:
            from .inference import griffin_lim

            waveform = griffin_lim(mel)
        write_audio(path, waveform)
    else:
        save_mel(path, mel)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> str:
    if args.spec:
        if not Path(args.spec).exists():
            raise CommandError(f"corpus: spec file not found: {args.spec}")
        spec = load_corpus_spec(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = default_corpus_spec(args.seed or 0, args.scale)
    out = _out(args, "data")
    corpus = generate_corpus(spec, out)
    n = sum(sum(1 for _ in open(p, encoding="utf-8")) for p in corpus.manifests.values())
    return f"gen-data: wrote {n} records in {len(corpus.manifests)} manifests to {out}"


def cmd_train(args) -> str:
    from .training import run_training

    cfg = _config(args)
    out = _out(args, "train")
    final = run_training(cfg, _manifests(args), out, resume=not args.restart, progress=True)
    return f"train: {cfg.curriculum.total_steps} steps, final checkpoint {final}"


def cmd_finetune(args) -> str:
    from .training import finetune

    cfg = _config(args)
    if not Path(args.base).exists():
        raise CommandError(f"finetune: base checkpoint not found: {args.base}")
    out = _out(args, "finetune")
    final = finetune(args.base, _manifests(args), cfg, out)
    return f"finetune: {cfg.curriculum.total_steps} steps from {args.base}, final checkpoint {final}"


def cmd_synth(args) -> str:
    from .inference import SynthesisRequest, synthesize

    req = SynthesisRequest(args.text, args.speaker, args.language, args.scheme,
                           Path(args.reference) if args.reference else None)
    out = Path(args.out)
    res = synthesize(req, args.checkpoint, waveform=out.suffix == ".vau")
    _save_output(out, res.mel, res.waveform)
    return f"synth: {res.mel.shape[0]} frames for {len(res.durations)} tokens -> {out}"


def cmd_asr(args) -> str:
    from .inference import recognize

    if not Path(args.audio).exists():
        raise CommandError(f"asr: audio not found: {args.audio}")
    res = recognize(args.checkpoint, audio=args.audio)
    if args.out:
        Path(args.out).write_text(res.text + "\n", encoding="utf-8")
    print(res.text)
    return f"asr: {len(res.tokens)} tokens from {args.audio}"


def cmd_vc(args) -> str:
    from .inference import convert_voice

    if not Path(args.audio).exists():
        raise CommandError(f"vc: audio not found: {args.audio}")
    mel = convert_voice(args.checkpoint, args.speaker, audio=args.audio)
    out = Path(args.out)
    _save_output(out, mel)
    return f"vc: {mel.shape[0]} frames as {args.speaker} -> {out}"


def cmd_eval(args) -> str:
    from .eval import emit_report, evaluate_tts

    for p, what in ((args.checkpoint, "checkpoint"), (args.asr, "ASR checkpoint"), (args.manifest, "manifest")):
        if not Path(p).exists():
            raise CommandError(f"eval: {what} not found: {p}")
    seen = args.seen_languages.split(",") if args.seen_languages else None
    report = evaluate_tts(args.checkpoint, args.manifest, args.asr, variant=args.variant, seen_languages=seen)
    out = _out(args, "eval")
    emit_report(report, out)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return f"eval: {len(report.rows)} rows -> {out}"


def cmd_repro(args) -> str:
    from .pipeline import ReproSettings, run_repro

    cfg = _config(args)
    settings = ReproSettings(seed=cfg.seed, corpus_scale=args.scale, asr_steps=args.asr_steps,
                             finetune_steps=args.finetune_steps)
    out = _out(args, "repro")
    res = run_repro(out, cfg, settings)
    print((out / "report" / "report.txt").read_text(encoding="utf-8"), end="")
    return f"repro: {len(res.run_dirs)} models in {sum(res.timings.values()):.0f}s -> {out / 'report'}"


# ---------------------------------------------------------------- parser


class _Formatter(argparse.RawDescriptionHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (keys listed in `virtuoso --help`)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted-key config overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="virtuoso",
        formatter_class=_Formatter,
        description="Joint speech-text model: data generation, training, synthesis, recognition and evaluation.",
        epilog=f"configuration keys (set in --config YAML or as key=value overrides):\n{describe_keys()}\n\n"
        f"environment: {OUT_ENV} sets the default output root (default: ./runs)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="generate the synthetic multilingual corpus", formatter_class=_Formatter)
    p.add_argument("--spec", help="corpus spec YAML (default: the built-in three-language spec)")
    p.add_argument("--seed", type=int, default=None, help="corpus seed")
    p.add_argument("--scale", type=float, default=1.0, help="multiply the default split sizes")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from manifests", formatter_class=_Formatter)
    _config_args(p)
    p.add_argument("--manifest", action="append", help="manifest file (repeatable)")
    p.add_argument("--corpus", help="corpus directory; uses its four training manifests")
    p.add_argument("--out", help="run directory (resumed if it holds checkpoints)")
    p.add_argument("--restart", action="store_true", help="ignore existing checkpoints in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on paired TTS data", formatter_class=_Formatter)
    _config_args(p)
    p.add_argument("--base", required=True, help="pretrained run or step directory")
    p.add_argument("--manifest", action="append", required=True, help="PAIRED_TTS manifest (repeatable)")
    p.add_argument("--out", help="output run directory")
    p.set_defaults(func=cmd_finetune, corpus=None)

    p = sub.add_parser("synth", help="text to mel (.vmel) or waveform (.vau)", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--speaker", required=True, help="speaker id known to the checkpoint, or ANY-SPKR")
    p.add_argument("--language", help="language id (required with the language adapter)")
    p.add_argument("--scheme", choices=["BYTE", "GRAPHEME"], help="must match the checkpoint")
    p.add_argument("--reference", help="reference audio for the global style vector")
    p.add_argument("--out", required=True, help="output path; .vau writes Griffin-Lim audio, otherwise a mel file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("asr", help="recognize an audio file", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", help="write the transcript here")
    p.set_defaults(func=cmd_asr)

    p = sub.add_parser("vc", help="voice conversion to a target speaker", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--speaker", required=True, help="target speaker id")
    p.add_argument("--out", required=True, help="output mel (.vmel) or audio (.vau)")
    p.set_defaults(func=cmd_vc)

    p = sub.add_parser("eval", help="synthesize-then-recognize TER report", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True, help="model under test")
    p.add_argument("--asr", required=True, help="held-out ASR evaluator checkpoint")
    p.add_argument("--manifest", required=True, help="evaluation manifest")
    p.add_argument("--variant", default="model", help="row label in the report")
    p.add_argument("--seen-languages", help="comma-separated languages that get a reconstruction MAE")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", help="full pipeline: data, evaluator, TTS-only/Pair/All, eval, fine-tune",
                       formatter_class=_Formatter)
    _config_args(p)
    p.add_argument("--scale", type=float, default=1.0, help="corpus size multiplier")
    p.add_argument("--asr-steps", type=int, default=2000, help="ASR evaluator training steps")
    p.add_argument("--finetune-steps", type=int, default=600, help="fine-tuning steps for the All variant")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        summary = args.func(args)
    except (CommandError, ConfigError, CorpusError, ManifestError, LossError, FileNotFoundError, ValueError,
            KeyError, RuntimeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
