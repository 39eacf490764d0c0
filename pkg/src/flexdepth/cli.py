"""Command-line workflows over the library.

Subcommands: gen-data, train, avg-checkpoints, decode, benchmark-matrix,
oracle-dist, count-params, step-bench. Every command honors ``--config
FILE`` (JSON with optional "data", "model", "train", "decode" sections);
explicit flags override the file, which overrides the built-in desk-scale
defaults. Commands that produce files write a ``*.manifest.json`` next to
them, atomically, with everything needed to re-run the command.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .checkpoint import read_header, save_checkpoint
from .data import Vocab, build_vocab, generate, load_corpus, save_corpus
from .decoding import DecodeConfig, timed_decode_corpus
from .errors import ConfigError
from .evaluation import (
    DecodeSettings,
    count_params,
    oracle_distribution,
    quality_timing_matrix,
    step_time_benchmark,
    subsumed_vs_single_ratio,
)
from .model import ModelConfig, ModelParams
from .training import TrainConfig, average_checkpoints, train

DATA_DEFAULTS = {"task": "synth_translate", "size": 1000, "min_len": 4, "max_len": 12,
                 "vocab_size": 64}
MODEL_DEFAULTS = {"encoder_layers": 4, "decoder_layers": 4, "d_model": 64, "heads": 4,
                  "d_ff": 256, "max_len": 32, "dropout": 0.1, "label_smoothing": 0.1}
TRAIN_DEFAULTS = {"algorithm": "nxm", "steps": 1000, "batch_size": 32, "base_scale": 1.0,
                  "warmup_steps": 400, "adam_beta1": 0.9, "adam_beta2": 0.997,
                  "adam_eps": 1e-9, "checkpoint_every": 200, "keep_last": 5}
DECODE_DEFAULTS = {"beam": 4, "alpha": 0.6, "max_len": None}


def _merge(defaults: dict, file_section: dict | None, flags: dict) -> dict:
    resolved = dict(defaults)
    for key, value in (file_section or {}).items():
        if key not in resolved:
            raise ConfigError(f"unknown config key {key!r} (expected one of {sorted(resolved)})")
        resolved[key] = value
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _file_section(args, name: str) -> dict | None:
    if not getattr(args, "config", None):
        return None
    payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
    return payload.get(name)


def _flags(args, keys: list[str]) -> dict:
    return {key: getattr(args, key, None) for key in keys}


def _workpath(args, value) -> Path:
    path = Path(value)
    if not path.is_absolute() and getattr(args, "workdir", None):
        path = Path(args.workdir) / path
    return path


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(where: Path, command: str, args, resolved: dict,
                    inputs: dict, outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": getattr(args, "seed", None),
        "resolved_config": resolved,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(p) for p in outputs],
        "started_unix": started,
        "finished_unix": time.time(),
    }
    _write_atomic(where, json.dumps(manifest, indent=2) + "\n")


def _model_config(args, vocab_size: int) -> tuple[ModelConfig, dict]:
    resolved = _merge(MODEL_DEFAULTS, _file_section(args, "model"),
                      _flags(args, list(MODEL_DEFAULTS)))
    return ModelConfig(vocab_size=vocab_size, **resolved), resolved


def _decode_settings(args) -> tuple[DecodeSettings, dict]:
    resolved = _merge(DECODE_DEFAULTS, _file_section(args, "decode"),
                      {"beam": getattr(args, "beam", None),
                       "alpha": getattr(args, "alpha", None),
                       "max_len": getattr(args, "max_decode_len", None)})
    return DecodeSettings(**resolved), resolved


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    resolved = _merge(DATA_DEFAULTS, _file_section(args, "data"),
                      _flags(args, list(DATA_DEFAULTS)))
    out_dir = _workpath(args, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate(resolved["task"], resolved["size"],
                      (resolved["min_len"], resolved["max_len"]),
                      resolved["vocab_size"], seed=args.seed)
    vocab = build_vocab(corpus)
    corpus_path = out_dir / "corpus.tsv"
    vocab_path = out_dir / "vocab.txt"
    save_corpus(corpus, corpus_path, meta={"len_range": [resolved["min_len"], resolved["max_len"]],
                                           "vocab_size": resolved["vocab_size"]})
    vocab.save(vocab_path)
    _write_manifest(out_dir / "manifest.json", "gen-data", args, resolved, {},
                    [corpus_path, vocab_path], started)
    print(f"wrote {len(corpus)} pairs to {corpus_path} ({len(vocab)} vocabulary entries)")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    data_dir = _workpath(args, args.data)
    corpus = load_corpus(data_dir / "corpus.tsv")
    vocab = Vocab.load(data_dir / "vocab.txt")
    model_config, model_resolved = _model_config(args, vocab_size=len(vocab))
    train_resolved = _merge(TRAIN_DEFAULTS, _file_section(args, "train"),
                            _flags(args, list(TRAIN_DEFAULTS)))
    train_config = TrainConfig(seed=args.seed, **train_resolved)
    params = ModelParams.initialize(model_config, seed=args.seed)
    out_dir = _workpath(args, args.out)
    result = train(params, corpus, vocab, train_config, out_dir)
    outputs = list(result.checkpoints) + [result.log_path]
    _write_manifest(out_dir / "manifest.json", "train", args,
                    {"model": model_resolved, "train": train_resolved},
                    {"data": data_dir}, outputs, started)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {train_config.steps} steps ({train_config.algorithm}); "
          f"final loss {final:.4f}; {len(result.checkpoints)} checkpoints in {out_dir}")
    return 0


def cmd_avg_checkpoints(args) -> int:
    started = time.time()
    paths = [_workpath(args, p) for p in args.checkpoints]
    averaged = average_checkpoints(paths)
    out_path = _workpath(args, args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_path, averaged)
    _write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"),
                    "avg-checkpoints", args, {"count": len(paths)},
                    {f"checkpoint_{i}": p for i, p in enumerate(paths)}, [out_path], started)
    print(f"averaged {len(paths)} checkpoints into {out_path}")
    return 0


def _read_sources(path: Path) -> list[str]:
    if path.suffix == ".tsv":
        return load_corpus(path).sources()
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line]


def cmd_decode(args) -> int:
    started = time.time()
    checkpoint_path = _workpath(args, args.checkpoint)
    header_config = ModelConfig.from_dict(read_header(checkpoint_path)["config"])
    settings, decode_resolved = _decode_settings(args)
    config = DecodeConfig(
        enc_layers=args.enc_layers or header_config.encoder_layers,
        dec_layers=args.dec_layers or header_config.decoder_layers,
        beam=settings.beam, alpha=settings.alpha, max_len=settings.max_len)
    vocab_path = _workpath(args, args.vocab)
    input_path = _workpath(args, args.input)
    sources = _read_sources(input_path)
    run = timed_decode_corpus(checkpoint_path, sources, config, vocab_path)
    out_path = _workpath(args, args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_path, "".join(line + "\n" for line in run.translations))
    timing_path = out_path.with_suffix(out_path.suffix + ".timing.json")
    _write_atomic(timing_path, json.dumps(run.report(), indent=2) + "\n")
    _write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"), "decode",
                    args, {"decode": decode_resolved,
                           "enc_layers": config.enc_layers, "dec_layers": config.dec_layers},
                    {"checkpoint": checkpoint_path, "vocab": vocab_path, "input": input_path},
                    [out_path, timing_path], started)
    print(f"decoded {run.sentences} sentences at (n={config.enc_layers}, "
          f"m={config.dec_layers}) in {run.seconds_decode:.2f}s search time")
    return 0


def _vanilla_checkpoints(directory: Path) -> dict:
    found = {}
    for path in directory.glob("vanilla-n*-m*.ckpt"):
        stem = path.stem  # vanilla-n{n}-m{m}
        try:
            n = int(stem.split("-n")[1].split("-m")[0])
            m = int(stem.split("-m")[1])
        except (IndexError, ValueError):
            continue
        found[(n, m)] = path
    return found


def cmd_benchmark_matrix(args) -> int:
    started = time.time()
    corpus = load_corpus(_workpath(args, args.data))
    vocab = Vocab.load(_workpath(args, args.vocab))
    settings, decode_resolved = _decode_settings(args)
    if args.vanilla_dir:
        checkpoints = _vanilla_checkpoints(_workpath(args, args.vanilla_dir))
        matrix = quality_timing_matrix(None, corpus, vocab, settings,
                                       vanilla_checkpoints=checkpoints)
        inputs = {"vanilla_dir": args.vanilla_dir}
    else:
        checkpoint_path = _workpath(args, args.checkpoint)
        matrix = quality_timing_matrix(checkpoint_path, corpus, vocab, settings)
        inputs = {"checkpoint": checkpoint_path}
    out_dir = _workpath(args, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, text in (("bleu.csv", matrix.to_csv(matrix.bleu_grid())),
                       ("seconds_total.csv", matrix.to_csv(matrix.seconds_grid("total"))),
                       ("seconds_decode.csv", matrix.to_csv(matrix.seconds_grid("decode"))),
                       ("matrix.txt", matrix.render_text()),
                       ("matrix.json", json.dumps(matrix.to_json(), indent=2) + "\n")):
        path = out_dir / name
        _write_atomic(path, text)
        outputs.append(path)
    _write_manifest(out_dir / "manifest.json", "benchmark-matrix", args,
                    {"decode": decode_resolved}, inputs, outputs, started)
    print(matrix.render_text())
    if matrix.has_errors:
        print("benchmark-matrix: some cells failed", file=sys.stderr)
        return 1
    return 0


def cmd_oracle_dist(args) -> int:
    started = time.time()
    corpus = load_corpus(_workpath(args, args.data))
    vocab = Vocab.load(_workpath(args, args.vocab))
    settings, decode_resolved = _decode_settings(args)
    checkpoint_path = _workpath(args, args.checkpoint)
    dist = oracle_distribution(checkpoint_path, corpus, vocab, settings)
    out_dir = _workpath(args, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts_path = out_dir / "oracle_counts.csv"
    json_path = out_dir / "oracle_distribution.json"
    _write_atomic(counts_path, dist.to_csv())
    _write_atomic(json_path, json.dumps(dist.to_json(), indent=2) + "\n")
    _write_manifest(out_dir / "manifest.json", "oracle-dist", args,
                    {"decode": decode_resolved}, {"checkpoint": checkpoint_path},
                    [counts_path, json_path], started)
    print(dist.to_csv())
    return 0


def cmd_count_params(args) -> int:
    vocab_size = args.vocab_size or 64
    config, _ = _model_config(args, vocab_size=vocab_size)
    total = count_params(config, with_optimizer_state=args.with_optimizer_state)
    print(total)
    if args.show_ratio:
        ratio = subsumed_vs_single_ratio(config)
        print(f"subsumed total: {ratio['subsumed_total']}  "
              f"ratio: {ratio['ratio']:.2f}", file=sys.stderr)
    return 0


def cmd_step_bench(args) -> int:
    started = time.time()
    vocab_size = args.vocab_size or 64
    config, model_resolved = _model_config(args, vocab_size=vocab_size)
    train_resolved = _merge(TRAIN_DEFAULTS, _file_section(args, "train"),
                            _flags(args, list(TRAIN_DEFAULTS)))
    train_config = TrainConfig(seed=args.seed, **{**train_resolved, "steps": 0})
    report = step_time_benchmark(config, train_config, args.batches)
    payload = json.dumps(report.to_json(), indent=2) + "\n"
    print(payload, end="")
    if args.out:
        out_path = _workpath(args, args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _write_atomic(out_path, payload)
        _write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"),
                        "step-bench", args, {"model": model_resolved, "batches": args.batches},
                        {}, [out_path], started)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (sections: data/model/train/decode)")
    parser.add_argument("--workdir", help="root for relative paths")
    parser.add_argument("--seed", type=int, default=0)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--enc-layers", dest="encoder_layers", type=int)
    parser.add_argument("--dec-layers", dest="decoder_layers", type=int)
    parser.add_argument("--d-model", dest="d_model", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--d-ff", dest="d_ff", type=int)
    parser.add_argument("--max-len", dest="max_len", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--label-smoothing", dest="label_smoothing", type=float)


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--beam", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--max-decode-len", dest="max_decode_len", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexdepth",
        description="Train one encoder-decoder model, decode with any layer combination.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and vocabulary")
    _add_common(p)
    p.add_argument("--task", choices=("copy", "reverse", "sort", "synth_translate"))
    p.add_argument("--size", type=int)
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory with corpus.tsv and vocab.txt")
    p.add_argument("--out", required=True, help="checkpoint/log output directory")
    _add_model_flags(p)
    p.add_argument("--algorithm", choices=("vanilla", "nxm"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-scale", dest="base_scale", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--adam-beta1", dest="adam_beta1", type=float)
    p.add_argument("--adam-beta2", dest="adam_beta2", type=float)
    p.add_argument("--adam-eps", dest="adam_eps", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--keep-last", dest="keep_last", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("avg-checkpoints", help="parameter-wise mean of checkpoints")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_avg_checkpoints)

    p = sub.add_parser("decode", help="translate a corpus at a chosen depth pair")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="TSV corpus or plain text, one sentence per line")
    p.add_argument("--out", required=True)
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--dec-layers", dest="dec_layers", type=int)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("benchmark-matrix", help="BLEU and decode time for every (n, m)")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vanilla-dir", dest="vanilla_dir",
                   help="directory of vanilla-n{n}-m{m}.ckpt files instead of one checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True, help="test corpus TSV")
    p.add_argument("--out", required=True)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_benchmark_matrix)

    p = sub.add_parser("oracle-dist", help="which depth pair translates each sentence best")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_oracle_dist)

    p = sub.add_parser("count-params", help="closed-form trainable parameter count")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--with-optimizer-state", action="store_true",
                   help="count the two Adam moment slots as well (3x)")
    p.add_argument("--show-ratio", action="store_true",
                   help="also print the 36-subsumed-models comparison on stderr")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("step-bench", help="training step time: grid vs vanilla vs truncated")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_step_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"flexdepth: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
