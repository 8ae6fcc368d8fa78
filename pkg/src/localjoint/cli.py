"""Command-line front end: train, translate, score, mask-dump, grad-check,
param-count.

Exit codes: 0 success, 1 runtime failure (missing file, bad checkpoint,
non-finite loss), 2 usage or configuration conflict. Every run's randomness
flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import tensor as T
from .data import (SentencePair, Vocabulary, gen_synthetic, make_joint_batch,
                   read_parallel)
from .evaluation import corpus_bleu
from .inference import DecodeConfig, translate as decode_sentence
from .masking import BandSpec, INF, build_band_mask
from .model import (CheckpointError, ModelConfig, PRESETS, count_params, forward,
                    init_params, load_checkpoint, make_config, param_shapes,
                    sinusoidal_table)
from .training import TrainConfig, smoothed_loss, train


def _parse_window(text: str):
    if text.strip().lower() == "inf":
        return INF
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be an odd integer or 'inf', got {text!r}")


def _parse_windows(text: str):
    return tuple(_parse_window(part) for part in text.split(","))


def _add_arch_flags(sub):
    sub.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    sub.add_argument("--layers", type=int, default=None, dest="n_layers")
    sub.add_argument("--d-model", type=int, default=None)
    sub.add_argument("--d-ff", type=int, default=None)
    sub.add_argument("--heads", type=int, default=None, dest="n_heads")
    sub.add_argument("--windows", type=_parse_windows, default=None,
                     help="comma-separated per-layer windows, odd ints or 'inf'")
    sub.add_argument("--dropout", type=float, default=None)
    sub.add_argument("--boundary-policy", default=None,
                     choices=("cross", "clip_full_source"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localjoint",
        description="Joint source-target translation with banded local attention")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model on files or a synthetic task")
    _add_arch_flags(p)
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--task", default=None, choices=("copy", "reverse", "sort"))
    p.add_argument("--train-src", default=None)
    p.add_argument("--train-tgt", default=None)
    p.add_argument("--val-src", default=None)
    p.add_argument("--val-tgt", default=None)
    p.add_argument("--n-pairs", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--synthetic-vocab", type=int, default=10)
    p.add_argument("--max-vocab", type=int, default=32000)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--schedule", default="inv_sqrt", choices=("inv_sqrt", "cosine"))
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--stop-accuracy", type=float, default=None)
    p.add_argument("--out", default="model.bjlm")
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("translate", help="decode sentences with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default=None, help="default: stdin")
    p.add_argument("--output", default=None, help="default: stdout")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = subs.add_parser("score", help="corpus BLEU of a hypothesis file against a reference")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("mask-dump", help="render a band mask as ASCII (and optional PGM)")
    p.add_argument("--src-len", type=int, required=True)
    p.add_argument("--tgt-len", type=int, required=True)
    p.add_argument("--window", type=_parse_window, default=None)
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--policy", default="cross", choices=("cross", "clip_full_source"))
    p.add_argument("--pgm", default=None, help="also write a binary PGM image here")
    p.set_defaults(func=cmd_mask_dump)

    p = subs.add_parser("grad-check", help="compare tape gradients to finite differences")
    p.add_argument("--preset", default="toy-mini", choices=sorted(PRESETS))
    p.add_argument("--src-extent", type=int, default=4)
    p.add_argument("--tgt-extent", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_grad_check)

    p = subs.add_parser("param-count", help="closed-form vs enumerated parameter count")
    _add_arch_flags(p)
    p.add_argument("--vocab-size", type=int, default=None)
    p.set_defaults(func=cmd_param_count)

    return parser


def _build_config(args, vocab_size) -> ModelConfig:
    return make_config(
        args.preset, vocab_size=vocab_size, n_layers=args.n_layers,
        d_model=args.d_model, d_ff=args.d_ff, n_heads=args.n_heads,
        windows=args.windows, dropout=args.dropout,
        boundary_policy=args.boundary_policy)


def cmd_train(args) -> int:
    if args.task and (args.train_src or args.train_tgt):
        print("error: choose either --task or --train-src/--train-tgt", file=sys.stderr)
        return 2
    if args.task is None and not (args.train_src and args.train_tgt):
        print("error: need --task or both --train-src and --train-tgt", file=sys.stderr)
        return 2

    if args.task:
        pairs = gen_synthetic(args.task, args.synthetic_vocab,
                              (args.min_len, args.max_len), args.n_pairs, args.seed)
    else:
        pairs = read_parallel(args.train_src, args.train_tgt)
    if args.val_src and args.val_tgt:
        heldout = read_parallel(args.val_src, args.val_tgt)
        train_pairs = pairs
    else:
        n_val = int(len(pairs) * args.val_fraction)
        train_pairs = pairs[: len(pairs) - n_val]
        heldout = pairs[len(pairs) - n_val:]
    if not train_pairs:
        raise ValueError("no training pairs left after the validation split")

    vocab = Vocabulary.build(train_pairs, max_size=args.max_vocab)
    try:
        config = _build_config(args, len(vocab))
        train_cfg = TrainConfig(
            max_steps=args.steps, warmup_steps=args.warmup, peak_lr=args.peak_lr,
            schedule=args.schedule, label_smoothing=args.label_smoothing,
            batch_size=args.batch_size, seed=args.seed, clip_norm=args.clip_norm,
            log_every=args.log_every, checkpoint_every=args.checkpoint_every,
            eval_every=args.eval_every, stop_accuracy=args.stop_accuracy)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    metrics_fh = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    try:
        result = train(config, train_cfg, train_pairs, vocab, heldout=heldout,
                       checkpoint_path=args.out, metrics_file=metrics_fh, log=print)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if result["heldout_accuracy"] is not None:
        print(f"held-out accuracy: {result['heldout_accuracy']:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_translate(args) -> int:
    params, config, vocab = load_checkpoint(args.checkpoint)
    table = sinusoidal_table(config.max_positions, config.d_model)
    cfg = DecodeConfig(max_new_tokens=args.max_new_tokens,
                       beam_size=args.beam, alpha=args.alpha)
    source = open(args.input, encoding="utf-8") if args.input else sys.stdin
    sink = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        if args.verbose:
            sink.write(f"# checkpoint={args.checkpoint} beam={args.beam} "
                       f"alpha={args.alpha} max_new_tokens={args.max_new_tokens}\n")
        for line in source:
            tokens = line.split()
            if not tokens:
                sink.write("\n")
                continue
            out = decode_sentence(params, config, vocab, tokens, cfg, table)
            sink.write(" ".join(out) + "\n")
    finally:
        if args.input:
            source.close()
        if args.output:
            sink.close()
    return 0


def cmd_score(args) -> int:
    with open(args.hyp, encoding="utf-8") as fh:
        hyps = [line.split() for line in fh.read().splitlines()]
    with open(args.ref, encoding="utf-8") as fh:
        refs = [line.split() for line in fh.read().splitlines()]
    print(corpus_bleu(hyps, refs).line())
    return 0


def _mask_ascii(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if allowed else "." for allowed in row) for row in mask)


def _mask_pgm(mask: np.ndarray) -> bytes:
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + np.where(mask, 255, 0).astype(np.uint8).tobytes()


def cmd_mask_dump(args) -> int:
    if (args.window is None) == (args.preset is None):
        print("error: give exactly one of --window or --preset/--layer", file=sys.stderr)
        return 2
    if args.window is not None:
        window = args.window
    else:
        windows = PRESETS[args.preset]["windows"]
        if not 0 <= args.layer < len(windows):
            print(f"error: layer {args.layer} out of range for preset {args.preset}",
                  file=sys.stderr)
            return 2
        window = windows[args.layer]
    try:
        mask = build_band_mask(BandSpec(window, args.src_len, args.tgt_len), args.policy)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    wname = "inf" if window == INF else str(window)
    print(f"S={args.src_len} T={args.tgt_len} window={wname} policy={args.policy}")
    print(_mask_ascii(mask))
    if args.pgm:
        with open(args.pgm, "wb") as fh:
            fh.write(_mask_pgm(mask))
    return 0


def cmd_grad_check(args) -> int:
    config = make_config(args.preset, dropout=0.0)
    if args.src_extent < 2 or args.tgt_extent < 2:
        print("error: need src/tgt extents >= 2 (room for EOS and BOS)", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    n_src = args.src_extent - 1
    n_tgt = args.tgt_extent - 1
    pair = SentencePair([str(rng.integers(0, 9)) for _ in range(n_src)],
                        [str(rng.integers(0, 9)) for _ in range(n_tgt)])
    vocab = Vocabulary([str(i) for i in range(config.vocab_size - 4)])
    batch = make_joint_batch([pair], vocab)
    params = init_params(config, args.seed)
    table = sinusoidal_table(config.max_positions, config.d_model)

    def loss_value() -> float:
        with T.no_grad():
            logits = forward(batch, params, config, table)
        loss, _ = smoothed_loss(logits, batch, 0.1)
        return loss.item()

    loss, _ = smoothed_loss(forward(batch, params, config, table), batch, 0.1)
    T.backward(loss)
    names = list(params)
    fd = T.finite_difference_gradients(loss_value, [params[n] for n in names], h=args.step)
    worst = 0.0
    worst_name = ""
    # the floor keeps difference noise on analytically-zero gradients (key
    # biases cancel inside the softmax) from dominating the relative error
    floor = max(args.step * 10.0, 1e-6)
    for name, fd_grad in zip(names, fd):
        err = T.max_relative_error(params[name].grad, fd_grad, floor=floor)
        if err > worst:
            worst, worst_name = err, name
    status = "PASS" if worst < args.threshold else "FAIL"
    print(f"max relative error {worst:.3e} (parameter {worst_name}, "
          f"threshold {args.threshold:g}): {status}")
    return 0 if status == "PASS" else 1


def cmd_param_count(args) -> int:
    vocab_size = args.vocab_size if args.vocab_size else None
    try:
        config = _build_config(args, vocab_size)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    formula = count_params(config)
    walked = sum(int(np.prod(shape, dtype=np.int64)) if shape else 1
                 for _, shape in param_shapes(config))
    print(f"closed form: {formula}")
    print(f"enumerated:  {walked}")
    if formula != walked:
        print("error: closed form and enumeration disagree", file=sys.stderr)
        return 1
    return 0


def _apply_config_file(argv: list[str]) -> list[str]:
    """Merge a --config JSON file into train's defaults; explicit flags win."""
    if not argv or argv[0] != "train" or "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv
    with open(argv[idx + 1], encoding="utf-8") as fh:
        values = json.load(fh)
    extra: list[str] = []
    given = set(argv)
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if flag in given:
            continue
        extra += [flag, str(value)]
    return argv[:1] + extra + argv[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config_file(argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
