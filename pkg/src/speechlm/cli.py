"""``speechlm`` command line: synth | featurize | train | infer | eval | sweep | params.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, build_configs, read_config_file
from .data import BatchMaker, read_manifest, synth_dataset
from .errors import SpeechLMError
from .evaluation import SweepSpec, decode_utterance, evaluate_manifest, format_sweep, run_sweep
from .frontend import apply_lfr, compute_fbank, read_wav, write_feature_file
from .model import SpeechLLM, format_param_table, param_table, preset_param_table
from .prompting import Task, Tokenizer

log = logging.getLogger("speechlm")

# flag -> config key; each of these can also be set in the config file
TRAIN_FLAGS = {
    "seed": "train.seed",
    "lr": "train.lr",
    "micro_batch": "train.micro_batch",
    "accum_steps": "train.accum_steps",
    "warmup_steps": "train.warmup_steps",
    "total_steps": "train.total_steps",
    "steps": "train.run_steps",
    "task": "train.task",
    "precision": "train.precision_mode",
    "grad_checkpoint": "train.grad_checkpoint",
    "llm_mode": "lm.llm_mode",
    "adapter_k": "adapter.k",
    "lora_r": "lora.r",
    "ckpt_every": "train.ckpt_every",
}


class UsageError(SpeechLMError):
    pass


def _collect_pairs(args) -> dict:
    pairs = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            pairs[key] = str(val)
    return pairs


def _add_config_flags(p, train_flags=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    if train_flags:
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--micro-batch", type=int)
        p.add_argument("--accum-steps", type=int)
        p.add_argument("--warmup-steps", type=int)
        p.add_argument("--total-steps", type=int)
        p.add_argument("--steps", type=int, help="steps to run (default: total steps)")
        p.add_argument("--task", choices=("asr", "ast", "mtl"))
        p.add_argument("--precision", choices=("fp32", "bf16-sim"))
        p.add_argument("--grad-checkpoint", action="store_const", const="true")
        p.add_argument("--ckpt-every", type=int)
    p.add_argument("--llm-mode", choices=("frozen", "lora", "full"))
    p.add_argument("--adapter-k", type=int)
    p.add_argument("--lora-r", type=int)


def _tokenizer_for(records) -> Tokenizer:
    texts = [r.text for r in records] + [r.translation for r in records if r.translation]
    return Tokenizer.from_texts(texts)


def _load_records(path):
    result = read_manifest(path)
    for lineno, msg in result.errors:
        log.warning("manifest %s line %d: %s", path, lineno, msg)
    if not result.records:
        raise UsageError(f"{path}: no valid records")
    return result.records


def cmd_synth(args):
    path = synth_dataset(args.out, seed=args.seed, n_utts=args.n_utts, burst_ms=args.burst_ms)
    print(path)


def cmd_featurize(args):
    from .config import FrontendConfig

    cfg = FrontendConfig(sample_rate=args.sample_rate, n_mels=args.n_mels, lfr_m=args.lfr_m, lfr_n=args.lfr_n)
    feats = compute_fbank(read_wav(args.wav, expected_rate=args.sample_rate), cfg)
    lfr = apply_lfr(feats, cfg.lfr_m, cfg.lfr_n)
    write_feature_file(args.out, feats, lfr)
    print(f"base_frames={feats.num_frames} lfr_frames={lfr.num_frames} dim={lfr.frames.shape[1]} "
          f"shift_ms={lfr.effective_shift_ms:g}")


def cmd_train(args):
    from .training import Trainer, checkpoint_path, init_from_checkpoint, save_checkpoint

    pairs = _collect_pairs(args)
    if args.init_from:
        pairs["train.init_from"] = args.init_from
    records = _load_records(args.manifest)
    init_from = pairs.get("train.init_from")
    if init_from and init_from.lower() != "none":
        model, tok = init_from_checkpoint(init_from)
        # architecture comes from the checkpoint; training keys from file/flags
        _, tcfg = build_configs({k: v for k, v in pairs.items() if k.startswith("train.")})
        mcfg = model.cfg
    else:
        tok = _tokenizer_for(records)
        mcfg, tcfg = build_configs(pairs, vocab_size=tok.vocab_size)
        model = SpeechLLM(mcfg)
    task = Task(tcfg.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batches = BatchMaker(records, tok, mcfg, task, tcfg.micro_batch, tcfg.seed)
    if batches.skipped:
        log.warning("skipped %d over-long utterances", len(batches.skipped))
    trainer = Trainer(model, tok, batches, tcfg)
    steps = tcfg.run_steps or tcfg.total_steps
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr", "loss"])

        def on_step(rep):
            writer.writerow([rep.step, f"{rep.lr:.6g}", f"{rep.loss:.6f}"])
            if tcfg.log_every and rep.step % tcfg.log_every == 0:
                log.info("step %d lr %.3g loss %.4f", rep.step, rep.lr, rep.loss)
            if tcfg.ckpt_every and rep.step % tcfg.ckpt_every == 0:
                save_checkpoint(checkpoint_path(out, rep.step), trainer)

        trainer.run(steps, on_step)
    save_checkpoint(out / "final.ckpt", trainer)
    print(out / "final.ckpt")


def cmd_infer(args):
    from .training import load_checkpoint

    if not Path(args.ckpt).exists():
        raise FileNotFoundError(args.ckpt)
    state = load_checkpoint(args.ckpt)
    model = state.build_model().eval()
    print(decode_utterance(model, state.tokenizer, Task(args.task), args.wav, args.max_new))


def cmd_eval(args):
    from .training import load_checkpoint

    model = tok = None
    if not args.oracle:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --oracle")
        state = load_checkpoint(args.ckpt)
        model, tok = state.build_model().eval(), state.tokenizer
    report = evaluate_manifest(model, tok, args.manifest, Task(args.task), oracle=args.oracle,
                               hyp_path=args.hyp_out, max_new=args.max_new)
    print(report.to_table())
    if args.report_out:
        Path(args.report_out).write_text(report.to_jsonl(), encoding="utf-8")


def cmd_sweep(args):
    pairs = _collect_pairs(args)
    records = _load_records(args.manifest)
    dev = _load_records(args.dev_manifest) if args.dev_manifest else None
    tok = _tokenizer_for(records + (dev or []))
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    spec = SweepSpec(axis=args.axis, values=values, base=pairs, steps=args.budget)
    rows = run_sweep(spec, records, tok, dev)
    print(format_sweep(spec, rows))
    if args.json_out:
        Path(args.json_out).write_text(
            "".join(json.dumps(r.__dict__, default=str) + "\n" for r in rows), encoding="utf-8"
        )


def cmd_params(args):
    if args.preset:
        rows = preset_param_table(args.preset)
    elif args.ckpt:
        from .training import load_checkpoint

        rows = param_table(load_checkpoint(args.ckpt).model_cfg)
    else:
        pairs = _collect_pairs(args)
        vocab = _tokenizer_for(_load_records(args.manifest)).vocab_size if args.manifest else Tokenizer.from_texts([]).vocab_size
        mcfg, _ = build_configs(pairs, vocab_size=vocab)
        rows = param_table(mcfg)
    print(format_param_table(rows))
    total, trainable = rows[2][1], rows[2][2]
    print(f"LLM trainable ratio: {trainable / total:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic tone-burst dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-utts", type=int, default=10)
    p.add_argument("--burst-ms", type=float, default=200.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV -> fbank + LFR sidecar")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--lfr-m", type=int, default=7)
    p.add_argument("--lfr-n", type=int, default=6)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train on a manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="start from this checkpoint's weights with a fresh optimizer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode one WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--task", choices=("asr", "ast", "mtl"), default="asr")
    p.add_argument("--max-new", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="decode and score a manifest")
    p.add_argument("--ckpt")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("asr", "ast", "mtl"), default="asr")
    p.add_argument("--oracle", action="store_true", help="score references against themselves")
    p.add_argument("--hyp-out")
    p.add_argument("--report-out")
    p.add_argument("--max-new", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train one model per axis value")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev-manifest")
    p.add_argument("--axis", required=True, choices=("granularity_k", "llm_mode", "encoder_variant"))
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--budget", type=int, default=100, help="training steps per run")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("params", help="parameter table (Encoder / Adapter / LLM)")
    _add_config_flags(p, train_flags=False)
    p.add_argument("--ckpt")
    p.add_argument("--manifest", help="build the vocabulary from this manifest")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (SpeechLMError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
