"""Synthesise 10 utterances, memorise them, then decode every one in MTL mode.

    python3 scripts/overfit_demo.py --out runs/overfit
"""
import argparse
from pathlib import Path

from speechlm.cli import main as cli
from speechlm.data import read_manifest
from speechlm.evaluation import decode_utterance, evaluate_manifest
from speechlm.prompting import Task
from speechlm.training import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy_overfit.cfg"))
    ap.add_argument("--steps", type=int, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    cli(["synth", "--out", str(out / "data"), "--seed", "7", "--n-utts", "10"])
    manifest = out / "data" / "manifest.jsonl"
    argv = ["-v", "train", "--config", args.config, "--manifest", str(manifest), "--out", str(out / "run")]
    if args.steps:
        argv += ["--steps", str(args.steps)]
    if cli(argv) != 0:
        raise SystemExit(1)

    state = load_checkpoint(out / "run" / "final.ckpt")
    model, tok = state.build_model().eval(), state.tokenizer
    print(evaluate_manifest(model, tok, manifest, Task("mtl")).to_table())
    exact = 0
    for r in read_manifest(manifest).records:
        hyp = decode_utterance(model, tok, Task("mtl"), r.audio)
        ok = hyp == f"{r.text}\n{r.translation}"
        exact += ok
        print(f"{r.id}  {'ok ' if ok else 'BAD'}  {hyp!r}")
    print(f"exact MTL outputs: {exact}/10")


if __name__ == "__main__":
    main()
