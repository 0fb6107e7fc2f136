"""Train one toy model per value of a single axis and tabulate dev error and convergence.

    python3 scripts/sweep.py --axis granularity_k --values 2,3,4
    python3 scripts/sweep.py --axis llm_mode --values frozen,lora,full
    python3 scripts/sweep.py --axis encoder_variant --values frozen,trainable
"""
import argparse
from pathlib import Path

from speechlm.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", required=True, choices=("granularity_k", "llm_mode", "encoder_variant"))
    ap.add_argument("--values", required=True)
    ap.add_argument("--budget", type=int, default=300, help="training steps per run")
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy_overfit.cfg"))
    args = ap.parse_args()

    out = Path(args.out)
    manifest = out / "data" / "manifest.jsonl"
    if not manifest.exists():
        cli(["synth", "--out", str(out / "data"), "--seed", "7", "--n-utts", "10"])
    raise SystemExit(cli([
        "sweep", "--config", args.config, "--manifest", str(manifest), "--axis", args.axis,
        "--values", args.values, "--budget", str(args.budget),
        "--total-steps", str(max(args.budget, 100)), "--json-out", str(out / f"{args.axis}.jsonl"),
    ]))


if __name__ == "__main__":
    main()
