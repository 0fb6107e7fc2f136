"""Print the module parameter table for the full-size preset and for the toy config."""
from pathlib import Path

from speechlm.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    print("full-size dimensions (counted, never allocated)")
    cli(["params", "--preset", "qwen2-7b-dims"])
    print("\ntoy configuration")
    cli(["params", "--config", str(ROOT / "configs" / "toy_overfit.cfg")])
