"""Task-mode by loss-variant comparison on synthetic data.

Trains six models ({global, local, joint} x {consistency on, plain
triplet}) and prints one recall row per cell.
"""

import sys
from pathlib import Path
from tempfile import TemporaryDirectory

from dualtok.cli import main as cli


def main():
    argv = sys.argv[1:]
    with TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        code = cli(["gen-synthetic", "--pairs", "512", "--concepts", "64",
                    "--concepts-per-sample", "4", "--noise-std", "0.05",
                    "--seed", "7", "--out-dir", str(data)])
        if code != 0:
            return code
        return cli(["ablate", "--images", str(data / "images.tgf"),
                    "--texts", str(data / "texts.tgf"),
                    "--gt", str(data / "pairs.tsv"),
                    "--num-layers", "2", "--epochs", "10",
                    "--batch-size", "40", "--lr", "1e-3", "--seed", "7",
                    *argv])


if __name__ == "__main__":
    sys.exit(main())
