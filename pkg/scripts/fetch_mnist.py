"""Fetch the canonical MNIST IDX files into data/mnist/ (gzipped).

The sandbox has no direct internet access, but the npm registry mirror does
carry ``mnist-data``, which bundles the four original IDX files unchanged.

Usage::

    python scripts/fetch_mnist.py [--tgz mnist-data-1.2.6.tgz] [--out data/mnist]
"""
from __future__ import annotations

import argparse
import gzip
import subprocess
import tarfile
import tempfile
from pathlib import Path

FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tgz", type=Path, help="pre-downloaded mnist-data tarball")
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "mnist")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.tgz
        if tgz is None:
            subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, capture_output=True)
            tgz = next(Path(tmp).glob("mnist-data-*.tgz"))
        args.out.mkdir(parents=True, exist_ok=True)
        with tarfile.open(tgz) as tar:
            for name in FILES:
                raw = tar.extractfile(f"package/data/{name}").read()
                (args.out / f"{name}.gz").write_bytes(gzip.compress(raw, compresslevel=9, mtime=0))
                print(f"{name}: {len(raw)} bytes")


if __name__ == "__main__":
    main()
