#!/usr/bin/env python3
"""Materialize the Kinship and UMLS benchmarks as facts/train/valid/test TSV splits.

The triples come from the copies bundled inside the pykeen wheel (train/valid/test).
The pykeen train split is divided 3:1 into facts/train with a fixed seed, which yields
the usual 6:2:1:1 layout. valid/test are kept as published.

    python3 scripts/prepare_datasets.py [--wheel PATH] [--out data]

Without --wheel the script runs `pip download pykeen --no-deps` into a temp dir.
"""

import argparse
import pathlib
import random
import subprocess
import tempfile
import zipfile

DATASETS = {"kinship": "kinships", "umls": "umls"}
SEED = 20220101


def locate_wheel(explicit):
    if explicit:
        return pathlib.Path(explicit)
    tmp = pathlib.Path(tempfile.mkdtemp())
    subprocess.run(
        ["pip", "download", "pykeen==1.11.1", "--no-deps", "-d", str(tmp)],
        check=True,
    )
    return next(tmp.glob("pykeen-*.whl"))


def read_split(zf, name, split):
    text = zf.read(f"pykeen/datasets/{name}/{split}.txt").decode("utf-8")
    return [line for line in text.splitlines() if line.strip()]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data")
    args = ap.parse_args()

    wheel = locate_wheel(args.wheel)
    out_root = pathlib.Path(args.out)
    with zipfile.ZipFile(wheel) as zf:
        for target, name in DATASETS.items():
            train = read_split(zf, name, "train")
            rng = random.Random(SEED)
            rng.shuffle(train)
            cut = len(train) * 3 // 4
            splits = {
                "facts": train[:cut],
                "train": train[cut:],
                "valid": read_split(zf, name, "valid"),
                "test": read_split(zf, name, "test"),
            }
            out = out_root / target
            out.mkdir(parents=True, exist_ok=True)
            for split, lines in splits.items():
                (out / f"{split}.txt").write_text("".join(l + "\n" for l in lines))
            sizes = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
            print(f"{target}: {sizes}")


if __name__ == "__main__":
    main()
