#!/usr/bin/env python3
"""Assemble a deterministic byte-level text corpus from the Python
standard library sources installed on this machine.

Files are concatenated in sorted order until the size floor is reached,
so the same interpreter version always yields the same corpus. Usage:

    python3 scripts/make_corpus.py --out corpus.txt --min-bytes 1500000
"""

import argparse
import os
import sysconfig


def build_corpus(out_path: str, min_bytes: int = 1_500_000) -> int:
    stdlib = sysconfig.get_paths()["stdlib"]
    names = sorted(n for n in os.listdir(stdlib) if n.endswith(".py"))
    total = 0
    with open(out_path, "wb") as out:
        for name in names:
            with open(os.path.join(stdlib, name), "rb") as fh:
                data = fh.read()
            out.write(data)
            total += len(data)
            if total >= min_bytes:
                break
    if total < min_bytes:
        raise RuntimeError(f"stdlib only provided {total} bytes < {min_bytes}")
    return total


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="corpus.txt")
    ap.add_argument("--min-bytes", type=int, default=1_500_000)
    args = ap.parse_args()
    total = build_corpus(args.out, args.min_bytes)
    print(f"wrote {total} bytes to {args.out}")


if __name__ == "__main__":
    main()
