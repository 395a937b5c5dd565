# Copyright (c) 2026, the qtrain authors
# SPDX-License-Identifier: Apache-2.0
#
# Regenerates the checked-in reference vectors under data/. Written
# independently of the C++ implementation so the files act as an oracle:
# fp8 decode tables from first-principles bit arithmetic, rng vectors from a
# second implementation of the same 4-round mixer.

import argparse
import pathlib

MASK64 = (1 << 64) - 1


def fp8_decode(code: int, exp_bits: int, man_bits: int, ieee_inf_nan: bool) -> float:
    bias = (1 << (exp_bits - 1)) - 1
    sign = -1.0 if (code >> 7) & 1 else 1.0
    e = (code >> man_bits) & ((1 << exp_bits) - 1)
    m = code & ((1 << man_bits) - 1)
    if ieee_inf_nan and e == (1 << exp_bits) - 1:
        return sign * float("inf") if m == 0 else float("nan")
    if not ieee_inf_nan and e == (1 << exp_bits) - 1 and m == (1 << man_bits) - 1:
        return float("nan")
    if e == 0:
        return sign * m * 2.0 ** (1 - bias - man_bits)
    return sign * (1.0 + m * 2.0 ** (-man_bits)) * 2.0 ** (e - bias)


def write_fp8(path: pathlib.Path, exp_bits: int, man_bits: int, ieee: bool) -> None:
    lines = ["# code_hex -> decoded value (exact decimal or nan/inf)"]
    for code in range(256):
        v = fp8_decode(code, exp_bits, man_bits, ieee)
        lines.append(f"{code:02x} {v!r}")
    path.write_text("\n".join(lines) + "\n")


def mix64(z: int) -> int:
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z


def rng_uniform(seed: int, stream: int, counter: int) -> int:
    z = 0x9E3779B97F4A7C15
    z = mix64(z ^ seed)
    z = mix64(z ^ stream)
    z = mix64(z ^ counter)
    z = mix64(z)
    return ((z >> 32) ^ z) & 0xFFFFFFFF


def write_rng(path: pathlib.Path) -> None:
    keys = [
        (0, 0, 0),
        (0, 0, 1),
        (0, 1, 0),
        (1, 0, 0),
        (42, 7, 123456789),
        (0xDEADBEEF, 0x1234_5678_9ABC_DEF0, 2**63),
        (MASK64, MASK64, MASK64),
        (12345, 0, 10**12),
    ]
    lines = ["# seed stream counter -> u32 (all decimal)"]
    for s, st, c in keys:
        lines.append(f"{s} {st} {c} {rng_uniform(s, st, c)}")
    path.write_text("\n".join(lines) + "\n")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data", type=pathlib.Path)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    write_fp8(args.out / "fp8_e4m3_test_vectors.txt", 4, 3, False)
    write_fp8(args.out / "fp8_e5m2_test_vectors.txt", 5, 2, True)
    write_rng(args.out / "rng_test_vectors.txt")
    print(f"wrote vectors under {args.out}/")


if __name__ == "__main__":
    main()
