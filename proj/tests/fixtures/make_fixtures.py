#!/usr/bin/env python3
"""Regenerates the fixture files in this directory from first principles."""
import math
import struct
import zlib
from decimal import Decimal, getcontext

M64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def splitmix_stream(seed, n):
    out, state = [], seed
    for _ in range(n):
        state = (state + GAMMA) & M64
        out.append(mix(state))
    return out


def split(seed, stream):
    return mix(seed ^ mix((stream + 0x632BE59BD9B4E019) & M64))


def write_rng():
    with open("rng_vectors.txt", "w") as f:
        f.write("# seed position value (SplitMix64)\n")
        for seed in (0, 1, 42, 0xDEADBEEFCAFEF00D):
            for pos, v in enumerate(splitmix_stream(seed, 8)):
                f.write(f"{seed} {pos} {v}\n")
        f.write("# split: parent stream child_seed\n")
        for seed in (0, 7):
            for stream in (0, 1, 0xADA9):
                f.write(f"split {seed} {stream} {split(seed, stream)}\n")


def gelu_exact(x):
    getcontext().prec = 50
    d = Decimal(x)
    c = (Decimal(2) / Decimal(math.pi)).sqrt()
    inner = c * (d + Decimal("0.044715") * d ** 3)
    e2 = (2 * inner).exp()
    th = (e2 - 1) / (e2 + 1)
    return Decimal("0.5") * d * (1 + th)


def write_gelu():
    xs = [-6.0, -3.0, -2.5, -1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 6.0]
    with open("gelu_vectors.txt", "w") as f:
        f.write("# x gelu_tanh(x)\n")
        for x in xs:
            f.write(f"{x!r} {float(gelu_exact(x))!r}\n")


def write_checkpoint():
    # One f32 parameter "w" of shape [2, 3], config block "k=v\n".
    cfg = b"k=v\n"
    body = b"VLMC" + struct.pack("<H", 1) + struct.pack("<I", len(cfg)) + cfg
    name = b"w"
    values = [0.0, 1.0, -2.5, 0.125, 3.0, -0.0]
    body += struct.pack("<H", len(name)) + name + bytes([1, 2])
    body += struct.pack("<II", 2, 3)
    body += b"".join(struct.pack("<f", v) for v in values)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open("checkpoint_1param.hex", "w") as f:
        f.write(body.hex() + "\n")


if __name__ == "__main__":
    write_rng()
    write_gelu()
    write_checkpoint()
