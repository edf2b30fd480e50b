"""Reference MS-SSIM values from TensorFlow for the metric tests.

The image pairs are synthesised from a splitmix64 stream; tests/support.hpp
implements the same generator, so the C++ suite rebuilds identical pixels and
compares its MS-SSIM against the values written here.

    python3 tests/golden/msssim_reference.py > tests/golden/msssim_pairs.txt
"""

import math

import numpy as np
import tensorflow as tf

MASK = (1 << 64) - 1
WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]

# (seed, width, height, noise level)
CASES = [
    (1, 64, 64, 0.02), (2, 64, 64, 0.05), (3, 64, 64, 0.10), (4, 64, 64, 0.20),
    (5, 64, 64, 0.40), (6, 48, 80, 0.05), (7, 80, 48, 0.10), (8, 45, 61, 0.05),
    (9, 61, 45, 0.15), (10, 33, 33, 0.05), (11, 33, 40, 0.30), (12, 90, 90, 0.03),
    (13, 96, 100, 0.08), (14, 23, 23, 0.05), (15, 22, 30, 0.10), (16, 177, 180, 0.05),
    (17, 64, 64, 0.00), (18, 70, 50, 0.25), (19, 100, 67, 0.12), (20, 51, 89, 0.06),
]


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next() >> 11) * (1.0 / 9007199254740992.0)


def clamp01(v):
    return min(1.0, max(0.0, v))


def make_pair(seed, width, height, level):
    rng = SplitMix64(seed)
    fx = 0.05 + 0.3 * rng.uniform()
    fy = 0.05 + 0.3 * rng.uniform()
    phase = [2.0 * math.pi * rng.uniform() for _ in range(3)]
    a = np.zeros((height, width, 3), dtype=np.float32)
    b = np.zeros((height, width, 3), dtype=np.float32)
    for y in range(height):
        for x in range(width):
            for c in range(3):
                base = 0.5 + 0.3 * math.sin(fx * x + fy * y + phase[c]) + 0.2 * (rng.uniform() - 0.5)
                va = clamp01(base)
                vb = clamp01(va + level * (2.0 * rng.uniform() - 1.0))
                a[y, x, c] = np.float32(va)
                b[y, x, c] = np.float32(vb)
    return a, b


def scales_for(width, height):
    s = 0
    while s < 5 and min(width, height) >= (1 << s) * 11:
        s += 1
    return s


def main():
    print("# seed width height level msssim (TensorFlow ssim_multiscale, renormalised weights)")
    for seed, w, h, level in CASES:
        a, b = make_pair(seed, w, h, level)
        s = scales_for(w, h)
        pf = np.array(WEIGHTS[:s], dtype=np.float64)
        pf = pf / pf.sum()
        v = tf.image.ssim_multiscale(
            tf.constant(a[None].astype(np.float64)),
            tf.constant(b[None].astype(np.float64)),
            max_val=1.0,
            power_factors=tuple(pf.tolist()),
            filter_size=11,
            filter_sigma=1.5,
            k1=0.01,
            k2=0.03,
        )
        print(f"{seed} {w} {h} {level:.2f} {float(v.numpy()[0]):.10f}")


if __name__ == "__main__":
    main()
