"""Regenerate the bundled synthetic classification datasets.

The bundled CSVs are deterministic stand-ins matching the row/column shape and
label convention of the three UCI benchmarks (see data/README.md for the real
sources). Features mix continuous, count-like and binary columns; labels are
drawn from a logistic model on the standardized features so the resulting
posterior is a realistic logistic-regression target.

Usage: python3 scripts/make_synthetic_data.py [out_dir]
"""

import os
import sys

import numpy as np

SPECS = [
    # name, rows, feature columns, seed, intercept shift (class balance)
    ("german_synth", 1000, 24, 20210417, -0.85),
    ("australian_synth", 690, 14, 20210418, -0.35),
    ("heart_synth", 270, 13, 20210419, -0.25),
]


def make_features(rng, n, k):
    cols = []
    for j in range(k):
        kind = j % 4
        if kind == 0:
            cols.append(rng.standard_normal(n) * rng.uniform(0.5, 3.0)
                        + rng.uniform(-2.0, 2.0))
        elif kind == 1:
            cols.append(np.round(rng.lognormal(mean=1.0, sigma=0.6, size=n), 2))
        elif kind == 2:
            cols.append(rng.integers(0, 5, size=n).astype(float))
        else:
            cols.append(rng.integers(0, 2, size=n).astype(float))
    return np.column_stack(cols)


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name, n, k, seed, shift in SPECS:
        rng = np.random.default_rng(seed)
        x = make_features(rng, n, k)
        std = x.std(axis=0, ddof=1)
        z = (x - x.mean(axis=0)) / std
        theta = rng.standard_normal(k) * (2.0 / np.sqrt(k))
        logits = z @ theta + shift + 0.8 * rng.standard_normal(n)
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-logits))).astype(int)
        path = os.path.join(out_dir, f"{name}.csv")
        header = ",".join([f"f{j}" for j in range(k)] + ["label"])
        body = np.column_stack([x, y])
        fmt = ["%.6g"] * k + ["%d"]
        np.savetxt(path, body, delimiter=",", header=header, comments="",
                   fmt=fmt)
        print(f"{path}: {n} rows, {k} features, "
              f"positive rate {y.mean():.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data")
