#!/usr/bin/env python3
"""Standalone double-precision reference for the tiny ConceptFormer fixture.

Writes tiny_cf.json: pinned random weights and inputs plus the expected
concept vectors and attention weights. Pure Python, no third-party packages.
"""
import json
import math
import random
import sys

DIM_I, DIM_O, N_BLOCKS, HIDDEN, M = 2, 4, 2, 3, 2
SLOPE = 0.01


def rand_matrix(rng, rows, cols):
    return [[rng.uniform(-1.0, 1.0) for _ in range(cols)] for _ in range(rows)]


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def block(c, n, e, wq, wk, wv, wo, wp1, wp2):
    q = matmul([c], wq)[0]
    k = [[x + y for x, y in zip(row, erow)] for row, erow in zip(matmul(n, wk), e)]
    v = matmul(n, wv)
    scores = [sum(qi * ki for qi, ki in zip(q, krow)) / math.sqrt(DIM_I) for krow in k]
    top = max(scores)
    ex = [math.exp(s - top) for s in scores]
    att = [x / sum(ex) for x in ex]
    u = [sum(att[j] * v[j][col] for j in range(len(v))) for col in range(DIM_I)]
    o = matmul([u], wo)[0]
    h = matmul([o], wp1)[0]
    z = [x if x > 0 else SLOPE * x for x in h]
    return matmul([z], wp2)[0], att


def main(path):
    rng = random.Random(20240611)
    blocks = [{name: rand_matrix(rng, DIM_I, DIM_I) for name in ("wq", "wk", "wv", "wo")} for _ in range(N_BLOCKS)]
    wp1 = rand_matrix(rng, DIM_I, HIDDEN)
    wp2 = rand_matrix(rng, HIDDEN, DIM_O)
    c = [rng.gauss(0.0, 1.0) for _ in range(DIM_I)]
    n = rand_matrix(rng, M, DIM_I)
    e = rand_matrix(rng, M, DIM_I)
    vectors, attention = [], []
    for b in blocks:
        y, att = block(c, n, e, b["wq"], b["wk"], b["wv"], b["wo"], wp1, wp2)
        vectors.append(y)
        attention.append(att)
    fixture = {
        "dim_i": DIM_I, "dim_o": DIM_O, "n": N_BLOCKS, "hidden": HIDDEN, "m": M, "slope": SLOPE,
        "blocks": blocks, "wp1": wp1, "wp2": wp2,
        "C": [c], "N": n, "E": e,
        "expected_vectors": vectors, "expected_attention": attention,
    }
    with open(path, "w") as f:
        json.dump(fixture, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tiny_cf.json")
