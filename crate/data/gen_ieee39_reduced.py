"""Writes ieee39_reduced.json: a synthetic 10-machine reduced network.

Inertias follow the usual New England generator constants (H in s on a
100 MVA base, m = 2H / (2 pi 60)). Line susceptances, steady-state angles and
damping are synthetic; injections are computed from the angles so that the
steady state balances to machine precision.
"""
import json
import math

import numpy as np

H = [42.0, 30.3, 35.8, 28.6, 26.0, 34.8, 26.4, 24.3, 34.5, 500.0]
BUS = [30, 31, 32, 33, 34, 35, 36, 37, 38, 39]
SWING = 1  # generator at bus 31
OMEGA = 2.0 * math.pi * 60.0

RING = [(i, (i + 1) % 10) for i in range(10)]
CHORDS = [(0, 5), (2, 7), (3, 6), (1, 8), (4, 9)]
SUSCEPTANCE = [0.20, 0.15, 0.25, 0.18, 0.22, 0.16, 0.24, 0.19, 0.21, 0.17,
               0.30, 0.28, 0.35, 0.32, 0.26]
ANGLES = [0.10, 0.0, 0.08, 0.12, 0.05, 0.09, 0.11, 0.04, 0.07, -0.06]


def main():
    branches = [
        {"from": a, "to": b, "susceptance": s}
        for (a, b), s in zip(RING + CHORDS, SUSCEPTANCE)
    ]
    power = [0.0] * 10
    for br in branches:
        a, b, w = br["from"], br["to"], 1.0 / br["susceptance"]
        flow = w * math.sin(ANGLES[a] - ANGLES[b])
        power[a] += flow
        power[b] -= flow
    machines = []
    for k in range(10):
        m = 2.0 * H[k] / OMEGA
        machines.append({"inertia": m, "damping": max(0.5, 2.0 * m), "power": power[k]})

    # Hurwitz check of the linearization about the steady state
    idx = [k for k in range(10) if k != SWING]
    n = len(idx)
    lap = np.zeros((10, 10))
    for br in branches:
        a, b = br["from"], br["to"]
        w = math.cos(ANGLES[a] - ANGLES[b]) / br["susceptance"]
        lap[a, a] += w
        lap[b, b] += w
        lap[a, b] -= w
        lap[b, a] -= w
    k_red = lap[np.ix_(idx, idx)]
    minv = np.diag([1.0 / machines[k]["inertia"] for k in idx])
    dmat = np.diag([machines[k]["damping"] for k in idx])
    a_mat = np.block([[np.zeros((n, n)), np.eye(n)], [-minv @ k_red, -minv @ dmat]])
    slowest = max(np.linalg.eigvals(a_mat).real)
    assert slowest < -0.05, slowest

    doc = {
        "name": "ieee39_reduced",
        "description": (
            "Synthetic 10-machine reduction modeled on the New England system. "
            "Machine k sits at generator bus %s; inertias from the standard H "
            "constants, all other parameters synthetic. Slowest linear mode %.4f."
            % (BUS, slowest)
        ),
        "machines": machines,
        "branches": branches,
        "steady_angles": ANGLES,
        "angle_unit": "rad",
        "swing_bus": SWING,
    }
    with open("ieee39_reduced.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
