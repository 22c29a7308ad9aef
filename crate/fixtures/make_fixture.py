"""Generate the five-rollout trace fixture and its expected advantages.

The expected values are computed here by brute force, independently of the
Rust implementation: every unnormalized term p[i][t] * prod exp(-beta*|gap|)
is formed on its own and the terms are normalized once per step.

    python3 fixtures/make_fixture.py
"""

import json
import math
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
PROMPT = "solve 3x + 5 = 20"
TRUTH = "5"
ANSWERS = ["5", "15/3", "5", "7", "25"]


def make_rows(rng, steps, answer):
    rows = {}
    for cand in dict.fromkeys([TRUTH] + ANSWERS):
        start = rng.uniform(0.02, 0.3)
        # the rollout's own answer gains probability, others drift
        drift = 0.6 if cand == answer else rng.uniform(-0.15, 0.2)
        row = [start]
        for t in range(steps):
            step = drift / steps + rng.uniform(-0.08, 0.08)
            row.append(min(1.0, max(0.0, row[-1] + step)))
        rows[cand] = [round(p, 4) for p in row]
    return [rows[TRUTH]] + [rows[c] for c in ANSWERS]


def documents():
    rng = random.Random(20240517)
    docs = []
    for k, answer in enumerate(ANSWERS):
        steps = 4 + k % 3
        docs.append(
            {
                "prompt": PROMPT,
                "ground_truth": TRUTH,
                "candidates": ANSWERS,
                "verifier": 1 if answer == TRUTH else 0,
                "probs": make_rows(rng, steps, answer),
            }
        )
    return docs


def advantages(doc, beta):
    p = doc["probs"]
    steps = len(p[0]) - 1
    observed = doc.get("observed_rewards") or [p[0][t + 1] - p[0][t] for t in range(steps)]
    out = []
    for t in range(steps):
        terms = []
        for row in p:
            w = row[t]
            for s in range(t):
                w *= math.exp(-beta * abs(observed[s] - (row[s + 1] - row[s])))
            terms.append(w)
        z = math.fsum(terms)
        if z == 0.0:
            out.append(0.0)
            continue
        q = [row[steps] - row[t] + doc["verifier"] for row in p]
        out.append(math.fsum(qi * wi / z for qi, wi in zip(q, terms)))
    return out


def main():
    docs = documents()
    with open(HERE / "traces_m5.jsonl", "w") as f:
        for doc in docs:
            f.write(json.dumps(doc, separators=(",", ":")) + "\n")
    with open(HERE / "traces_m5_beta1_expected.csv", "w") as f:
        f.write("trace,step,advantage\n")
        for k, doc in enumerate(docs):
            for t, a in enumerate(advantages(doc, 1.0)):
                f.write(f"{k},{t},{a!r}\n")


if __name__ == "__main__":
    main()
