#!/usr/bin/env python3
"""Build a (dv, dc)-regular LDPC parity-check matrix without 4-cycles and
write it in alist format.

    python3 scripts/make_regular_code.py --n 204 --dv 3 --dc 6 --seed 484 \
        > codes/reg36_n204.alist

Columns are attached one at a time; each of the dv edges of a column goes to
the check with the most remaining sockets among those that do not already
share a variable with the column's other checks. Ties are broken by the
seeded RNG, and the whole construction restarts on a dead end.
"""

import argparse
import random
import sys


def build(n, dv, dc, seed):
    if (n * dv) % dc:
        raise SystemExit("n*dv must be divisible by dc")
    m = n * dv // dc
    rng = random.Random(seed)
    for _attempt in range(10000):
        free = [dc] * m
        rows = [set() for _ in range(m)]
        cols = []
        ok = True
        for j in range(n):
            chosen = []
            for _ in range(dv):
                # checks already sharing a variable with the chosen ones
                banned = set(chosen)
                for i in chosen:
                    for jj in rows[i]:
                        banned.update(c for c in cols[jj])
                cands = [i for i in range(m) if free[i] > 0 and i not in banned]
                if not cands:
                    ok = False
                    break
                best = max(free[i] for i in cands)
                pick = rng.choice([i for i in cands if free[i] == best])
                chosen.append(pick)
            if not ok:
                break
            for i in chosen:
                free[i] -= 1
                rows[i].add(j)
            cols.append(sorted(chosen))
        if ok:
            return m, cols, [sorted(r) for r in rows]
    raise SystemExit("construction failed")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=204)
    ap.add_argument("--dv", type=int, default=3)
    ap.add_argument("--dc", type=int, default=6)
    ap.add_argument("--seed", type=int, default=484)
    a = ap.parse_args()
    m, cols, rows = build(a.n, a.dv, a.dc, a.seed)
    out = sys.stdout
    out.write(f"{a.n} {m}\n{a.dv} {a.dc}\n")
    out.write(" ".join(str(len(c)) for c in cols) + "\n")
    out.write(" ".join(str(len(r)) for r in rows) + "\n")
    for c in cols:
        out.write(" ".join(str(i + 1) for i in c) + "\n")
    for r in rows:
        out.write(" ".join(str(j + 1) for j in r) + "\n")


if __name__ == "__main__":
    main()
