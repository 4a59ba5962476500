"""Write a synthetic candidate pool with planted filter violations.

Produces ``candidates.jsonl`` plus ``scores_c.csv`` and ``scores_s.csv``
(id,probability) so the funnel can run without structures.  The planted
fractions are exact: candidate i gets its class from ``i mod 20``.

    python scripts/make_synthetic_pool.py OUT_DIR --n 1000000 --seed 0
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

CLEAN = ["Nd3BTeO9", "MgAl2O4", "BaTiO3", "LiCoO2", "Y2Ti2O7", "CaZrO3", "SrFe12O19", "NaNbO3",
         "La2CuO4", "ZnGa2O4", "K2Mo3O10", "Bi4Ti3O12"]
PLATINOID = ["Sr2RuO4", "La2Pd2O5", "BaPtO3", "Nd3IrO7"]
NON_OXIDE = ["NaCl", "GaN", "MoS2", "CsPbI3"]
TOXIC = ["PbTiO3", "CdWO4", "Tl2Mo2O7", "BeAl2O4"]

# i mod 20 -> class: 0 platinoid, 1 non-oxide, 2 toxic, rest clean (15% planted in total)
PLANTED = {0: PLATINOID, 1: NON_OXIDE, 2: TOXIC}


def formula_for(i: int) -> str:
    pool = PLANTED.get(i % 20, CLEAN)
    return pool[(i // 20) % len(pool)]


def write_pool(out: Path, n: int, seed: int = 0) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    s_c = rng.random(n)
    s_s = rng.random(n)
    width = len(str(n))
    with open(out / "candidates.jsonl", "w", encoding="utf-8") as fh:
        fh.writelines(json.dumps({"id": f"c{i:0{width}d}", "formula": formula_for(i)}) + "\n" for i in range(n))
    for name, col in (("scores_c.csv", s_c), ("scores_s.csv", s_s)):
        with open(out / name, "w", encoding="utf-8") as fh:
            fh.write("id,probability\n")
            fh.writelines(f"c{i:0{width}d},{p!r}\n" for i, p in enumerate(col.tolist()))
    counts = {"platinoid": 0, "non_oxide": 0, "toxic": 0}
    for k, name in ((0, "platinoid"), (1, "non_oxide"), (2, "toxic")):
        counts[name] = len(range(k, n, 20))
    return {"n": n, "seed": seed, "planted": counts}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    info = write_pool(Path(args.out), args.n, args.seed)
    print(json.dumps(info))


if __name__ == "__main__":
    main()
