"""Time the screening CLI on a synthetic pool and report peak memory.

    python scripts/run_scale_benchmark.py --n 1000000 --workdir /tmp/bench
"""
from __future__ import annotations

import argparse
import hashlib
import json
import resource
import subprocess
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from make_synthetic_pool import write_pool  # noqa: E402


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tau", type=float, default=0.95)
    ap.add_argument("--runs", type=int, default=2)
    ap.add_argument("--workdir")
    args = ap.parse_args()

    work = Path(args.workdir or tempfile.mkdtemp(prefix="synthscreen-bench-"))
    t0 = time.perf_counter()
    info = write_pool(work / "pool", args.n, args.seed)
    gen = time.perf_counter() - t0

    timings, digests = [], []
    for k in range(args.runs):
        out = work / f"run{k}"
        cmd = [sys.executable, "-m", "synthscreen", "screen", str(work / "pool" / "candidates.jsonl"),
               "--composition-scores", str(work / "pool" / "scores_c.csv"),
               "--structure-scores", str(work / "pool" / "scores_s.csv"),
               "--tau", str(args.tau), "--out", str(out)]
        t0 = time.perf_counter()
        subprocess.run(cmd, check=True, stdout=subprocess.DEVNULL)
        timings.append(time.perf_counter() - t0)
        digests.append(hashlib.sha256((out / "shortlist.csv").read_bytes()).hexdigest())

    # ru_maxrss is in KiB on Linux: the largest child, not a sum
    peak_mib = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1024
    stages = json.loads((work / "run0" / "funnel.json").read_text())["stages"]
    print(json.dumps({
        "n": args.n, "tau": args.tau, "planted": info["planted"], "generate_s": round(gen, 2),
        "run_s": [round(t, 2) for t in timings], "peak_rss_mib": round(peak_mib, 1),
        "identical_reruns": len(set(digests)) == 1,
        "funnel": {s["name"]: [s["input"], s["output"]] for s in stages},
    }, indent=2))


if __name__ == "__main__":
    main()
