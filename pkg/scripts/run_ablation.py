"""Scaled strategy comparison on the synthetic corpus.

    python3 scripts/run_ablation.py --seeds 0 1 2 --out runs/ablation

Trains baseline, pl_once, fs, ema and topipl for each seed (shared stage
prefixes are trained once), scores every final student on the test split
and writes ``results.json`` next to the per-strategy run directories.
"""

import argparse
import json
import time
from pathlib import Path

from topipl_lab.synthdata import SynthSpec, gen_corpus
from topipl_lab.trainer import STRATEGIES, LabData, TrainConfig, decode_examples, prepare, run_ablation, score


def ordering_clauses(w: dict) -> dict:
    return {
        "baseline > pl_once": w["baseline"] - w["pl_once"] >= 0.01,
        "pl_once > fs": w["pl_once"] - w["fs"] >= 0.01,
        "topipl <= ema + 0.01": w["topipl"] <= w["ema"] + 0.01,
        "topipl < pl_once": w["pl_once"] - w["topipl"] >= 0.01,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--config", help="JSON TrainConfig overrides")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    corpus = gen_corpus(SynthSpec(seed=args.corpus_seed))
    data = LabData.from_manifests(corpus.labeled, corpus.unlabeled, corpus.dev)
    test = prepare(corpus.test, None, True)
    out = Path(args.out)
    results = {}
    for seed in args.seeds:
        t0 = time.perf_counter()
        cfg = TrainConfig.from_json({**overrides, "seed": seed})
        runs = run_ablation(cfg, data, STRATEGIES, out / f"seed{seed}")
        wers = {k: score(test, decode_examples(r.student.params, test, data.tok))[0] for k, r in runs.items()}
        clauses = ordering_clauses(wers)
        results[seed] = {"test_wer": wers, "clauses": clauses, "seconds": round(time.perf_counter() - t0, 1)}
        print(f"seed {seed}: " + " ".join(f"{k}={v:.3f}" for k, v in wers.items())
              + f"  all clauses: {all(clauses.values())}", flush=True)
    passing = sum(all(r["clauses"].values()) for r in results.values())
    print(f"{passing}/{len(results)} seeds satisfy every ordering clause")
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
