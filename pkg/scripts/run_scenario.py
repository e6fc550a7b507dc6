"""Run several adaptation modes over several seeds of one scenario and tabulate accuracy per round.

    python3 scripts/run_scenario.py --config configs/default_scenario.json --seeds 5
    python3 scripts/run_scenario.py --set adapt.lr_theta=0.005 --set stream.batches_per_episode=25

Each seed fits its own source model once and shares it across modes.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from fwdtta.config import RunConfig, build_dataset, build_scenario, fit_model
from fwdtta.data import build_stream
from fwdtta.engine import MODES, Adapter, ResultsLog

DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "default_scenario.json"


def apply_override(d: dict, item: str):
    key, _, raw = item.partition("=")
    *path, leaf = key.split(".")
    for k in path:
        d = d.setdefault(k, {})
    d[leaf] = json.loads(raw) if raw not in ("", None) else None


def run_mode(cfg: RunConfig, model, mode: str) -> ResultsLog:
    cfg.adapt["mode"] = mode
    sc = build_scenario(cfg, model)
    adapter = Adapter(cfg.adapt_config(), sc.model, sc.source_stats)
    for b in build_stream(sc.plan, sc.dataset.x_test, sc.dataset.y_test):
        adapter.adapt_batch(b.x, b.round, b.domain, b.y)
    return ResultsLog(adapter.state.records)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(DEFAULT))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--modes", default="source,bn-adapt,zoa-no-drl,zoa")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                    help="override a config entry, e.g. adapt.lr_theta=0.005")
    ap.add_argument("--out", help="write per-mode, per-seed round accuracies as JSON")
    args = ap.parse_args()

    base = json.loads(Path(args.config).read_text())
    for item in args.set:
        apply_override(base, item)
    modes = args.modes.split(",")
    unknown = set(modes) - set(MODES)
    if unknown:
        ap.error(f"unknown modes {sorted(unknown)}")

    results = {m: [] for m in modes}
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        cfg = RunConfig.from_dict({**base, "seed": seed})
        model = fit_model(cfg, build_dataset(cfg))
        for mode in modes:
            log = run_mode(cfg, model, mode)
            results[mode].append(list(log.per_round().values()))
    elapsed = time.perf_counter() - t0

    rounds = len(next(iter(results.values()))[0])
    print(f"{'mode':<11} " + " ".join(f"r{r + 1:<5}" for r in range(rounds)) + "  mean")
    for mode, runs in results.items():
        pr = 100 * np.mean(runs, axis=0)
        print(f"{mode:<11} " + " ".join(f"{v:6.2f}" for v in pr) + f"  {pr.mean():6.2f}")
    print(f"# {args.seeds} seeds, {elapsed:.0f}s")
    if args.out:
        Path(args.out).write_text(json.dumps({"config": base, "per_round": results}, indent=2))


if __name__ == "__main__":
    main()
