"""Command-line entry point: ``fit``, ``adapt``, ``sensitivity``, ``selftest``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import checkpoint
from .config import (DATA_ALIASES, ConfigError, DataConfig, RunConfig, build_dataset, build_scenario, fit_model,
                     source_stats_for)
from .data import build_stream
from .engine import Adapter, ResultsLog
from .numerics import make_rng
from .quant import sensitivity_experiment
from .shift import KL_VARIANTS, ShiftConfig

log = logging.getLogger("fwdtta")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fwdtta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (file for fit/sensitivity, directory for adapt)")
        sp.add_argument("-v", "--verbose", action="store_true")

    fit = sub.add_parser("fit", help="fit a quantized source model and write a checkpoint")
    common(fit)
    fit.add_argument("--arch", choices=("mlp", "cnn"))
    fit.add_argument("--data", help="dataset kind: blobs, spirals or idx")
    fit.add_argument("--bits", type=int)

    ad = sub.add_parser("adapt", help="run continual adaptation over a corruption stream")
    common(ad)
    ad.add_argument("--checkpoint", help="checkpoint from `fit`; refit from the config when omitted")
    ad.add_argument("--mode", choices=("zoa", "zoa-no-drl", "source", "bn-adapt"))
    ad.add_argument("--bits", type=int)
    ad.add_argument("--rounds", type=int)
    ad.add_argument("--batch-size", type=int)
    ad.add_argument("--kl-variant", choices=KL_VARIANTS)
    ad.add_argument("--reset-per-domain", action="store_true")
    ad.add_argument("--fp-budget-check", action="store_true")

    sens = sub.add_parser("sensitivity", help="quantization sensitivity sweep, CSV report")
    common(sens)
    sens.add_argument("--bits", help="comma-separated bit widths, e.g. 2,3,4,5,6,7,8")

    st = sub.add_parser("selftest", help="fast oracle and invariant checks")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    out = _require_out(args)
    cfg = _load_config(args)
    if args.arch:
        cfg.model.arch = args.arch
    if args.data:
        kind = DATA_ALIASES.get(args.data, args.data)
        if kind != cfg.data.kind:
            if kind == "idx-images":
                raise UsageError("idx data needs image/label paths in the config file")
            cfg.data = DataConfig(kind) if kind == "synthetic-blobs" else DataConfig(kind, {})
    if args.bits is not None:
        cfg.model.bits = args.bits
    dataset = build_dataset(cfg)
    model = fit_model(cfg, dataset)
    stats = source_stats_for(cfg, model, dataset)
    checkpoint.save_checkpoint(out, model, stats)
    print(json.dumps({"checkpoint": str(out), "config": cfg.resolved()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_adapt(args) -> int:
    out = _require_out(args)
    cfg = _load_config(args)
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    for flag, key in (("mode", "mode"), ("kl_variant", "kl_variant"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            cfg.adapt[key] = getattr(args, flag)
    if args.kl_variant is not None and "threshold" not in cfg.adapt:
        cfg.adapt["threshold"] = ShiftConfig.for_variant(args.kl_variant).threshold
    if args.reset_per_domain:
        cfg.adapt["reset_per_domain"] = True
    if args.batch_size is not None:
        cfg.stream.batch_size = args.batch_size
    if args.rounds is not None:
        cfg.stream.rounds = args.rounds
    if args.bits is not None:
        if cfg.checkpoint:
            raise UsageError("--bits conflicts with --checkpoint")
        cfg.model.bits = args.bits
    cfg.adapt.setdefault("batch_size", cfg.stream.batch_size)
    acfg = cfg.adapt_config()
    if acfg.batch_size != cfg.stream.batch_size:
        raise UsageError("adapt.batch_size and stream.batch_size differ")

    model = stats = None
    if cfg.checkpoint:
        model, stats, _ = checkpoint.load_checkpoint(cfg.checkpoint)
    sc = build_scenario(cfg, model, stats)

    t0 = time.perf_counter()
    sc.model.reset_counter()
    adapter = Adapter(acfg, sc.model, sc.source_stats)
    for batch in build_stream(sc.plan, sc.dataset.x_test, sc.dataset.y_test):
        x = batch.x.reshape(len(batch.x), -1) if sc.model.arch["kind"] == "mlp" else batch.x
        adapter.adapt_batch(x, batch.round, batch.domain, batch.y)
    results = ResultsLog(list(adapter.state.records), cfg.resolved())

    summary_extra = {"seconds": round(time.perf_counter() - t0, 3)}
    if args.fp_budget_check:
        passes = 2 if acfg.adapts else 1
        expected = passes * len(results)
        counted = sc.model.forward_count
        summary_extra["fp_budget"] = {"expected": expected, "engine": results.fp_count, "model": counted}
        if results.fp_count != expected or counted != expected:
            log.error("forward-pass budget violated: expected %d, engine %d, model %d",
                      expected, results.fp_count, counted)
            _write_outputs(out, results, summary_extra)
            return EXIT_RUNTIME

    _write_outputs(out, results, summary_extra)
    print(json.dumps({k: v for k, v in {**results.summary(), **summary_extra}.items() if k != "config"},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _write_outputs(out: Path, results: ResultsLog, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    results.write_csv(out / "batches.csv")
    (out / "summary.json").write_text(json.dumps({**results.summary(), **extra}, indent=2, sort_keys=True))


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args)
    bits = cfg.sensitivity.bits
    if args.bits is not None:
        try:
            bits = [int(b) for b in args.bits.split(",") if b.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --bits list: {args.bits!r}") from exc
    if not bits:
        raise UsageError("bit list is empty")
    s = cfg.sensitivity
    report = sensitivity_experiment(s.dim, bits, s.num_samples, make_rng(cfg.seed), num_models=s.num_models)
    text = report.to_csv(args.out) if args.out else report.to_csv()
    if not args.out:
        sys.stdout.write(text)
    if len(bits) >= 2 and min(bits) <= 3 and max(bits) >= 8:
        log.info("log2 slope over n=3..8: %.3f", report.log2_slope(3, 8))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    ok = run_all(seed=args.seed)
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {"fit": cmd_fit, "adapt": cmd_adapt, "sensitivity": cmd_sensitivity, "selftest": cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
