"""Command-line surface: forward, macs, sweep, bench, mask, plan, ablate, verify.

Exit codes: 0 success, 1 runtime/validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import cost, fileio, model, reorg, verify
from .errors import EngineError, UsageError
from .kernels import Rng
from .model import ModelConfig, PRESETS
from .reorg import ReorgPlan, SelectionStrategy

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _default_threads() -> int:
    return int(os.environ.get("EVIT_THREADS", "1"))


def _resolve_run(args) -> fileio.RunConfig:
    run = fileio.RunConfig.load(args.config)
    config = run.config
    plan = run.plan
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed

    locations = plan.locations if plan is not None else ()
    rates = plan.keep_rates if plan is not None else ()
    strategy = plan.strategy if plan is not None else SelectionStrategy.TOPK
    fusion = plan.fusion if plan is not None else True
    changed = False
    if getattr(args, "locations", None):
        locations = tuple(args.locations)
        rates = rates if len(rates) == len(locations) else (1.0,) * len(locations)
        changed = True
    if getattr(args, "keep_rate", None) is not None:
        if not locations:
            locations = tuple(reorg.plan_locations(config.depth, 3))
        rates = (args.keep_rate,) * len(locations)
        changed = True
    if getattr(args, "strategy", None):
        strategy = SelectionStrategy(args.strategy)
        changed = True
    if getattr(args, "no_fusion", False):
        fusion = False
        changed = True
    if changed:
        plan = ReorgPlan(locations, rates, strategy=strategy, fusion=fusion)
    run.plan = plan
    return run


def _load_weights_and_input(args, run: fileio.RunConfig):
    rng = Rng(run.seed)
    if getattr(args, "weights", None):
        w = fileio.load_weights(args.weights, run.config)
    else:
        w = model.init_random(run.config, rng)
    image = None
    wants_image = hasattr(args, "image")
    if wants_image:
        if args.image and getattr(args, "random_input", False):
            raise UsageError("choose exactly one of --image and --random-input")
        if args.image:
            image = fileio.read_ppm(args.image)
            res = run.config.resolution
            if image.shape != (res, res, 3):
                raise UsageError(
                    f"image is {image.shape[1]}x{image.shape[0]}, config wants {res}x{res}")
        elif getattr(args, "random_input", False):
            res = run.config.resolution
            image = rng.uniform(res * res * 3).reshape(res, res, 3)
        else:
            raise UsageError("supply --image PATH or --random-input")
    return w, image, rng


def _print_top5(logits: np.ndarray) -> None:
    order = np.argsort(-logits, kind="stable")[:5]
    for rank, idx in enumerate(order, start=1):
        print(f"{rank}. class {int(idx)}  logit {logits[idx]:.12g}")


def cmd_forward(args) -> int:
    run = _resolve_run(args)
    w, image, rng = _load_weights_and_input(args, run)
    logits, trace, mask_trace = model.forward(image, w, run.plan, rng=rng)
    _print_top5(logits)
    if args.emit_trace:
        doc = fileio.attentiveness_series_to_json(trace)
        doc.update(fileio.mask_trace_to_json(mask_trace))
        fileio.emit_trace_json(doc, args.emit_trace)
        print(f"trace written to {args.emit_trace}")
    return EXIT_OK


def _config_for_macs(args) -> tuple[ModelConfig, tuple[int, ...] | None]:
    """Model dims plus default reorganization locations for macs/sweep."""
    plan_locations = None
    if args.config:
        run = fileio.RunConfig.load(args.config)
        config = run.config
        if run.plan is not None:
            plan_locations = run.plan.locations
    else:
        config = PRESETS[args.arch]
    if getattr(args, "resolution", None):
        config = config.with_resolution(args.resolution)
    return config, plan_locations


def _locations_for(args, config: ModelConfig, from_config) -> tuple[int, ...]:
    if args.locations:
        return tuple(args.locations)
    if from_config:
        return tuple(from_config)
    return tuple(reorg.plan_locations(config.depth, 3))


def cmd_macs(args) -> int:
    config, config_locations = _config_for_macs(args)
    locations = _locations_for(args, config, config_locations)
    baseline = cost.model_macs(config, None)
    if args.keep_rate is None or args.keep_rate == 1.0:
        report, reduction = baseline, None
    else:
        plan = ReorgPlan.uniform(locations, args.keep_rate, fusion=not args.no_fusion)
        report = cost.model_macs(config, plan)
        reduction = report.reduction_vs(baseline)
    if reduction is None:
        print(f"{report.gmacs:.1f} G")
    else:
        print(f"{report.gmacs:.1f} G ({-reduction:.0f}%)")
    print(f"total MACs: {report.total_macs}")
    print("ffn token counts:", ",".join(str(c[1]) for c in report.token_counts_per_stage))
    if args.csv:
        fileio.emit_csv([report], args.csv, baselines=[baseline])
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, config_locations = _config_for_macs(args)
    locations = _locations_for(args, config, config_locations)
    kappas = args.keep_rates or [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    resolutions = args.resolutions or [config.resolution]
    reports = cost.sweep(config, kappas, resolutions, locations,
                         fusion=not args.no_fusion, threads=args.threads)
    baselines = [cost.model_macs(config.with_resolution(r.config.resolution), None)
                 for r in reports]
    for report, baseline in zip(reports, baselines):
        print(f"resolution {report.config.resolution}  keep {report.kappa}  "
              f"{report.gmacs:.4f} G  ({-report.reduction_vs(baseline):.1f}%)")
    if args.csv:
        fileio.emit_csv(reports, args.csv, baselines=baselines)
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_bench(args) -> int:
    run = _resolve_run(args)
    if run.plan is None and args.keep_rate is None:
        raise UsageError("bench needs a keep rate (config locations or --keep-rate)")
    result = bench_mod.run_bench(run.config, run.plan, repeats=args.repeats,
                                 warmup_iters=args.warmup_iters, seed=run.seed)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_mask(args) -> int:
    run = _resolve_run(args)
    if run.plan is None or args.layer not in run.plan.locations:
        raise UsageError(f"layer {args.layer} is not a reorganization layer of this run")
    w, image, rng = _load_weights_and_input(args, run)
    _, _, mask_trace = model.forward(image, w, run.plan, rng=rng)
    fileio.emit_mask_overlay(image, mask_trace, args.layer, args.out,
                             patch=run.config.patch)
    print(f"overlay written to {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    locations = reorg.plan_locations(args.depth, args.reorg_layers)
    print("locations:", ",".join(str(x) for x in locations))
    if args.keep_rate is not None:
        schedule = reorg.WarmupSchedule(total_steps=args.warmup_steps,
                                        targets=(args.keep_rate,) * len(locations))
        rate = reorg.keep_rate_at(schedule, args.step)
        print(f"keep rate at step {args.step}/{args.warmup_steps}: {rate:.12g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _resolve_run(args)
    w, image, rng = _load_weights_and_input(args, run)
    tokens = model.patch_embed(image, w)
    plan = run.plan
    if args.drop_indices:
        tokens = reorg.ablate_input_tokens(tokens, args.drop_indices)
    elif args.drop_rate is not None:
        if args.by == "attentiveness":
            keep = 1.0 - args.drop_rate
            if keep <= 0.0:
                raise UsageError("attentiveness-guided drop rate must be < 1")
            locations = plan.locations if plan else tuple(
                reorg.plan_locations(run.config.depth, 3))
            plan = ReorgPlan.uniform(locations, keep, fusion=False)
        else:
            n_img = tokens.n - 1
            n_drop = n_img - int(np.ceil((1.0 - args.drop_rate) * n_img))
            drop = [i + 1 for i in rng.subset(n_img, n_drop)]
            tokens = reorg.ablate_input_tokens(tokens, drop)
    logits, _, _ = model.encode(tokens, w, plan, rng=rng)
    print(f"tokens after input ablation: {tokens.n}")
    _print_top5(logits)
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    results = verify.run_suites(names, seed=args.seed, trials=args.trials)
    total_passed = total_failed = 0
    for result in results:
        print(f"suite {result.name}:")
        for line in result.lines:
            print("  " + line)
        total_passed += result.passed
        total_failed += result.failed
    print(f"{total_passed} passed, {total_failed} failed")
    return EXIT_OK if total_failed == 0 else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenvit",
        description="ViT inference engine with attentiveness-guided token reorganization")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_plan_overrides(p):
        p.add_argument("--keep-rate", type=float, default=None)
        p.add_argument("--locations", type=_int_list, default=None)
        p.add_argument("--strategy", choices=[s.value for s in SelectionStrategy],
                       default=None)
        p.add_argument("--no-fusion", action="store_true")

    def add_input_source(p):
        p.add_argument("--image", default=None, help="input PPM (binary P6)")
        p.add_argument("--random-input", action="store_true")

    p = sub.add_parser("forward", help="run one forward pass, print top-5 classes")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=None)
    add_input_source(p)
    add_plan_overrides(p)
    p.add_argument("--emit-trace", default=None, help="write attention/reorg trace JSON")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("macs", help="analytic MAC count for one configuration")
    p.add_argument("--arch", choices=sorted(PRESETS), default="deit-s")
    p.add_argument("--config", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--keep-rate", type=float, default=None)
    p.add_argument("--locations", type=_int_list, default=None)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_macs)

    p = sub.add_parser("sweep", help="MAC table over keep rates and resolutions")
    p.add_argument("--arch", choices=sorted(PRESETS), default="deit-s")
    p.add_argument("--config", default=None)
    p.add_argument("--resolutions", type=_int_list, default=None)
    p.add_argument("--keep-rates", type=_float_list, default=None)
    p.add_argument("--locations", type=_int_list, default=None)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--csv", default=None)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bench", help="wall-clock forward benchmark vs keep rate 1")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    add_plan_overrides(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup-iters", type=int, default=1)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("mask", help="write an inattentive-token overlay image")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    add_plan_overrides(p)
    p.set_defaults(fn=cmd_mask, random_input=False)

    p = sub.add_parser("plan", help="evenly spaced reorganization locations")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--reorg-layers", type=int, required=True)
    p.add_argument("--keep-rate", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--step", type=int, default=0)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("ablate", help="drop input tokens before the encoder")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=None)
    add_input_source(p)
    p.add_argument("--drop-indices", type=_int_list, default=None)
    p.add_argument("--drop-rate", type=float, default=None)
    p.add_argument("--by", choices=["attentiveness", "random"], default="random")
    add_plan_overrides(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run oracle/invariant verification suites")
    p.add_argument("--suite", choices=sorted(verify.SUITES) + ["all"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
