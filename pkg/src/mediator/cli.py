"""Command-line front end: conflicts, merge, route, reconstruct, report.

Exit codes: 0 success, 2 usage or validation error, 3 I/O or corrupt
input, 4 internal error.  JSON outputs use fixed key order and 17
significant digits for floats so runs can be diffed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import errors
from .bundle import memory_report, read_bundle, read_manifest, write_bundle
from .conflict import analyze_conflicts, build_merge_plan
from .jsonutil import dumps_stable
from .merge import BundleConfig, build_bundle
from .partition import PartitionRules, partition_layers
from .reconstruct import reconstruct, reconstruct_streaming
from .routing import (
    DEFAULT_FEATURE_DIM,
    DemoRouter,
    RoutingWeights,
    demo_router_predict,
    hashed_text_features,
    routing_weights,
    train_demo_router,
)
from .tensor_store import Checkpoint, load_checkpoint, save_checkpoint

_IO_ERRORS = (
    errors.IoFailure,
    errors.MalformedContainer,
    errors.DigestMismatch,
    errors.UnknownFormatVersion,
    errors.UnsupportedDtype,
    OSError,
)


def _emit(doc: dict, out: str | None) -> None:
    text = dumps_stable(doc)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_expert_args(pairs: list[str]) -> dict[str, str]:
    experts: dict[str, str] = {}
    for pair in pairs:
        task, sep, path = pair.partition("=")
        if not sep or not task or not path:
            raise ValueError(f"--expert expects task=path, got {pair!r}")
        if task in experts:
            raise ValueError(f"duplicate expert task {task!r}")
        experts[task] = path
    return experts


def _load_rules(path: str | None) -> PartitionRules:
    return PartitionRules.from_file(path) if path else PartitionRules.default()


def _load_experts(pairs: list[str]) -> dict[str, Checkpoint]:
    return {task: load_checkpoint(path) for task, path in _parse_expert_args(pairs).items()}


def _merged_config(args) -> BundleConfig:
    """Defaults < --config file < explicit flags."""
    doc = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    base = BundleConfig.from_dict(doc)
    overrides = {
        "keep_ratio": args.keep_ratio,
        "sigma_mult": args.sigma_mult,
        "threshold_mult": args.threshold_mult,
        "avg_method": args.avg_method,
        "lam": args.lam,
        "dtype_policy": args.dtype_policy,
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    return BundleConfig(**{**base.__dict__, **fields})


def _analyze(args, config: BundleConfig):
    if len(args.expert) < 2:
        raise errors.FewerThanTwoExperts(
            f"need a minimum expert count of 2, got {len(args.expert)}"
        )
    pretrained = load_checkpoint(args.base)
    experts = _load_experts(args.expert)
    layer_map = partition_layers(pretrained, _load_rules(args.rules))
    report = analyze_conflicts(
        pretrained, experts, layer_map, config.sigma_mult, config.threshold_mult
    )
    plan = build_merge_plan(report, layer_map, config.threshold_mult, config.avg_method)
    return pretrained, experts, layer_map, plan


def _report_doc(plan) -> dict:
    report = plan.report
    decisions = {str(l): plan.decisions[l].as_string() for l in sorted(plan.decisions)}
    decisions["globals"] = plan.globals_decision.as_string()
    return {
        "layers": {str(l): report.per_layer[l] for l in sorted(report.per_layer)},
        "mu": report.mu,
        "sigma": report.sigma,
        "threshold": report.threshold,
        "decisions": decisions,
    }


def cmd_conflicts(args) -> int:
    _, _, _, plan = _analyze(args, _merged_config(args))
    _emit(_report_doc(plan), args.out)
    return 0


def cmd_merge(args) -> int:
    config = _merged_config(args)
    pretrained, experts, layer_map, plan = _analyze(args, config)
    bundle = build_bundle(pretrained, experts, plan, layer_map, config, threads=args.threads)
    write_bundle(bundle, args.out)
    routed = plan.routed_layers
    print(f"bundle written to {args.out}: {len(routed)} of {layer_map.n_layers} layers routed")
    return 0


def _resolve_tasks(args, fallback: list[str] | None = None) -> list[str]:
    if args.bundle:
        tasks = list(read_manifest(args.bundle).tasks)
        if "pretrain" not in tasks and fallback and "pretrain" in fallback:
            tasks.append("pretrain")
        return tasks
    if args.tasks:
        return [t.strip() for t in args.tasks.split(",") if t.strip()]
    if fallback:
        return fallback
    raise ValueError("task order is required: pass --bundle or --tasks")


def _weights_doc(w: RoutingWeights, tasks: list[str]) -> dict:
    return {
        "weights": {t: w.weights[t] for t in tasks if t in w.weights},
        "pretrain_weight": w.pretrain_weight,
        "ood": w.ood_triggered,
    }


def _router_to_doc(router: DemoRouter, tasks: list[str], dim: int) -> dict:
    return {
        "feature_dim": dim,
        "tasks": tasks,
        "weights": [[float(v) for v in row] for row in router.weights],
        "bias": [float(v) for v in router.bias],
    }


def _router_from_file(path: str) -> tuple[DemoRouter, list[str], int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    router = DemoRouter(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        bias=np.asarray(doc["bias"], dtype=np.float64),
    )
    return router, [str(t) for t in doc["tasks"]], int(doc["feature_dim"])


def cmd_route(args) -> int:
    modes = [bool(args.probs), bool(args.train), bool(args.classify)]
    if sum(modes) != 1:
        raise ValueError("pass exactly one of --probs, --train, --classify")

    if args.train:
        if not args.router_out:
            raise ValueError("--train needs --router-out FILE")
        corpora = _parse_expert_args(args.train)
        tasks = sorted(corpora)
        texts, labels = [], []
        for idx, task in enumerate(tasks):
            lines = [l for l in Path(corpora[task]).read_text(encoding="utf-8").splitlines() if l.strip()]
            texts.extend(lines)
            labels.extend([idx] * len(lines))
        features = hashed_text_features(texts, args.feature_dim)
        router = train_demo_router(features, labels, args.epochs, args.learning_rate)
        probs = demo_router_predict(router, features)
        accuracy = float((probs.argmax(axis=1) == [int(l) for l in labels]).mean())
        Path(args.router_out).write_text(
            dumps_stable(_router_to_doc(router, tasks, args.feature_dim)), encoding="utf-8"
        )
        _emit({"tasks": tasks, "train_accuracy": accuracy, "router": args.router_out}, args.out)
        return 0

    if args.classify:
        if not args.router:
            raise ValueError("--classify needs --router FILE")
        router, router_tasks, dim = _router_from_file(args.router)
        text = Path(args.classify).read_text(encoding="utf-8")
        probs_row = demo_router_predict(router, hashed_text_features([text], dim))[0]
        prob_map = {t: float(p) for t, p in zip(router_tasks, probs_row)}
        tasks = _resolve_tasks(args, fallback=router_tasks)
    else:
        doc = json.loads(Path(args.probs).read_text(encoding="utf-8"))
        prob_map = {str(k): float(v) for k, v in doc["probs"].items()}
        tasks = _resolve_tasks(args, fallback=sorted(prob_map))

    weights = routing_weights(
        prob_map,
        tasks,
        beta=args.beta,
        k=args.k if args.k is not None else min(2, len(tasks)),
        ood_threshold=args.ood_threshold,
        renormalize=args.renormalize,
    )
    _emit(_weights_doc(weights, tasks), args.out)
    return 0


def _weights_from_file(path: str) -> RoutingWeights:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    weights = {str(k): float(v) for k, v in doc["weights"].items()}
    nonzero = sum(1 for v in weights.values() if v != 0.0)
    return RoutingWeights(
        weights=weights,
        pretrain_weight=float(doc.get("pretrain_weight", 0.0)),
        beta=float(doc.get("beta", 1.5)),
        k=max(1, nonzero),
        ood_triggered=bool(doc.get("ood", False)),
    )


def cmd_reconstruct(args) -> int:
    weights = _weights_from_file(args.weights)
    start = time.monotonic()
    if args.stream:
        tensors = {}
        reconstruct_streaming(
            args.bundle, weights, lambda name, t: tensors.__setitem__(name, t), args.prefetch
        )
        ckpt = Checkpoint({name: tensors[name] for name in sorted(tensors)})
    else:
        ckpt = reconstruct(read_bundle(args.bundle), weights)
    elapsed = time.monotonic() - start
    save_checkpoint(ckpt, args.out, dtype_policy="preserve")
    print(f"reconstructed {len(ckpt)} tensors into {args.out} in {elapsed:.3f}s")
    return 0


def cmd_report(args) -> int:
    router_bytes = Path(args.router).stat().st_size if args.router else 0
    report = memory_report(read_bundle(args.bundle), router_bytes=router_bytes)
    _emit(report.to_dict(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mediator",
        description="Merge finetuned checkpoints into a compact bundle and rebuild "
        "dense models from it on demand.",
        epilog="exit codes: 0 success, 2 usage/validation, 3 I/O, 4 internal",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_analysis_flags(p, with_merge_flags: bool) -> None:
        p.add_argument("--base", required=True, help="pretrained checkpoint (.safetensors)")
        p.add_argument(
            "--expert",
            action="append",
            default=[],
            metavar="TASK=PATH",
            help="finetuned expert checkpoint; repeat per task",
        )
        p.add_argument("--rules", help="partition rules file (default: bundled LLaMA/Qwen rules)")
        p.add_argument("--config", help="JSON config file with bundle settings")
        p.add_argument("--sigma-mult", type=float, dest="sigma_mult")
        p.add_argument("--threshold-mult", type=float, dest="threshold_mult")
        p.add_argument("--avg-method", choices=("mean", "ties"), dest="avg_method")
        if with_merge_flags:
            p.add_argument("--keep-ratio", type=float, dest="keep_ratio")
            p.add_argument("--lambda", type=float, dest="lam")
            p.add_argument("--dtype-policy", choices=("preserve", "force_f32"), dest="dtype_policy")
        else:
            p.set_defaults(keep_ratio=None, lam=None, dtype_policy=None)

    p = sub.add_parser("conflicts", help="report per-layer conflict ratios and the merge plan")
    add_analysis_flags(p, with_merge_flags=False)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_conflicts)

    p = sub.add_parser("merge", help="build a bundle from a base and expert checkpoints")
    add_analysis_flags(p, with_merge_flags=True)
    p.add_argument("--out", required=True, help="bundle output directory (must be empty)")
    p.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="tensor-merge worker threads (default: logical cores)",
    )
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("route", help="compute expert mixing weights")
    p.add_argument("--probs", help="JSON file with {\"probs\": {task: p}}")
    p.add_argument(
        "--train",
        action="append",
        default=[],
        metavar="TASK=CORPUS",
        help="train the demo router on labelled text files (one document per line)",
    )
    p.add_argument("--classify", help="text file to route with a trained demo router")
    p.add_argument("--router", help="demo router JSON (for --classify)")
    p.add_argument("--router-out", dest="router_out", help="where --train saves the router")
    p.add_argument("--bundle", help="bundle directory supplying the task order")
    p.add_argument("--tasks", help="comma-separated task order (alternative to --bundle)")
    p.add_argument("--beta", type=float, default=1.5, help="softmax temperature (default 1.5)")
    p.add_argument("--k", type=int, default=None, help="top-k restriction (default min(2, n))")
    p.add_argument("--ood-threshold", type=float, default=0.5, dest="ood_threshold")
    p.add_argument("--renormalize", action="store_true", help="rescale surviving weights to sum 1")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.1, dest="learning_rate")
    p.add_argument("--feature-dim", type=int, default=DEFAULT_FEATURE_DIM, dest="feature_dim")
    p.add_argument("--out", help="write the JSON output here instead of stdout")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("reconstruct", help="materialize a dense checkpoint from a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--weights", required=True, help="routing-weights JSON (from `mediator route`)")
    p.add_argument("--out", required=True, help="output checkpoint path (.safetensors)")
    p.add_argument("--stream", action="store_true", help="layer-streaming mode with prefetch")
    p.add_argument("--prefetch", type=int, default=1, help="prefetch depth for --stream")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="memory accounting for a written bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--router", help="router artifact whose size is reported as router_bytes")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _IO_ERRORS as exc:
        print(f"mediator: i/o error: {exc}", file=sys.stderr)
        return 3
    except (errors.MediatorError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mediator: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - internal invariant breach
        print(f"mediator: internal error: {exc!r}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
