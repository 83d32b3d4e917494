"""Command-line entry points: run the pipeline, the bandit demonstration,
evaluation against ground truth, the review API server, and trace rendering.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Any, NoReturn

from .bandit import BetaSchedule
from .config import (
    ConfigError,
    build_pipeline,
    db_path_from_env,
    load_corpus,
    load_run_settings,
    load_truth,
)
from .store import AuditStore, UnknownIdError


def _fail(message: str, code: int = 2) -> NoReturn:
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def cmd_run(args: argparse.Namespace) -> None:
    try:
        settings = load_run_settings(args.config)
        if args.run_id:
            settings.run_id = args.run_id
        letters = load_corpus(settings.corpus_path)
        store = AuditStore(db_path_from_env(args.db))
        pipeline = build_pipeline(store, settings)
    except ConfigError as exc:
        _fail(str(exc))
    batch_ids = pipeline.run(letters, settings.run_id)
    report = pipeline.run_report(settings.run_id)
    out_path = args.report or f"{settings.run_id}-report.json"
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2)
    from .pipeline import render_report

    print(render_report(report))
    print(f"{len(batch_ids)} batch(es) complete; report written to {out_path}")


def cmd_demo_bandit(args: argparse.Namespace) -> None:
    from .evaluation import DemoConfig, rare_letters_demo

    config = DemoConfig(
        trials=args.trials,
        seed=args.seed,
        schedule=BetaSchedule("linear", args.beta_start, args.beta_end, args.beta_ramp),
        error_rates=tuple(args.error_rates),
    )
    result = rare_letters_demo(config)
    os.makedirs(args.out, exist_ok=True)
    arm_index = {arm.arm_id: i for i, arm in enumerate(result.arms)}

    losses_path = os.path.join(args.out, "losses.csv")
    with open(losses_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "loss", "smoothed"])
        for t, (loss, smooth) in enumerate(zip(result.losses, result.smoothed)):
            writer.writerow([t, loss, f"{smooth:.10f}"])

    selections_path = os.path.join(args.out, "selections.csv")
    with open(selections_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "arm_index", "arm_id"])
        for t, arm_id in enumerate(result.selections):
            writer.writerow([t, arm_index[arm_id], arm_id])

    arms_path = os.path.join(args.out, "arms.json")
    with open(arms_path, "w") as f:
        json.dump(
            [
                {
                    "index": i,
                    "arm_id": arm.arm_id,
                    "pull_count": arm.pull_count,
                    "mean_loss": arm.mean_loss,
                    "prompt": arm.prompt,
                }
                for i, arm in enumerate(result.arms)
            ],
            f,
            indent=2,
        )

    if not args.no_plots:
        _demo_plots(result, args.out)
    print(f"demo complete: mean loss {sum(result.losses) / len(result.losses):.3f}")
    print(f"traces written to {losses_path} and {selections_path}")


def _demo_plots(result: Any, out_dir: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(result.losses, ".", alpha=0.3, label="loss")
    ax.plot(result.smoothed, label="smoothed (gaussian)")
    ax.set_xlabel("trial")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss-vs-trial.png"), dpi=120)
    plt.close(fig)

    order = sorted(range(len(result.arms)), key=lambda i: result.arms[i].mean_loss)
    rank = {result.arms[i].arm_id: r for r, i in enumerate(order)}
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot([rank[a] for a in result.selections], ".", markersize=3)
    ax.set_xlabel("trial")
    ax.set_ylabel("arm (sorted by mean loss)")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "selection-vs-trial.png"), dpi=120)
    plt.close(fig)


def cmd_eval(args: argparse.Namespace) -> None:
    from .evaluation import evaluate_run, render_eval_report

    if not os.path.exists(args.system_output):
        _fail(f"system output file not found: {args.system_output}")
    with open(args.system_output) as f:
        system_report = json.load(f)
    try:
        truth = load_truth(args.truth)
    except ConfigError as exc:
        _fail(str(exc))
    report = evaluate_run(system_report, truth, bucket_edges=args.buckets)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "eval-report.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2)
    text = render_eval_report(report)
    with open(os.path.join(args.out, "eval-report.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    print(f"\nreport written to {json_path}")


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    from .api import create_app
    from .engine import SubroutineEngine
    from .scripted import scripted_pipeline_backend

    store = AuditStore(db_path_from_env(args.db))
    engine = SubroutineEngine(store, scripted_pipeline_backend())
    app = create_app(store, engine)
    uvicorn.run(app, host=args.host, port=args.port)


def cmd_trace(args: argparse.Namespace) -> None:
    store = AuditStore(db_path_from_env(args.db))
    try:
        trace = store.trace(args.invocation)
    except UnknownIdError as exc:
        _fail(str(exc))
    for node in trace.nodes:
        inv = node.invocation
        print(f"[{inv.stage or 'call'}] {inv.invocation_id} ({inv.status})")
        if inv.subroutine_id:
            print(f"  subroutine: {inv.subroutine_id}  arm: {inv.arm_id}")
        if node.prompt_text:
            first_line = node.prompt_text.strip().splitlines()[0]
            print(f"  prompt: {first_line}")
        print(f"  input: {json.dumps(inv.input_payload)[:200]}")
        if inv.output_payload is not None:
            print(f"  output: {json.dumps(inv.output_payload)[:200]}")
        if inv.error:
            print(f"  error: {inv.error.splitlines()[-1]}")
        for fb in node.feedback:
            print(f"  feedback[{fb.source}] by {fb.reviewer_id}: ratings {fb.ratings} loss {fb.loss:.3f}")
        if inv.parent_ids:
            print(f"  parents: {', '.join(inv.parent_ids)}")
        print()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptarm")
    parser.add_argument("--db", help="audit store path (default: $PROMPTARM_DB or promptarm.db)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process a corpus through the pipeline")
    p_run.add_argument("--config", required=True, help="run configuration JSON file")
    p_run.add_argument("--run-id", help="override the configured run id (for resuming)")
    p_run.add_argument("--report", help="output path for the run report JSON")
    p_run.set_defaults(func=cmd_run)

    p_demo = sub.add_parser("demo-bandit", help="rare-letters prompt evolution demo")
    p_demo.add_argument("--trials", type=int, default=100)
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--out", default="demo-out")
    p_demo.add_argument("--beta-start", type=float, default=0.0)
    p_demo.add_argument("--beta-end", type=float, default=1.0)
    p_demo.add_argument("--beta-ramp", type=int, default=100)
    p_demo.add_argument(
        "--error-rates", type=float, nargs="+", default=[0.1, 0.5, 0.9],
        help="scripted arm error rates",
    )
    p_demo.add_argument("--no-plots", action="store_true")
    p_demo.set_defaults(func=cmd_demo_bandit)

    p_eval = sub.add_parser("eval", help="compare a run report against ground truth")
    p_eval.add_argument("--system-output", required=True, help="run report JSON")
    p_eval.add_argument("--truth", required=True, help="ground-truth NDJSON")
    p_eval.add_argument("--out", default="eval-out")
    p_eval.add_argument("--buckets", type=int, nargs="*", default=[500, 1000, 2000, 4000])
    p_eval.set_defaults(func=cmd_eval)

    p_serve = sub.add_parser("serve", help="start the review API server")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=cmd_serve)

    p_trace = sub.add_parser("trace", help="render an invocation's audit trace")
    p_trace.add_argument("--invocation", required=True)
    p_trace.set_defaults(func=cmd_trace)

    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
