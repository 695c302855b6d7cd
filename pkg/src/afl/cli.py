"""Command-line entry points.

Each experiment command writes into ``<output_dir>/<run_id>/``: the resolved
config, the JSONL transcript of every backend call, and one metrics/report
pair per experiment. Exit status: 0 ok, 1 runtime failure, 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import (
    ConfigError,
    apply_overrides,
    build_resources,
    config_hash,
    load_config,
    load_dataset,
    resolve_dataset,
    artifact_path,
    train_scorer,
    with_replay,
)
from .domain import AFLError, BackendSpec, InvariantError, RunConfig
from .evalbench import (
    MetricsReport,
    Resources,
    audit_position,
    eval_recommendation,
    eval_sequences,
    eval_user_sim,
    make_env,
    rerank_baseline,
    run_ablation,
    run_popularity_audit,
    write_report,
)
from .ingest import DataError, chronological_split, popularity_counts, sample_candidates, write_split_manifest
from .loop import LoopCase, TranscriptWriter, feedback_loop
from .recmodel import dumps_artifact, save_artifact
from .synthetic import make_synthetic, write_log

logger = logging.getLogger("afl")


class UsageError(AFLError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("--dataset", help="registry name or directory with interactions.tsv and catalog.tsv")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epoch", type=int)
    p.add_argument("--k", type=int, choices=(1, 3, 9), help="positive:negative ratio 1:k for sim panels")
    p.add_argument("--policy", choices=("first", "random", "last"))
    p.add_argument("--backend-rec", help="backend kind for the recommendation agent")
    p.add_argument("--backend-user", help="backend kind for the user agent")
    p.add_argument("--no-rec-model", action="store_true", help="omit the model suggestion block")
    p.add_argument("--no-reward-model", action="store_true", help="omit the reward score block")
    p.add_argument("--test-subsample", type=int)
    p.add_argument("--eval-split", choices=("train", "validation", "test", "all"))
    p.add_argument("--init-fraction", type=float, help="share of each sequence that initializes the user agent")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--replay", help="transcript file or run directory to replay responses from")
    p.add_argument("--output-dir", help="parent directory for run directories")
    p.add_argument("--run-id", help="explicit run id (default: timestamp plus config hash)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afl", description="Agentic feedback loop experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic dataset with planted preferences")
    p.add_argument("out")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train and save the configured scorers")
    _common(p)
    p.add_argument("--force", action="store_true", help="overwrite artifacts whose content differs")

    for name, help_ in (
        ("eval-rec", "recommendation task, HitRatio@1"),
        ("eval-sim", "user simulation task, precision/recall/F1"),
        ("ablate", "ablations; without --no-* flags runs all four settings"),
        ("audit-popularity", "popularity tier shares of final recommendations"),
        ("audit-position", "HitRatio@1 with the positive first, random or last"),
    ):
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("rerank", help="recommend a top-n list once, then rerank it")
    _common(p)
    p.add_argument("--ranker", choices=("scorer", "user-agent"))

    p = sub.add_parser("run", help="run one loop for one user and print the transcript")
    _common(p)
    p.add_argument("user")
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    cfg, registry = load_config(args.config)
    overrides: dict[str, Any] = {
        "dataset": args.dataset,
        "seed": args.seed,
        "max_epoch": args.max_epoch,
        "k_ratio": args.k,
        "ordering_policy": args.policy,
        "test_subsample": args.test_subsample,
        "eval_split": args.eval_split,
        "init_fraction": args.init_fraction,
        "concurrency": args.concurrency,
        "output_dir": args.output_dir,
    }
    if args.no_rec_model and args.command != "ablate":
        overrides["use_rec_model"] = False
    if args.no_reward_model and args.command != "ablate":
        overrides["use_reward_model"] = False
    if getattr(args, "ranker", None):
        overrides["ranker"] = args.ranker
    for flag, name in ((args.backend_rec, "rec_backend"), (args.backend_user, "user_backend")):
        if flag:
            current: BackendSpec = getattr(cfg, name)
            settings = current.settings if current.kind == flag else {}
            try:
                overrides[name] = BackendSpec(flag, dict(settings))
            except InvariantError as exc:
                raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
    cfg = apply_overrides(cfg, overrides)
    if args.replay:
        if not Path(args.replay).exists():
            raise ConfigError(f"replay path not found: {args.replay}")
        cfg = with_replay(cfg, args.replay)
    return cfg, registry


def open_run_dir(cfg: RunConfig, args: argparse.Namespace) -> Path:
    run_id = args.run_id or f"{time.strftime('%Y%m%dT%H%M%S')}-{config_hash(cfg)[:12]}"
    run_dir = Path(cfg.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"run directory: {run_dir}", file=sys.stderr)
    return run_dir


def _emit(report: MetricsReport) -> None:
    for line in report.summary_lines():
        print(line)


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    log = make_synthetic(n_users=args.users, n_items=args.items, seed=args.seed)
    inter, cat = write_log(log, args.out)
    print(f"wrote {len(log.events)} events to {inter} and {len(log.catalog)} items to {cat}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg, registry = resolve_config(args)
    log = load_dataset(resolve_dataset(cfg, registry))
    split = chronological_split(log, cfg.split_ratios)
    trained: dict[str, tuple[Any, Any]] = {}
    for role, spec in (("rec_model", cfg.rec_model), ("reward_model", cfg.reward_model), ("fallback_scorer", cfg.fallback_scorer)):
        key = json.dumps([spec.kind, spec.hyperparameters], sort_keys=True)
        if key not in trained:
            trained[key] = train_scorer(cfg, spec, split, log)
        model, report = trained[key]
        path = artifact_path(cfg, role, spec)
        if path.is_file() and path.read_text(encoding="utf-8").rstrip("\n") != dumps_artifact(model) and not args.force:
            raise AFLError(f"{path} exists with different content; pass --force to overwrite")
        digest = save_artifact(model, path)
        report_path = path.with_suffix(".train.json")
        report_path.write_text(
            json.dumps({"losses": list(report.losses), "seed": report.seed, "artifact_sha256": digest}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        final = f"{report.losses[-1]:.6f}" if report.losses else "n/a"
        print(f"{role}: kind={spec.kind} final_loss={final} artifact={path} sha256={digest[:16]}")
    write_split_manifest(split, Path(cfg.artifacts_dir) / cfg.dataset / "split.tsv")
    return 0


def _experiment(
    args: argparse.Namespace, body: Callable[[RunConfig, Resources, TranscriptWriter, Path], None]
) -> int:
    cfg, registry = resolve_config(args)
    res = build_resources(cfg, registry)
    run_dir = open_run_dir(cfg, args)
    writer = TranscriptWriter(run_dir / "transcript.jsonl")
    body(cfg, res, writer, run_dir)
    return 0


def _save(run_dir: Path, name: str, metrics: dict, cfg: RunConfig, res: Resources) -> None:
    write_report(run_dir, name, metrics, cfg, res.provenance)


def cmd_eval_rec(args: argparse.Namespace) -> int:
    def body(cfg, res, writer, run_dir):
        report = eval_recommendation(cfg, res, writer=writer)
        _save(run_dir, "eval-rec", report.to_dict(), cfg, res)
        _emit(report)

    return _experiment(args, body)


def cmd_eval_sim(args: argparse.Namespace) -> int:
    def body(cfg, res, writer, run_dir):
        report = eval_user_sim(cfg, res, writer=writer)
        _save(run_dir, "eval-sim", report.to_dict(), cfg, res)
        _emit(report)

    return _experiment(args, body)


def cmd_rerank(args: argparse.Namespace) -> int:
    def body(cfg, res, writer, run_dir):
        report = rerank_baseline(cfg, res, writer=writer)
        _save(run_dir, f"rerank-{cfg.ranker}", report.to_dict(), cfg, res)
        _emit(report)

    return _experiment(args, body)


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.no_rec_model or args.no_reward_model:
        settings = [(not args.no_rec_model, not args.no_reward_model)]
    else:
        settings = [(True, True), (False, True), (True, False), (False, False)]

    def body(cfg, res, writer, run_dir):
        for rec_on, reward_on in settings:
            report = run_ablation(cfg, res, rec_on, reward_on, writer=writer)
            name = f"ablate-rec{int(rec_on)}-reward{int(reward_on)}"
            _save(run_dir, name, report.to_dict(), cfg, res)
            print(f"{name}: hit_ratio_at_1={report.hit_ratio_at_1:.4f} n_cases={report.n_cases} n_errored={report.n_errored}")

    return _experiment(args, body)


def cmd_audit_popularity(args: argparse.Namespace) -> int:
    def body(cfg, res, writer, run_dir):
        audit = run_popularity_audit(cfg, res, popularity_counts(res.split), writer=writer)
        _save(run_dir, "audit-popularity", audit.to_dict(), cfg, res)
        for setting, shares in [*audit.shares.items(), ("baseline", audit.baseline)]:
            cells = " ".join(f"{t}={v:.4f}" for t, v in shares.items())
            print(f"max_epoch={setting}: {cells}" if setting != "baseline" else f"baseline: {cells}")

    return _experiment(args, body)


def cmd_audit_position(args: argparse.Namespace) -> int:
    def body(cfg, res, writer, run_dir):
        audit = audit_position(cfg, res, writer=writer)
        _save(run_dir, "audit-position", audit.to_dict(), cfg, res)
        for k in map(str, cfg.max_epochs_sweep):
            cells = " ".join(f"{p}={audit.hit_ratio[p][k]:.4f}" for p in ("first", "random", "last"))
            print(f"max_epoch={k}: {cells}")

    return _experiment(args, body)


def _label(res: Resources, item: int | None) -> str:
    if item is None:
        return "(none)"
    return f"{res.catalog[item].title} [{item}]"


def format_outcome(outcome, res: Resources, verbose: bool) -> list[str]:
    lines = []
    if verbose:
        for t in outcome.transcript:
            score = "(omitted)" if t.s_raw is None else f"raw={t.s_raw:.4f} normalized={t.s_norm:.4f}"
            lines += [
                f"round {t.round}",
                f"  I_m: {_label(res, t.i_m)}",
                f"  I_r: {_label(res, t.i_r)}",
                f"  R_r: {t.r_r}",
                f"  S:   {score}",
                f"  D_u: {'accept' if t.d_u else 'reject'}",
                f"  R_u: {t.r_u}",
            ]
    lines.append(
        f"LoopOutcome(final_item={_label(res, outcome.final_item)}, accepted={outcome.accepted}, "
        f"iterations_used={outcome.iterations_used})"
    )
    return lines


def cmd_run(args: argparse.Namespace) -> int:
    cfg, registry = resolve_config(args)
    res = build_resources(cfg, registry)
    seqs = {s.user: s for s in eval_sequences(replace(cfg, test_subsample=None), res.split)}
    if args.user not in seqs:
        raise UsageError(f"user {args.user!r} not in the {cfg.eval_split} split")
    seq = seqs[args.user]
    if len(seq) < 2:
        raise UsageError(f"user {args.user!r} has fewer than 2 interactions")
    cands = sample_candidates(seq, seq.items[-1], res.catalog, cfg.seed, cfg.ordering_policy, cfg.candidate_size)
    run_dir = open_run_dir(cfg, args)
    log: list[dict[str, Any]] = []
    run_id = f"run/K{cfg.max_epoch}/{cfg.ordering_policy}/{seq.user}"
    outcome, _ = feedback_loop(make_env(cfg, res), LoopCase(seq.user, seq.items[:-1], cands, seq.items[-1]), run_id, log)
    log.append({"type": "outcome", "run_id": run_id, "user": seq.user, "truth": seq.items[-1], **outcome.to_dict()})
    TranscriptWriter(run_dir / "transcript.jsonl").write(log)
    for line in format_outcome(outcome, res, args.verbose):
        print(line)
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval-rec": cmd_eval_rec,
    "eval-sim": cmd_eval_sim,
    "rerank": cmd_rerank,
    "ablate": cmd_ablate,
    "audit-popularity": cmd_audit_popularity,
    "audit-position": cmd_audit_position,
    "run": cmd_run,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) and args.command != "run" else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, DataError, InvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
