"""Command-line entry point: ``bondedit <command> [options]``.

Every command accepts ``--config FILE``, repeated ``--set key=value``,
``--seed N`` and ``-v``/``--quiet``. Command handlers return a
``CommandResult`` which is printed as JSON on stdout; library errors become a
one-line ``error: ...`` on stderr and a non-zero exit status per error family.
"""

from __future__ import annotations

import argparse
import sys
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from tqdm import tqdm

from bondedit.config import ModelConfig, load_config, load_toy_spec
from bondedit.datasets import load_records
from bondedit.decode import beam_search, greedy_decode, postprocess
from bondedit.errors import (
    BondEditError,
    CheckpointError,
    ConfigError,
    DataError,
    NonFiniteError,
    TrainingDivergedError,
)
from bondedit.gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, gradcheck_config, gradcheck_model, load_fixture, run_gradcheck
from bondedit.logs import JsonlWriter, configure_logging, dumps
from bondedit.metrics import evaluate, score_dump
from bondedit.model import ReactionModel
from bondedit.molgraph import ReactionRecord
from bondedit.smiles import write_smiles
from bondedit.toydata import write_toy_dataset
from bondedit.training import fit

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5
EXIT_DIVERGED = 6

# Most specific first.
_EXIT_CODES: tuple[tuple[type[BondEditError], int], ...] = (
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (CheckpointError, EXIT_CHECKPOINT),
    (TrainingDivergedError, EXIT_DIVERGED),
    (NonFiniteError, EXIT_DIVERGED),
)


@dataclass
class CommandResult:
    """Outcome of one command."""

    success: bool
    value: Any = None
    error: str | None = None
    exit_code: int = EXIT_OK

    def to_dict(self) -> dict[str, Any]:
        return {"success": self.success, "value": self.value, "error": self.error}


def exit_code_for(exc: BondEditError) -> int:
    for kind, code in _EXIT_CODES:
        if isinstance(exc, kind):
            return code
    return EXIT_ERROR


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet


def _config(args: argparse.Namespace, base: ModelConfig | None = None) -> ModelConfig:
    return load_config(args.config, args.set, base=base, seed=args.seed)


def _load_model(args: argparse.Namespace) -> ReactionModel:
    """Checkpoint model; config file and overrides may change non-architectural keys."""
    model, _ = ReactionModel.load(args.checkpoint)
    if args.config is None and not args.set and args.seed is None:
        return model
    config = _config(args, base=model.config)
    if config.config_hash() != model.config.config_hash():
        msg = "overrides change architectural keys of the checkpoint model"
        raise CheckpointError(msg)
    return ReactionModel(config, model.store)


def _require_records(path: Path) -> list[ReactionRecord]:
    records = load_records(path)
    if not records:
        msg = "dataset holds no usable reactions"
        raise DataError(msg, str(path))
    return records


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> CommandResult:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    spec = load_toy_spec(args.spec or args.config, overrides)
    paths = write_toy_dataset(spec, args.out, progress=_progress(args))
    return CommandResult(True, {split: str(p) for split, p in paths.items()})


def cmd_train(args: argparse.Namespace) -> CommandResult:
    config = _config(args, base=ModelConfig.desk() if args.desk else None)
    data: Path = args.data
    if data.is_dir():
        train = _require_records(data / "train.jsonl")
        valid_path = data / "valid.jsonl"
        valid = load_records(valid_path) if valid_path.exists() else []
    else:
        train, valid = _require_records(data), []
    model = ReactionModel(config)
    args.out.mkdir(parents=True, exist_ok=True)
    result = fit(model, train, valid, args.out, args.max_iterations, progress=_progress(args))
    return CommandResult(
        True,
        {
            "iterations": result.iterations,
            "best_valid_precision_at_1": result.best_precision,
            "final_lr": result.final_lr,
            "checkpoints": [str(p) for p in result.checkpoints],
        },
    )


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    model = _load_model(args)
    records = _require_records(args.data)
    if args.trace is not None:
        with JsonlWriter(args.trace) as trace:
            report = evaluate(model, records, beam_width=args.beam, progress=_progress(args), trace=trace)
    else:
        report = evaluate(model, records, beam_width=args.beam, progress=_progress(args))
    payload = report.model_dump(mode="json")
    if args.report is not None:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(dumps(payload) + "\n", encoding="utf-8")
        payload = {"report": str(args.report), "precision": payload["precision"]}
    return CommandResult(True, payload)


def cmd_predict(args: argparse.Namespace) -> CommandResult:
    model = _load_model(args)
    records = _require_records(args.data)
    writer = JsonlWriter(args.out if args.out is not None else sys.stdout)
    with writer:
        for record in tqdm(records, desc="predict", disable=not _progress(args) or args.out is None):
            g = record.input_graph
            if args.greedy:
                ranked = [greedy_decode(model, g)]
            else:
                ranked = postprocess(beam_search(model, g, args.beam), remove_invalid=False, dedup=True)
            for c in ranked:
                writer.write(
                    {
                        "id": record.record_id,
                        "rank": c.rank,
                        "score": c.score,
                        "log_prob": c.log_prob,
                        "edits": [[t.u, t.v, t.new_bond.name] for t in c.edits],
                        "product": write_smiles(c.product),
                        "valid": c.valid,
                    }
                )
    if args.out is None:
        return CommandResult(True, None)
    return CommandResult(True, {"predictions": writer.count, "out": str(args.out)})


def cmd_pairscore(args: argparse.Namespace) -> CommandResult:
    model = _load_model(args)
    records = _require_records(args.data)
    with JsonlWriter(args.out) as writer:
        for record in tqdm(records, desc="pairscore", disable=not _progress(args)):
            writer.write(score_dump(model, record).to_json())
    return CommandResult(True, {"records": writer.count, "out": str(args.out)})


def cmd_gradcheck(args: argparse.Namespace) -> CommandResult:
    config = _config(args, base=gradcheck_config())
    if config.dtype != "float64":
        msg = "gradcheck needs dtype float64"
        raise ConfigError(msg)
    record = load_fixture(args.fixture)
    report = run_gradcheck(gradcheck_model(config), record, step=args.step, progress=_progress(args))
    value = {
        "max_rel_error": report.max_rel_error,
        "worst": list(report.worst) if report.worst else None,
        "checked": report.checked,
        "tolerance": args.tolerance,
    }
    print(f"max rel. error {report.max_rel_error:.3e} over {report.checked} entries", file=sys.stderr)
    if not report.passed(args.tolerance):
        error = f"gradient check failed: max rel. error {report.max_rel_error:.3e} >= {args.tolerance:g}"
        return CommandResult(False, value, error, EXIT_GRADCHECK)
    return CommandResult(True, value)


Handler = Callable[[argparse.Namespace], CommandResult]

# command name -> (handler, help)
_COMMANDS: dict[str, tuple[Handler, str]] = {
    "gen-data": (cmd_gen_data, "write a synthetic train/valid/test dataset"),
    "train": (cmd_train, "train a model"),
    "eval": (cmd_eval, "evaluate a checkpoint and write a metric report"),
    "predict": (cmd_predict, "decode ranked products as JSON lines"),
    "pairscore": (cmd_pairscore, "dump pair scores of the unedited inputs"),
    "gradcheck": (cmd_gradcheck, "check gradients against finite differences"),
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    noise.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    parser = argparse.ArgumentParser(prog="bondedit", description="Reaction product prediction by graph edits")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in _COMMANDS.items()}

    p = parsers["gen-data"]
    p.add_argument("--spec", type=Path, default=None, help="toy task spec (JSON)")
    p.add_argument("--out", type=Path, required=True)

    p = parsers["train"]
    p.add_argument("--data", type=Path, required=True, help="directory with train.jsonl/valid.jsonl, or one file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--desk", action="store_true", help="start from the small desk-scale configuration")

    for name in ("eval", "predict", "pairscore"):
        p = parsers[name]
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--checkpoint", type=Path, required=True)

    parsers["eval"].add_argument("--beam", type=int, default=None)
    parsers["eval"].add_argument("--report", type=Path, default=None)
    parsers["eval"].add_argument("--trace", type=Path, default=None, help="write per-step rollout traces as JSON lines")

    p = parsers["predict"]
    width = p.add_mutually_exclusive_group()
    width.add_argument("--beam", type=int, default=None)
    width.add_argument("--greedy", action="store_true")
    p.add_argument("--out", type=Path, default=None)

    parsers["pairscore"].add_argument("--out", type=Path, required=True)

    p = parsers["gradcheck"]
    p.add_argument("--fixture", type=Path, default=None)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    return parser


def run(argv: list[str] | None = None) -> CommandResult:
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose, quiet=args.quiet)
    handler, _ = _COMMANDS[args.command]
    try:
        return handler(args)
    except BondEditError as exc:
        return CommandResult(False, None, str(exc), exit_code_for(exc))


def main(argv: list[str] | None = None) -> int:
    result = run(argv)
    if not result.success:
        print(f"error: {result.error}", file=sys.stderr)
    if result.value is not None or not result.success:
        print(dumps(result.to_dict()))
    return result.exit_code if not result.success else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
