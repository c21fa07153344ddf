"""Command-line front end.

    flsim gen-data --config exp.json
    flsim run      --config exp.json [--seed N] [--out DIR] [--timing]
    flsim compare  --config exp.json --aggregators a,b,c [--out DIR] [--timing]

The experiment file is a flat JSON object holding dataset-generation keys, training
keys and two paths (``data_dir``, ``out_dir``, relative to the file's directory).
Exit codes: 0 success, 2 configuration or user error, 3 target error not reached,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from flsim import checkpoint, data, plot
from flsim.data import TaskConfig
from flsim.errors import ConfigurationError, FLSimError, NumericalError
from flsim.orchestrator import Aggregator, FLConfig, RoundRecord, TrainingResult, run_training

log = logging.getLogger("flsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNREACHED = 3
EXIT_NUMERICAL = 4

CSV_HEADER = "round,aggregator,eval_loss,eval_error,weight_entropy,reward,wall_seconds"
COMPARE_HEADER = "aggregator,rounds_to_target,final_error,speedup"

REQUIRED_KEYS = ("classes",)
_TASK_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TaskConfig) if f.name != "seed"}
_RUN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(FLConfig)
                 if f.name not in ("pool_size", "seed")}
_OTHER_DEFAULTS = {"seed": 0, "data_dir": "data", "out_dir": "out"}
KNOWN_KEYS = {**_TASK_DEFAULTS, **_RUN_DEFAULTS, **_OTHER_DEFAULTS}


@dataclass(frozen=True)
class Experiment:
    task: TaskConfig
    training: FLConfig
    data_dir: Path
    out_dir: Path


def _check_type(key, value, default):
    if default is None:
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
        want = "an integer or null"
    elif isinstance(default, bool):
        ok, want = isinstance(value, bool), "true or false"
    elif isinstance(default, enum.Enum):
        ok, want = isinstance(value, str), "a string"
    elif isinstance(default, int):
        ok, want = isinstance(value, int) and not isinstance(value, bool), "an integer"
    elif isinstance(default, float):
        ok, want = isinstance(value, (int, float)) and not isinstance(value, bool), "a number"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value)
        want = "a list of integers"
    else:
        ok, want = isinstance(value, str), "a string"
    if not ok:
        raise ConfigurationError(f"config key '{key}' must be {want}, got {value!r}")


def parse_experiment(raw: dict, base_dir: Path = Path(".")) -> Experiment:
    if not isinstance(raw, dict):
        raise ConfigurationError("experiment file must hold a JSON object")
    unknown = sorted(set(raw) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigurationError(f"missing required config key '{key}'")
    defaulted = sorted(set(KNOWN_KEYS) - set(raw))
    if defaulted:
        log.info("using defaults for: %s", ", ".join(defaulted))
    for key, value in raw.items():
        _check_type(key, value, KNOWN_KEYS[key])

    seed = raw.get("seed", 0)
    if seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {seed}")
    task_kw = {k: raw[k] for k in _TASK_DEFAULTS if k in raw}
    run_kw = {k: raw[k] for k in _RUN_DEFAULTS if k in raw}
    if "hidden" in run_kw:
        run_kw["hidden"] = tuple(run_kw["hidden"])
    try:
        task = TaskConfig(seed=seed, **task_kw)
        training = FLConfig(pool_size=task.n_clients, seed=seed, **run_kw)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    return Experiment(task, training,
                      base_dir / raw.get("data_dir", _OTHER_DEFAULTS["data_dir"]),
                      base_dir / raw.get("out_dir", _OTHER_DEFAULTS["out_dir"]))


def load_experiment(path: str | Path) -> Experiment:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return parse_experiment(raw, path.parent)


def _num(value) -> str:
    # repr gives the shortest round-trip form and ignores the locale
    return "" if value is None else repr(float(value))


def metrics_rows(records: list[RoundRecord], timing: bool = False) -> list[str]:
    rows = [CSV_HEADER]
    for r in records:
        rows.append(",".join([
            str(r.round), r.aggregator, _num(r.eval_loss), _num(r.eval_error),
            _num(r.weight_entropy), _num(r.reward),
            f"{r.wall_seconds:.6f}" if timing else "",
        ]))
    return rows


def write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_task(exp: Experiment):
    try:
        return data.load_task(exp.data_dir)
    except FileNotFoundError as exc:
        raise ConfigurationError(
            f"dataset file missing: {exc.filename} (run 'flsim gen-data' first)") from None


def _status(result: TrainingResult) -> int:
    if result.error is not None:
        return EXIT_NUMERICAL
    return EXIT_OK if result.rounds_to_target is not None else EXIT_UNREACHED


def _final_error(result: TrainingResult) -> float | None:
    return result.records[-1].eval_error if result.records else None


def cmd_gen_data(args) -> int:
    exp = load_experiment(args.config)
    task = data.build_task(exp.task)
    data.save_task(task, exp.data_dir)
    rehearsal = len(task.rehearsal) if task.rehearsal is not None else 0
    print(f"n={len(task.train)} d={task.train.dim} C={task.train.n_classes} "
          f"partition={task.shards.kind.value} clients={task.shards.n_clients} "
          f"corrupted={len(task.corrupted_clients)} eval={len(task.eval_set)} "
          f"rehearsal={rehearsal} dir={exp.data_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    exp = load_experiment(args.config)
    config = exp.training
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = Path(args.out) if args.out else exp.out_dir
    task = _load_task(exp)
    result = run_training(config, task)
    out.mkdir(parents=True, exist_ok=True)
    write_lines(out / "metrics.csv", metrics_rows(result.records, args.timing))
    spec = config.model_spec(task.train.dim, task.train.n_classes)
    checkpoint.save_params(out / "model.flck", spec, result.params, checkpoint.MODEL_MAGIC)
    if result.agent is not None:
        checkpoint.save_params(out / "policy.flrl", result.agent.net.spec,
                               result.agent.net.params, checkpoint.POLICY_MAGIC)
    final = _final_error(result)
    print(f"aggregator={config.aggregator.value} rounds={len(result.records)} "
          f"rounds_to_target={result.rounds_to_target if result.rounds_to_target else '-'} "
          f"final_error={_num(final) or '-'} out={out}")
    if result.error is not None:
        print(f"flsim: training stopped: {result.error}", file=sys.stderr)
    return _status(result)


def parse_aggregators(text: str) -> list[Aggregator]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ConfigurationError("--aggregators needs at least one name")
    try:
        return [Aggregator(n) for n in names]
    except ValueError:
        valid = ", ".join(a.value for a in Aggregator)
        raise ConfigurationError(f"unknown aggregator in {text!r}; choose from {valid}") from None


def comparison_rows(aggregators: list[Aggregator], results: list[TrainingResult]) -> list[str]:
    baseline = results[0].rounds_to_target
    rows = [COMPARE_HEADER]
    for agg, res in zip(aggregators, results):
        rtt = res.rounds_to_target
        speedup = _num(baseline / rtt) if baseline and rtt else ""
        rows.append(",".join([agg.value, "" if rtt is None else str(rtt),
                              _num(_final_error(res)), speedup]))
    return rows


def cmd_compare(args) -> int:
    exp = load_experiment(args.config)
    aggregators = parse_aggregators(args.aggregators)
    out = Path(args.out) if args.out else exp.out_dir
    task = _load_task(exp)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, agg in enumerate(aggregators):
        res = run_training(dataclasses.replace(exp.training, aggregator=agg), task)
        write_lines(out / f"metrics_{i}_{agg.value}.csv", metrics_rows(res.records, args.timing))
        results.append(res)
    rows = comparison_rows(aggregators, results)
    write_lines(out / "comparison.csv", rows)
    series = [(agg.value, [r.round for r in res.records], [r.eval_error for r in res.records])
              for agg, res in zip(aggregators, results)]
    (out / "convergence.svg").write_text(
        plot.line_chart(series, "Validation error by round", "round", "eval error"),
        encoding="utf-8", newline="\n")
    print("\n".join(rows))
    codes = [_status(r) for r in results]
    if EXIT_NUMERICAL in codes:
        return EXIT_NUMERICAL
    return EXIT_UNREACHED if EXIT_UNREACHED in codes else EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flsim", description="Federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="generate the dataset and shard files")
    gen.add_argument("--config", required=True)
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser("run", help="train one aggregator and write metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="override the training seed")
    run.add_argument("--out", help="output directory (default: out_dir from the config)")
    run.add_argument("--timing", action="store_true", help="fill the wall_seconds column")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="train several aggregators on the same data")
    cmp.add_argument("--config", required=True)
    cmp.add_argument("--aggregators", required=True, help="comma-separated, baseline first")
    cmp.add_argument("--out")
    cmp.add_argument("--timing", action="store_true")
    cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("flsim: error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"flsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FLSimError, ValueError, OSError) as exc:
        print(f"flsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
