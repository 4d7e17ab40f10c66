"""Command-line entry point: run the pipeline, evaluate predictions, simulate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from trackprune import evaluation, pipeline, simulate
from trackprune.evaluation import DatasetError
from trackprune.model import PipelineConfig
from trackprune.perception import HttpPerceptionClient, SimPerception
from trackprune.reasoning import HttpReasonerClient, load_templates
from trackprune.simulate import WorldOracle

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATASET = 2
EXIT_BACKEND = 3

_CONFIG_KEYS = (
    "num_frames",
    "max_extract_iters",
    "max_prune_iters",
    "temperature",
    "max_output_tokens",
    "seed",
)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Usage problems are configuration errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    if p.suffix == ".json":
        return json.loads(p.read_text())
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(p.read_text())
    raise CliError(f"config file must be .json or .toml: {p}")


def _merged_config(args, file_cfg: dict) -> PipelineConfig:
    """Precedence: CLI flag > config file > dataclass default."""
    values = {}
    for key in _CONFIG_KEYS:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            values[key] = cli_value
        elif key in file_cfg:
            values[key] = file_cfg[key]
    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def _require(args, names: list[str]) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise CliError(f"missing required arguments: {', '.join(missing)}")


def _build_backends(args, config: PipelineConfig):
    if args.backend == "sim":
        meta_dir = Path(args.meta).parent
        world_path = Path(args.sim_world) if args.sim_world else meta_dir / "sim_world.json"
        rules_path = Path(args.oracle_rules) if args.oracle_rules else meta_dir / "oracle_rules.json"
        if not world_path.exists() or not rules_path.exists():
            raise CliError(
                f"sim backend needs {world_path.name} and {rules_path.name} next to the meta file "
                "(or --sim-world/--oracle-rules)"
            )
        worlds = simulate.load_worlds(world_path)
        rules = simulate.load_rules(rules_path)
        return SimPerception(worlds), WorldOracle(worlds, rules)
    _require(args, ["perception_url", "reasoner_url"])
    perception = HttpPerceptionClient(args.perception_url, frame_encoding=args.frame_encoding)
    reasoner = HttpReasonerClient(args.reasoner_url, model=args.reasoner_model)
    return perception, reasoner


def cmd_run(args) -> int:
    _require(args, ["meta", "frames_root", "out"])
    config = _merged_config(args, _load_config_file(args.config))
    templates = load_templates(args.templates_dir)
    perception, reasoner = _build_backends(args, config)
    try:
        # the run itself needs no ground truth; --annotations opts in to id checks
        dataset = evaluation.load_dataset(args.meta, args.annotations, args.frames_root)
    except DatasetError as exc:
        raise CliError(str(exc), code=EXIT_DATASET) from exc
    log = print if args.verbose else (lambda msg: None)
    results = pipeline.run_benchmark(
        dataset,
        perception,
        reasoner,
        templates,
        config,
        args.out,
        parallel=args.parallel,
        log=log,
    )
    if pipeline.all_failed_unreachable(results):
        print("error: backend unreachable for every expression", file=sys.stderr)
        return EXIT_BACKEND
    empties = sum(r.is_empty for r in results)
    errors = sum(r.error is not None for r in results)
    print(
        f"ran {len(results)} expressions: {empties} empty predictions, {errors} errors; "
        f"outputs under {args.out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, ["meta", "frames_root", "pred"])
    config = _merged_config(args, _load_config_file(args.config))
    try:
        dataset = evaluation.load_dataset(
            args.meta, args.annotations or Path(args.meta).parent / "annotations", args.frames_root
        )
        results, meta = pipeline.evaluate_predictions(dataset, args.pred, config)
    except (DatasetError, FileNotFoundError) as exc:
        raise CliError(str(exc), code=EXIT_DATASET) from exc
    report = evaluation.aggregate(results, meta)
    out_dir = args.out or args.pred
    evaluation.write_report(report, out_dir)
    print(report.summary_line())
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require(args, ["out"])
    if args.videos < 1:
        raise CliError("--videos must be >= 1")
    worlds, rules, meta = simulate.generate_benchmark(seed=args.seed, num_videos=args.videos)
    simulate.write_benchmark(args.out, worlds, rules, meta)
    num_expressions = sum(len(v["expressions"]) for v in meta["videos"].values())
    print(
        f"wrote {len(worlds)} videos / {num_expressions} expressions to {args.out} "
        f"(seed {args.seed})"
    )
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="trackprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the full pipeline over a dataset")
    run.add_argument("--meta", help="dataset meta JSON")
    run.add_argument("--frames-root", dest="frames_root", help="root directory of frame images")
    run.add_argument("--annotations", help="annotations root (default: <meta dir>/annotations)")
    run.add_argument("--out", help="output directory for predictions and traces")
    run.add_argument("--backend", choices=("http", "sim"), default="sim")
    run.add_argument("--perception-url", dest="perception_url")
    run.add_argument("--reasoner-url", dest="reasoner_url")
    run.add_argument("--reasoner-model", dest="reasoner_model", default="default")
    run.add_argument("--frame-encoding", dest="frame_encoding", choices=("path", "b64"), default="path")
    run.add_argument("--sim-world", dest="sim_world")
    run.add_argument("--oracle-rules", dest="oracle_rules")
    run.add_argument("--templates-dir", dest="templates_dir")
    run.add_argument("--config", help="TOML/JSON config file (flags win over file values)")
    run.add_argument("--num-frames", dest="num_frames", type=int)
    run.add_argument("--max-extract-iters", dest="max_extract_iters", type=int)
    run.add_argument("--max-prune-iters", dest="max_prune_iters", type=int)
    run.add_argument("--temperature", type=float)
    run.add_argument("--max-output-tokens", dest="max_output_tokens", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--parallel", type=int, default=1)
    run.add_argument("--verbose", action="store_true")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--meta")
    ev.add_argument("--frames-root", dest="frames_root")
    ev.add_argument("--annotations")
    ev.add_argument("--pred", help="predictions root (the run command's <out>/predictions)")
    ev.add_argument("--out", help="report directory (default: the predictions root)")
    ev.add_argument("--config")
    for key in _CONFIG_KEYS:
        if key not in ("seed",):
            ev.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float if key == "temperature" else int)
    ev.set_defaults(func=cmd_eval, seed=None)

    sim = sub.add_parser("simulate", help="generate a synthetic benchmark")
    sim.add_argument("--out")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--videos", type=int, default=5)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())
