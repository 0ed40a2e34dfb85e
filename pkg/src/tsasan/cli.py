"""Command-line entry point (``tsasan``).

Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import filecmp
import json
import sys
import tempfile
import time
from pathlib import Path

from . import cstr
from .datasets import (TASK_IDS, RunRegistry, TaskConfig, build_task, load_dataset, save_dataset,
                       simulate_registry, task_config)
from .errors import ConfigurationError, DatasetError, TsaSanError
from .network import ArchConfig, ModelCheckpoint
from .samplegen import GenConfig, expand_training_set, fit_all_stats, load_stats, save_stats, to_latent
from .trainer import (ABLATIONS, DataConfig, TrainConfig, ablation, compare_reports, evaluate,
                      init_model, rows_to_csv, run_experiment, train)

PROFILES = {
    "desk": {"trainer": {"epochs": 10}, "data": {"runs_per_class": 2}},
    "paper": {"trainer": {"epochs": 30}, "data": {"runs_per_class": 5}},
}


def default_config() -> dict:
    t = TrainConfig()
    return {
        "seed": 0,
        "trainer": {"batch_size": t.batch_size, "base_lr": t.base_lr, "lr_decay": t.lr_decay,
                    "decay_every": t.decay_every, "epochs": t.epochs},
        "data": {"runs_per_class": 2, "stride": 4, "jobs": 1},
        "generation": {"iss_ratio": 0.5, "alpha": 2.0},
        "plant": {},
    }


def _merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"--set expects path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"--set {path}: {k!r} is not a section")
    node[keys[-1]] = _parse_value(raw)


def effective_config(args) -> dict:
    cfg = default_config()
    _merge(cfg, PROFILES[args.profile])
    if args.config:
        try:
            _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    for a in args.set or []:
        apply_override(cfg, a)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "jobs", None):
        cfg["data"]["jobs"] = args.jobs
    return cfg


def _plant(cfg) -> cstr.CstrParams:
    params = cstr.CstrParams.from_dict({**cstr.CstrParams().to_dict(), **cfg["plant"]})
    params.validate()
    return params


def _train_cfg(cfg, ab_name: str) -> TrainConfig:
    try:
        return TrainConfig(**cfg["trainer"], seed=int(cfg["seed"]), ablation=ablation(ab_name))
    except TypeError as exc:
        raise ConfigurationError(f"bad trainer config: {exc}") from exc


def _gen_cfg(cfg, ab_name: str) -> GenConfig:
    ab = ablation(ab_name)
    return GenConfig(dasg=ab.dasg, iss=ab.iss, iss_ratio=float(cfg["generation"]["iss_ratio"]),
                     alpha=float(cfg["generation"]["alpha"]), seed=int(cfg["seed"]))


def _data_cfg(cfg) -> DataConfig:
    try:
        return DataConfig(**cfg["data"])
    except TypeError as exc:
        raise ConfigurationError(f"bad data config: {exc}") from exc


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigurationError(f"{args.command} needs --out")
    return Path(args.out)


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _load_registry(runs_dir, task, cfg):
    if runs_dir is None:
        return simulate_registry(task, _plant(cfg), cfg["data"]["runs_per_class"], cfg["seed"],
                                 cfg["data"]["jobs"])
    reg = RunRegistry.load(runs_dir)
    gaps = reg.gaps(task)
    if gaps:
        listing = ", ".join(f"{d}/{c}/{s}" for d, c, s in gaps)
        raise DatasetError(
            f"{runs_dir} lacks runs for {listing}; create them with "
            f"`tsasan simulate --task {task.task_id} --seed {cfg['seed']} --out {runs_dir}`")
    return reg


# -- commands ------------------------------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    out = _require_out(args)
    params = _plant(cfg)
    seed = int(cfg["seed"])
    if args.task:
        reg = simulate_registry(task_config(args.task), params, cfg["data"]["runs_per_class"], seed,
                                cfg["data"]["jobs"])
        reg.save(out)
        n = sum(len(v) for v in reg.runs.values())
        print(f"wrote {n} runs for {args.task} under {out}")
        return 0
    modes = cstr.MODE_IDS if args.mode == "all" else [args.mode]
    faults = cstr.FAULT_IDS if args.fault == "all" else [args.fault]
    for m in modes:
        cstr.mode_spec(m, params)
    for f in faults:
        cstr.fault_spec(f)
    specs = [(m, f, seed) for m in modes for f in faults]
    for run in cstr.simulate_many(params, specs, cfg["data"]["jobs"]):
        path, _ = cstr.export_run(run, out / cstr.run_filename(run.mode_id, run.fault_id, run.seed))
        print(f"wrote {path} ({run.n_samples} samples)")
    return 0


def cmd_build(args, cfg) -> int:
    out = _require_out(args)
    task = task_config(args.task)
    reg = _load_registry(args.runs, task, cfg)
    train_set, test_set, manifest = build_task(task, reg, cfg["data"]["stride"], cfg["seed"])
    save_dataset(out, train_set, test_set, manifest)
    _dump(out / "task.json", task.to_dict())
    print(f"{task.task_id}: {len(train_set)} training and {len(test_set)} test windows -> {out}")
    return 0


def _task_of(dataset_dir: Path, task_id):
    if task_id:
        return task_config(task_id)
    try:
        return TaskConfig.from_dict(json.loads((dataset_dir / "task.json").read_text()))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{dataset_dir} has no task.json; pass --task") from exc


def cmd_generate(args, cfg) -> int:
    out = _require_out(args)
    src = Path(args.dataset)
    train_set, test_set, manifest = load_dataset(src)
    task = _task_of(src, args.task)
    gen = _gen_cfg(cfg, args.ablation)
    expanded, stats = expand_training_set(train_set, task, gen)
    manifest.record("generated", expanded)
    save_dataset(out, expanded, test_set, manifest)
    save_stats(stats, out / "domain_stats.json", gen.alignment)
    _dump(out / "task.json", task.to_dict())
    n_gen = int((expanded.sources != "real").sum())
    print(f"generated {n_gen} windows ({gen.alignment} alignment) -> {out}")
    return 0


def cmd_train(args, cfg) -> int:
    out = _require_out(args)
    src = Path(args.dataset)
    train_set, _, _ = load_dataset(src)
    task = _task_of(src, args.task)
    tcfg = _train_cfg(cfg, args.ablation)
    stats_path = src / "domain_stats.json"
    if stats_path.exists():
        stats = load_stats(stats_path)
    else:
        stats = fit_all_stats(train_set, task.modes, _gen_cfg(cfg, args.ablation).alignment)
    latent = to_latent(train_set, stats)
    arch = ArchConfig(v=latent.n_vars, T=latent.features.shape[2], sain=tcfg.ablation.sain,
                      tsam=tcfg.ablation.tsam)
    model = init_model(arch, tcfg.seed)
    result = train(model, latent, tcfg, log=print)
    result.checkpoint.manifest = {"task_id": task.task_id, "seed": tcfg.seed, "epochs": tcfg.epochs,
                                  "final_loss": result.loss_curve[-1] if result.loss_curve else None}
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / "checkpoint.json")
    save_stats(stats, out / "domain_stats.json")
    (out / "loss_curve.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.loss_curve)))
    print(f"checkpoint -> {out / 'checkpoint.json'}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    out = _require_out(args)
    ckpt_path = Path(args.checkpoint)
    model = ModelCheckpoint.load(ckpt_path).to_model()
    _, test_set, manifest = load_dataset(args.dataset)
    stats_path = Path(args.stats) if args.stats else ckpt_path.parent / "domain_stats.json"
    if not stats_path.exists():
        raise DatasetError(f"no domain statistics at {stats_path}; pass --stats")
    report = evaluate(model, to_latent(test_set, load_stats(stats_path)))
    _dump(out / "metrics.json", {"task_id": manifest.task_id, **report.to_dict()})
    _print_report(report)
    return 0


def cmd_experiment(args, cfg) -> int:
    out = _require_out(args)
    task = task_config(args.task)
    names = ["full"] if args.ablation is None else [args.ablation]
    data_cfg = _data_cfg(cfg)
    data = None
    if args.runs:
        data = build_task(task, _load_registry(args.runs, task, cfg), data_cfg.stride, cfg["seed"])
    for name in names:
        t0 = time.time()
        res = run_experiment(task, _train_cfg(cfg, name), _gen_cfg(cfg, name), out, data_cfg,
                             _plant(cfg), data=data, label=name, log=print if args.verbose else None,
                             run_spec={"command": "experiment", "task": task.task_id,
                                       "ablation": name, "config": cfg})
        print(f"{task.task_id} {name}: ACC = {res.report.acc:.4f}  ({time.time() - t0:.1f} s)")
        _print_report(res.report)
    return 0


def cmd_report(args, cfg) -> int:
    reports = []
    for p in args.inputs:
        p = Path(p)
        if p.is_dir():
            p = p / "metrics.json"
        try:
            reports.append(json.loads(p.read_text()))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read metrics {p}: {exc}") from exc
    text = rows_to_csv(compare_reports(reports))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")
    return 0


def cmd_selfcheck(args, cfg) -> int:
    from .selfcheck import run_selfcheck

    ok = run_selfcheck(print)
    return 0 if ok else 3


def _print_report(report) -> None:
    print(report.table())


COMMANDS = {
    "simulate": cmd_simulate, "build": cmd_build, "generate": cmd_generate, "train": cmd_train,
    "evaluate": cmd_evaluate, "experiment": cmd_experiment, "report": cmd_report,
    "selfcheck": cmd_selfcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override a config entry, e.g. trainer.epochs=5")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--check", action="store_true",
                        help="re-run into a scratch directory and byte-compare with --out")
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tsasan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate plant runs")
    p.add_argument("--mode", default="M1", help="M1, M2, M3 or all")
    p.add_argument("--fault", default="H", help="H, F1..F9 or all")
    p.add_argument("--task", help="simulate every train/test run a task needs")

    p = sub.add_parser("build", parents=[common], help="window runs into a task dataset")
    p.add_argument("--task", required=True)
    p.add_argument("--runs", help="run directory (train/ and test/); simulated if omitted")

    for name, helptext in (("generate", "add DASG/ISS windows"), ("train", "train a model")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset", required=True)
        p.add_argument("--task")
        p.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stats", help="domain_stats.json (defaults to the checkpoint's directory)")

    p = sub.add_parser("experiment", parents=[common], help="end-to-end pipeline")
    p.add_argument("--task", required=True, help=", ".join(TASK_IDS))
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--runs", help="use existing runs instead of simulating")

    p = sub.add_parser("report", parents=[common], help="compare experiment metrics")
    p.add_argument("--inputs", nargs="+", required=True)

    sub.add_parser("selfcheck", parents=[common], help="gradient and invariant checks")
    return parser


def _compare_trees(fresh: Path, existing: Path) -> list:
    problems = []
    if fresh.is_file():
        pairs = [(fresh, existing)]
    else:
        pairs = [(f, existing / f.relative_to(fresh)) for f in sorted(fresh.rglob("*")) if f.is_file()]
    for new, old in pairs:
        if not old.exists():
            problems.append(f"missing {old}")
        elif not filecmp.cmp(new, old, shallow=False):
            problems.append(f"differs {old}")
    return problems


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args)
        handler = COMMANDS[args.command]
        if not args.check:
            return handler(args, cfg)
        existing = _require_out(args)
        if not existing.exists():
            raise DatasetError(f"--check needs existing output at {existing}")
        with tempfile.TemporaryDirectory() as tmp:
            fresh = Path(tmp) / existing.name
            args.out = str(fresh)
            code = handler(args, cfg)
            if code:
                return code
            problems = _compare_trees(fresh, existing)
        for p in problems:
            print(p, file=sys.stderr)
        print("check: identical" if not problems else f"check: {len(problems)} artifact(s) differ")
        return 0 if not problems else 3
    except TsaSanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
