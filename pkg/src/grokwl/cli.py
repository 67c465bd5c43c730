"""Command-line front end.

    grokwl train-adamw --preset table1-add --out runs/add
    grokwl train-wand --preset wand-add --seed 1
    grokwl wlmd --preset wlmd-desk --resume runs/desk/campaign.ck
    grokwl oracle --n 2
    grokwl dataset-viz --task cubic

Configuration is layered: defaults, then ``--preset``, then ``--config``
(JSON), then individual flags.  The effective configuration is written to
``config.json`` in the output directory before anything runs, and that
file can be passed back with ``--config``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import optim, persistence, plotting, wlmd
from . import transformer as tf
from .modular_tasks import TaskKind, TaskSpec, make_split, visualize_dataset, write_matrix_csv
from .presets import get_preset, preset_names

log = logging.getLogger("grokwl")

EXIT_OK = 0
EXIT_USAGE = 2          # argparse uses 2 as well
EXIT_CONFIG = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

OUT_ENV = "GROKWL_OUT"
COMMANDS = ("train-adamw", "train-wand", "wlmd", "dataset-viz", "oracle")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    task: dict = field(default_factory=lambda: {"kind": "add", "p": 67})
    model: dict = field(default_factory=lambda: {"d_model": 128, "n_heads": 4, "d_mlp": 512})
    seeds: dict = field(default_factory=lambda: {"init": 0, "split": 0, "run": 0})
    optimizer: dict = field(default_factory=dict)    # AdamWConfig / WandConfig fields
    sampler: dict = field(default_factory=dict)      # CampaignConfig fields
    oracle: dict = field(default_factory=lambda: {"n": 2})
    subset: str = "full"
    checkpoint_every: int = 1000
    keep_checkpoints: bool = False
    plots: bool = True
    out: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    # -- builders ---------------------------------------------------------

    def task_spec(self) -> TaskSpec:
        return TaskSpec(TaskKind.parse(self.task.get("kind", "add")), int(self.task.get("p", 67)))

    def model_config(self) -> tf.ModelConfig:
        m = self.model
        return tf.ModelConfig.with_width(self.task_spec().p, int(m.get("d_model", 128)),
                                         int(m.get("d_mlp", 512)), int(m.get("n_heads", 4)))

    def adamw_config(self) -> optim.AdamWConfig:
        return _build(optim.AdamWConfig, self.optimizer, "optimizer")

    def wand_config(self) -> optim.WandConfig:
        opts = dict(self.optimizer)
        opts.setdefault("seed", int(self.seeds.get("run", 0)))
        return _build(optim.WandConfig, opts, "optimizer")

    def campaign_config(self) -> wlmd.CampaignConfig:
        s = dict(self.sampler)
        base = int(self.seeds.get("run", 0))
        if self.command == "oracle":
            o = dict(self.oracle)
            n = int(o.pop("n", 2))
            if o:
                raise ConfigError(f"unknown oracle fields: {sorted(o)}")
            walkers = int(s.get("walkers", wlmd.oracle_config(max(n, 1)).walkers))
            s.setdefault("seeds", list(range(base, base + walkers)))
            try:
                return wlmd.oracle_config(n, **s)
            except TypeError as exc:
                raise ConfigError(str(exc)) from None
        walkers = int(s.get("walkers", 8))
        s.setdefault("seeds", list(range(base, base + walkers)))
        task = self.task_spec()
        s.update(system="transformer", task=task.kind.value, p=task.p,
                 d_model=int(self.model.get("d_model", 32)), n_heads=int(self.model.get("n_heads", 4)),
                 d_mlp=int(self.model.get("d_mlp", 128)), split_seed=int(self.seeds.get("split", 0)),
                 init_seed=int(self.seeds.get("init", 0)))
        return _build(wlmd.CampaignConfig, s, "sampler")


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _config_from_dict(d: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if d.get("command") not in COMMANDS:
        raise ConfigError(f"unknown command {d.get('command')!r}")
    return ExperimentConfig(**d)


# -- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (overrides the preset)")
    p.add_argument("--preset", help="named recipe")
    p.add_argument("--seed", type=int, help="run seed (init seed for training, walker seed base for sampling)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>-<time>)")
    p.add_argument("--no-plots", action="store_true", help="skip figure output")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=[k.value for k in TaskKind])
    p.add_argument("--p", type=int, help="prime modulus")
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-mlp", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--init-seed", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, help="learning rate (the Langevin time step for WanD)")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--keep-checkpoints", action="store_true", help="keep every checkpoint, not just the latest")
    p.add_argument("--resume", help="checkpoint to continue from")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grokwl", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-adamw", help="full-batch AdamW training")
    _common(p); _model_flags(p); _train_flags(p)
    p.add_argument("--wd", type=float, help="weight decay")
    p.add_argument("--fixed-norm", type=float, help="rescale weights to this norm after every step")

    p = sub.add_parser("train-wand", help="Wang-Landau dynamics optimizer")
    _common(p); _model_flags(p); _train_flags(p)
    p.add_argument("--friction", type=float)
    p.add_argument("--kT", type=float)
    p.add_argument("--bias-raw", action="store_true", help="apply the bias to raw loss instead of ln loss")

    p = sub.add_parser("wlmd", help="entropy-landscape sampling campaign")
    _common(p); _model_flags(p)
    p.add_argument("--walkers", type=int)
    p.add_argument("--epochs", type=int, help="epochs per walker")
    p.add_argument("--round-size", type=int)
    p.add_argument("--constraint", choices=[c.value for c in wlmd.Constraint])
    p.add_argument("--resume", help="campaign checkpoint to continue from")

    p = sub.add_parser("oracle", help="sampler check on a quadratic potential")
    _common(p)
    p.add_argument("--n", type=int, help="dimension")
    p.add_argument("--walkers", type=int)
    p.add_argument("--epochs", type=int, help="epochs per walker")

    p = sub.add_parser("dataset-viz", help="answer-table CSV and image")
    _common(p)
    p.add_argument("--task", choices=[k.value for k in TaskKind])
    p.add_argument("--p", type=int)
    p.add_argument("--subset", choices=["full", "train", "test"])
    p.add_argument("--split-seed", type=int)
    return ap


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then preset, then config file, then flags."""
    d = asdict(ExperimentConfig(args.command))
    if args.preset:
        try:
            preset = get_preset(args.preset)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        if preset["command"] != args.command:
            raise ConfigError(f"preset {args.preset!r} is for {preset['command']}; "
                              f"{args.command} presets: {', '.join(preset_names(args.command)) or 'none'}")
        d = _merge(d, preset)
    if args.config:
        try:
            d = _merge(d, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        if d.get("command") != args.command:
            raise ConfigError(f"config file is for {d.get('command')!r}, not {args.command}")
    flags = vars(args)

    def put(section, key, flag):
        v = flags.get(flag)
        if v is not None:
            d[section][key] = v

    put("task", "kind", "task"); put("task", "p", "p")
    put("model", "d_model", "d_model"); put("model", "d_mlp", "d_mlp"); put("model", "n_heads", "n_heads")
    put("seeds", "split", "split_seed"); put("seeds", "init", "init_seed")
    if flags.get("seed") is not None:
        d["seeds"]["run"] = args.seed
        if args.command == "train-adamw":
            d["seeds"]["init"] = args.seed
    put("optimizer", "learning_rate", "lr"); put("optimizer", "steps", "steps")
    put("optimizer", "weight_decay", "wd"); put("optimizer", "fixed_norm", "fixed_norm")
    put("optimizer", "friction", "friction"); put("optimizer", "kT", "kT")
    if flags.get("bias_raw"):
        d["optimizer"]["bias_on_log"] = False
    put("sampler", "walkers", "walkers"); put("sampler", "epochs", "epochs")
    put("sampler", "round_size", "round_size"); put("sampler", "constraint", "constraint")
    put("oracle", "n", "n")
    if flags.get("subset") is not None:
        d["subset"] = args.subset
    if flags.get("checkpoint_every") is not None:
        d["checkpoint_every"] = args.checkpoint_every
    if flags.get("keep_checkpoints"):
        d["keep_checkpoints"] = True
    if flags.get("no_plots"):
        d["plots"] = False
    if args.out:
        d["out"] = args.out
    if not d.get("out"):
        root = Path(os.environ.get(OUT_ENV, "runs"))
        d["out"] = str(root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}")
    cfg = _config_from_dict(d)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        if cfg.command in ("train-adamw", "train-wand", "dataset-viz", "wlmd"):
            cfg.task_spec()
        if cfg.command in ("train-adamw", "train-wand"):
            cfg.model_config()
            if cfg.command == "train-adamw":
                cfg.adamw_config()
            else:
                cfg.wand_config()
        elif cfg.command in ("wlmd", "oracle"):
            cfg.campaign_config()
        if cfg.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


# -- commands -----------------------------------------------------------------

def _records_array(records) -> np.ndarray:
    return np.array([[r.step, r.train_loss, r.test_loss, r.train_acc, r.test_acc, r.weight_norm]
                     for r in records], dtype=np.float64).reshape(-1, 6)


def _records_from_array(a: np.ndarray) -> list:
    return [optim.TrainRecord(int(r[0]), *map(float, r[1:])) for r in a]


def _summary(records) -> dict:
    last = records[-1]
    return {
        "steps": last.step,
        "train_acc_0.99_step": optim.first_step(records, "train_acc", 0.99),
        "test_acc_0.95_step": optim.first_step(records, "test_acc", 0.95),
        "grokking_gap": optim.grokking_gap(records),
        "final": asdict(last),
    }


def _train(cfg: ExperimentConfig, out: Path, resume: Optional[str]) -> int:
    wand = cfg.command == "train-wand"
    split = make_split(cfg.task_spec(), int(cfg.seeds.get("split", 0)))
    model = cfg.model_config()
    ocfg = cfg.wand_config() if wand else cfg.adamw_config()
    history: list = []
    state = None
    if resume:
        if wand:
            state, meta = persistence.load_wand(resume)
            state.config = ocfg
        else:
            state, _, meta = persistence.load_adam(resume)
        history = _records_from_array(persistence.read_checkpoint(
            Path(resume).with_suffix(".records"), "records")[1]["records"])
        if state.params.config != model:
            raise ConfigError("checkpoint model does not match the configuration")
        log.info("resuming from step %d", meta["step"])
    live: dict = {}

    def stop(records):
        live["records"] = records
        return False

    def on_step(t, st):
        if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
            name = f"checkpoint_{t:07d}" if cfg.keep_checkpoints else "checkpoint"
            path = out / f"{name}.ck"
            rows = history + live.get("records", [])
            if wand:
                persistence.save_wand(path, st, seed=int(cfg.seeds.get("init", 0)))
            else:
                persistence.save_adam(path, st, ocfg, seed=int(cfg.seeds.get("init", 0)))
            # records 0 .. t-1 travel next to the state for step t
            persistence.write_checkpoint(path.with_suffix(".records"), "records", {"step": t},
                                         {"records": _records_array(rows[:t])})
            if t % (cfg.checkpoint_every * 10) == 0 or t == cfg.checkpoint_every:
                log.info("step %d  train %.3f  test %.3f", t, rows[-1].train_acc, rows[-1].test_acc)

    train = optim.train_wand if wand else optim.train_adamw
    init_seed = int(cfg.seeds.get("init", 0))
    try:
        records = train(split, model, ocfg, init_seed, state=state, on_step=on_step, stop=stop)
    except optim.DivergenceError as exc:
        optim.write_records_csv(out / "records.csv", history + exc.records)
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    records = history + records
    optim.write_records_csv(out / "records.csv", records)
    summary = _summary(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if cfg.plots:
        plotting.plot_training_curves(records, out / "curves.png", title=cfg.command)
    print(json.dumps({k: summary[k] for k in ("steps", "grokking_gap", "test_acc_0.95_step")}))
    return EXIT_OK


def _campaign(cfg: ExperimentConfig, out: Path, resume: Optional[str]) -> int:
    ccfg = cfg.campaign_config()
    resume_state = None
    if resume:
        resume_state, stored = persistence.load_campaign_state(resume)
        if wlmd.CampaignConfig.from_dict(stored) != replace_epochs(ccfg, stored):
            raise ConfigError("checkpoint was written by a different campaign configuration")

    def on_round(state):
        persistence.save_campaign_state(out / "campaign.ck", state, ccfg.to_json())

    try:
        res = wlmd.run_campaign(ccfg, resume=resume_state, on_round=on_round)
    except optim.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "grid.csv").write_text(wlmd.grid_to_csv(res.grid))
    persistence.save_grid(out / "grid.ck", res.grid)
    for k, traj in enumerate(res.trajectories):
        wlmd.write_trajectory_csv(out / f"trajectory_w{k}.csv", traj)
    summary = {"epochs_per_walker": res.epochs_done, "failed_walkers": res.failed,
               "visited_bins": int(res.grid.visited.sum()), "boundary_hits": res.grid.boundary_hits}
    if cfg.command == "oracle":
        rep = wlmd.oracle_report(res.grid, ccfg.oracle_n)
        with open(out / "profile.csv", "w") as fh:
            fh.write("U,S_recovered,S_analytic\n")
            for u, s, a in zip(rep.U, rep.S, rep.analytic):
                fh.write(f"{u!r},{s!r},{a!r}\n")
        summary.update(n=ccfg.oracle_n, slope=rep.slope, target_slope=rep.target,
                       spread=rep.spread, max_residual=rep.max_residual)
        if cfg.plots:
            plotting.plot_oracle_profile(rep.U, rep.S, rep.analytic, out / "profile.png",
                                         title=f"n = {ccfg.oracle_n}")
    elif cfg.plots:
        plotting.plot_entropy_grid(res.grid, out / "landscape.png", res.trajectories)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def replace_epochs(ccfg: wlmd.CampaignConfig, stored: dict) -> wlmd.CampaignConfig:
    """``ccfg`` with the stored epoch budget, so a resume may extend a run."""
    return replace(ccfg, epochs=int(stored.get("epochs", ccfg.epochs)))


def _dataset(cfg: ExperimentConfig, out: Path) -> int:
    task = cfg.task_spec()
    split = make_split(task, int(cfg.seeds.get("split", 0))) if cfg.subset != "full" else None
    mat = visualize_dataset(task, cfg.subset, split)
    name = f"{task.kind.value}_p{task.p}_{cfg.subset}"
    write_matrix_csv(out / f"{name}.csv", mat, task, cfg.subset)
    if cfg.plots:
        plotting.plot_dataset(mat, out / f"{name}.png", title=f"{task.kind.value}, p = {task.p}")
    print(out / f"{name}.csv")
    return EXIT_OK


def run_command(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        text = cfg.to_json()
        (out / "config.json").write_text(text + "\n")
        print(text)
        resume = getattr(args, "resume", None)
        if cfg.command in ("train-adamw", "train-wand"):
            return _train(cfg, out, resume)
        if cfg.command in ("wlmd", "oracle"):
            return _campaign(cfg, out, resume)
        return _dataset(cfg, out)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (persistence.CheckpointError, FileNotFoundError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
