"""``romgait``: train the teacher, record its gait, train the student, evaluate.

Every command writes ``manifest.json`` next to its outputs. Passing that
manifest back through ``--config`` repeats the run with the same resolved
configuration and inputs.

Any config value can be overridden with ``--table.key value``; the common
ones also have dedicated flags. Log verbosity comes from ``ROMGAIT_LOG_LEVEL``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from .evalkit import REPORT_CHANNELS, export_comparison, report_from_mse, aligned_mse
from .gaitdata import (
    DatasetError,
    TeacherFellEarly,
    export_csv,
    load_dataset,
    record_reference,
    save_dataset,
)
from .neural import CheckpointVersionMismatch
from .ppo import PPOTeacher
from .rom_env import ConfigError
from .sac import SACStudent, rollout_features

LOG_ENV = "ROMGAIT_LOG_LEVEL"
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

log = logging.getLogger("romgait")


def _version() -> str:
    try:
        return metadata.version("romgait")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def git_blob_hash(path) -> str:
    """Content hash in git's blob format (sha1 over ``blob <size>\\0<bytes>``)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


class Manifest:
    def __init__(self, command: str, cfg: dict, inputs: dict[str, str], out: Path):
        self.out = out
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": cfg,
            "seeds": {"run": cfg["run"]["seed"], "record": cfg["record"]["seed"],
                      "evaluate": cfg["evaluate"]["seed"]},
            "inputs": {name: {"path": str(Path(p).resolve()), "git_hash": git_blob_hash(p)}
                       for name, p in inputs.items()},
            "tool_version": _version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }

    def _name(self, path: Path) -> str:
        try:
            return str(path.resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(path.resolve())

    def finish(self, outputs) -> Path:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["outputs"] = {self._name(p): git_blob_hash(p) for p in sorted(map(Path, outputs))}
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


def _manifest_inputs(config_path) -> dict:
    if config_path and str(config_path).endswith(".json"):
        return {k: v["path"] for k, v in json.loads(Path(config_path).read_text()).get("inputs", {}).items()}
    return {}


def _extra_overrides(args: list[str]) -> dict:
    """``--table.key value`` pairs left over after click's own options."""
    out, i = {}, 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or "." not in arg:
            raise click.UsageError(f"unexpected argument {arg!r}; overrides look like --table.key value")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise click.UsageError(f"missing value for {arg}")
            value = args[i + 1]
            i += 2
        out[key] = cfgmod.parse_value(value)
    return out


def _resolve(ctx, config_path, named: dict) -> dict:
    overrides = _extra_overrides(ctx.args)
    overrides.update({k: v for k, v in named.items() if v is not None})
    try:
        return cfgmod.load_config(config_path, overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG)


_EXTRA = {"ignore_unknown_options": True, "allow_extra_args": True}


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="TOML config file, or a manifest.json from an earlier run.")(f)
    f = click.option("--seed", type=int, help="Run seed (run.seed).")(f)
    return f


@click.group(help=__doc__)
@click.version_option(_version(), prog_name="romgait")
def main():
    _setup_logging()


@main.command("config", context_settings=_EXTRA)
@click.option("--show-defaults", is_flag=True, help="Print every default value as TOML.")
@_common
@click.pass_context
def cmd_config(ctx, show_defaults, config_path, seed):
    """Print the default or resolved configuration."""
    if show_defaults:
        click.echo(cfgmod.dumps_toml(cfgmod.default_config()), nl=False)
        return
    cfg = _resolve(ctx, config_path, {"run.seed": seed})
    click.echo(cfgmod.dumps_toml(cfg), nl=False)


@main.command("train-teacher", context_settings=_EXTRA)
@_common
@click.option("--steps", type=int, help="Environment steps (ppo.total_steps).")
@click.option("--target-speed", type=float, help="Target speed in m/s (teacher_episode.target_speed).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.pass_context
def cmd_train_teacher(ctx, config_path, seed, steps, target_speed, out):
    """Train the reduced-order teacher with PPO."""
    cfg = _resolve(ctx, config_path, {"run.seed": seed, "ppo.total_steps": steps,
                                      "teacher_episode.target_speed": target_speed})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train-teacher", cfg, {}, out)
    teacher = cfgmod.make_teacher(cfg)
    teacher.fit(out_dir=out)
    outputs = [p for p in out.iterdir() if p.name != "manifest.json"]
    manifest.finish(outputs)
    click.echo(str(out / "checkpoint_final.npz"))


@main.command("record", context_settings=_EXTRA)
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Teacher checkpoint.")
@click.option("--steps", "T", type=int, help="Frames to record (record.T).")
@click.option("--target-speed", type=float, help="Target speed in m/s (teacher_episode.target_speed).")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output dataset file.")
@click.option("--export-csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write a CSV copy.")
@click.pass_context
def cmd_record(ctx, config_path, seed, checkpoint, T, target_speed, out, csv_path):
    """Roll out the teacher deterministically and save its gait features."""
    cfg = _resolve(ctx, config_path, {"record.seed": seed, "record.T": T,
                                      "teacher_episode.target_speed": target_speed})
    checkpoint = checkpoint or _manifest_inputs(config_path).get("checkpoint")
    if checkpoint is None or not Path(checkpoint).is_file():
        raise click.UsageError(f"teacher checkpoint not found: {checkpoint}")
    try:
        teacher = PPOTeacher.load(checkpoint)
    except (CheckpointVersionMismatch, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(EXIT_RUNTIME)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("record", cfg, {"checkpoint": checkpoint}, out.parent)
    teacher.episode_config = cfgmod.teacher_episode(cfg)
    env = teacher.make_env()
    meta = {"teacher_checkpoint": git_blob_hash(checkpoint), "source": "rom_teacher"}
    try:
        dataset = record_reference(teacher, env, int(cfg["record"]["T"]), int(cfg["record"]["seed"]), meta)
    except TeacherFellEarly as exc:
        click.echo(f"error: TeacherFellEarly: {exc}", err=True)
        ctx.exit(EXIT_RUNTIME)
    save_dataset(dataset, out)
    if load_dataset(out) != dataset:
        click.echo("error: dataset failed read-back validation", err=True)
        ctx.exit(EXIT_RUNTIME)
    outputs = [out]
    if csv_path:
        export_csv(dataset, csv_path)
        outputs.append(Path(csv_path))
    manifest.finish(outputs)
    click.echo(str(out))


@main.command("train-student", context_settings=_EXTRA)
@_common
@click.option("--reference", type=click.Path(dir_okay=False), help="Reference dataset from `record`.")
@click.option("--eta", type=float, help="Weight of the environment reward (sac.eta); 1 disables imitation.")
@click.option("--steps", type=int, help="Environment steps (sac.total_steps).")
@click.option("--target-speed", type=float, help="Target speed in m/s (student_episode.target_speed).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.pass_context
def cmd_train_student(ctx, config_path, seed, reference, eta, steps, target_speed, out):
    """Train the biped student with SAC and the adversarial gait prior."""
    cfg = _resolve(ctx, config_path, {"run.seed": seed, "sac.eta": eta, "sac.total_steps": steps,
                                      "student_episode.target_speed": target_speed})
    reference = reference or _manifest_inputs(config_path).get("reference")
    inputs = {}
    frames = None
    if reference is not None or cfg["sac"]["eta"] < 1.0:
        if reference is None or not Path(reference).is_file():
            click.echo(f"error: reference dataset not found: {reference}", err=True)
            ctx.exit(EXIT_RUNTIME)
        try:
            frames = load_dataset(reference).frames
        except DatasetError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(EXIT_RUNTIME)
        inputs["reference"] = reference
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train-student", cfg, inputs, out)
    student = cfgmod.make_student(cfg)
    student.fit(frames if student.uses_discriminator else None, out_dir=out)
    manifest.finish([p for p in out.iterdir() if p.name != "manifest.json"])
    click.echo(str(out / "checkpoint_final.npz"))


@main.command("evaluate", context_settings=_EXTRA)
@_common
@click.option("--reference", type=click.Path(dir_okay=False), help="Reference dataset.")
@click.option("--student", type=click.Path(dir_okay=False), help="Student checkpoint (eta < 1).")
@click.option("--baseline", type=click.Path(dir_okay=False), help="Baseline checkpoint (eta = 1).")
@click.option("--episodes", type=int, help="Seeded evaluation rollouts (evaluate.episodes).")
@click.option("--steps", type=int, help="Frames per rollout (evaluate.steps).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.pass_context
def cmd_evaluate(ctx, config_path, seed, reference, student, baseline, episodes, steps, out):
    """Per-channel MSE of student and baseline against the teacher reference."""
    cfg = _resolve(ctx, config_path, {"evaluate.seed": seed, "evaluate.episodes": episodes,
                                      "evaluate.steps": steps})
    recorded = _manifest_inputs(config_path)
    paths = {"reference": reference or recorded.get("reference"),
             "student": student or recorded.get("student"),
             "baseline": baseline or recorded.get("baseline")}
    for name, p in paths.items():
        if p is None or not Path(p).is_file():
            click.echo(f"error: {name} not found: {p}", err=True)
            ctx.exit(EXIT_RUNTIME)
    try:
        ref = load_dataset(paths["reference"])
        policies = {"student": SACStudent.load(paths["student"]), "baseline": SACStudent.load(paths["baseline"])}
    except (DatasetError, CheckpointVersionMismatch, ValueError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        ctx.exit(EXIT_RUNTIME)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("evaluate", cfg, paths, out)
    result = evaluate_policies(ref.frames, policies, cfg)
    report = report_from_mse(result["student"]["mean"], result["baseline"]["mean"], cfg["evaluate"]["alignment"])
    report.notes["episodes"] = int(cfg["evaluate"]["episodes"])
    for name in policies:
        report.notes[f"{name}_mse_std"] = dict(zip(REPORT_CHANNELS, map(float, result[name]["std"])))
        report.notes[f"{name}_falls"] = result[name]["falls"]
    n_show = int(cfg["evaluate"]["export_frames"])
    written = export_comparison(ref.frames[:n_show], {k: v["first"][:n_show] for k, v in result.items()},
                                out / "comparison", report)
    (out / "report.json").write_text(report.to_json() + "\n")
    manifest.finish(written + [out / "report.json"])
    click.echo(report.to_json())


def evaluate_policies(reference: np.ndarray, policies: dict, cfg: dict) -> dict:
    """Seeded deterministic rollouts of each policy; per-episode MSE mean and std."""
    ev = cfg["evaluate"]
    steps = min(int(ev["steps"]), reference.shape[0])
    results = {}
    for name, policy in policies.items():
        env = policy.make_env()
        per_episode, falls, first = [], 0, None
        for i in range(int(ev["episodes"])):
            feats, _, fell = rollout_features(policy, env, int(ev["seed"]) + i, steps)
            falls += int(fell)
            if fell:
                # a fallen policy keeps its last posture for the rest of the window
                feats = np.vstack([feats, np.repeat(feats[-1:], steps - len(feats), axis=0)])
            if first is None:
                first = feats
            per_episode.append(aligned_mse(reference, feats, ev["alignment"]))
        per_episode = np.array(per_episode)
        results[name] = {"mean": per_episode.mean(axis=0), "std": per_episode.std(axis=0),
                         "falls": falls, "first": first}
    return results


if __name__ == "__main__":
    main()
