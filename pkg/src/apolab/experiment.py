"""Config-driven experiment runs: task, base model, training runs, artifacts.

A run directory looks like::

    <out>/
      config.json            resolved configuration
      task.json dataset.jsonl probe.jsonl
      checkpoint_base.json   the shared starting policy
      <method>/trace.csv summary.json checkpoint_<phase>.json
      report.json            cross-method comparison (two or more methods)

All randomness derives from the top-level ``seed`` through labeled sub-seeds.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from . import datagen, prefmetrics, seqmodel, trainer
from .errors import InputDomainError, UndefinedRate
from .probe import detect_squeeze
from .trainer import METHODS, TrainConfig, subseed

log = logging.getLogger(__name__)

REPORT_ORDER = ("sft", "dpo", "sd", "apo")
LOCK_NAME = ".lock"


class ConfigError(InputDomainError):
    pass


class RunLocked(OSError):
    pass


def _opt(*types):
    return {"types": types}


@dataclass
class TaskSection:
    scenario: str = "verifiable_optimum"
    n_problems: int = 200
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 8
    n_free: int = 3
    n_options: int = 3
    habit_correct: float = 0.5
    habit_distance: int = 1
    habit_better: bool = True
    dataset_size: int = 2500


@dataclass
class ModelSection:
    kind: str = "feedforward"
    context_window: int = 8
    embed_dim: int = 16
    hidden: int = 64
    init_scale: float = 0.1
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-2
    pretrain_batch_size: int = 32
    corpus_per_problem: int = 20
    habit_rate: float = 0.2
    corpus_noise: float = 0.5


@dataclass
class TrainSection:
    method: object = field(default="sft", metadata=_opt(str, list))
    steps: object = field(default=None, metadata=_opt(int, type(None)))
    batch_size: int = 8
    learning_rate: object = field(default=None, metadata=_opt(float, type(None)))
    beta: float = 0.1
    probe_every: int = 100
    seed: object = field(default=None, metadata=_opt(int, type(None)))
    optimizer: str = "adam"
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    alpha_mode: str = "stop_gradient"
    max_grad_norm: object = field(default=None, metadata=_opt(float, type(None)))
    sd_dpo_learning_rate: object = field(default=None, metadata=_opt(float, type(None)))

    @property
    def methods(self) -> list[str]:
        methods = [self.method] if isinstance(self.method, str) else list(self.method)
        if not methods:
            raise ConfigError("train.method must name at least one method")
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if len(set(methods)) != len(methods):
            raise ConfigError("train.method lists a method twice")
        return methods


@dataclass
class ProbeSection:
    size: int = 500


@dataclass
class OutputsSection:
    directory: str = "runs/default"
    save_dataset: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"task": TaskSection, "model": ModelSection, "train": TrainSection,
            "probe": ProbeSection, "outputs": OutputsSection}


def _check_value(where: str, f: dataclasses.Field, value):
    allowed = f.metadata.get("types") or (type(f.default),)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{where} must be {allowed[0].__name__}, got a boolean")
    if float in allowed and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, allowed):
        names = "/".join("null" if t is type(None) else t.__name__ for t in allowed)
        raise ConfigError(f"{where} must be {names}, got {type(value).__name__}")
    return value


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; unknown keys and wrong types are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", *SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig()
    if "seed" in doc:
        if isinstance(doc["seed"], bool) or not isinstance(doc["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = doc["seed"]
    for name, cls in SECTIONS.items():
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        known = {f.name: f for f in fields(cls)}
        bad = set(sec) - set(known)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
        values = {k: _check_value(f"{name}.{k}", known[k], v) for k, v in sec.items()}
        setattr(cfg, name, cls(**values))
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: ExperimentConfig) -> None:
    if cfg.task.scenario not in datagen.SCENARIOS:
        raise ConfigError(f"task.scenario must be one of {datagen.SCENARIOS}")
    if cfg.model.kind not in seqmodel.KINDS:
        raise ConfigError(f"model.kind must be one of {seqmodel.KINDS}")
    cfg.train.methods
    for name in ("n_problems", "dataset_size"):
        if getattr(cfg.task, name) < 1:
            raise ConfigError(f"task.{name} must be positive")
    if cfg.probe.size < 1:
        raise ConfigError("probe.size must be positive")
    if cfg.model.pretrain_steps < 0:
        raise ConfigError("model.pretrain_steps must be non-negative")
    try:
        train_config(cfg, cfg.train.methods[0])
    except InputDomainError as exc:
        raise ConfigError(f"train: {exc}") from exc


def train_steps(cfg: ExperimentConfig) -> int:
    """Configured steps, or five passes over the dataset when unset."""
    if cfg.train.steps is not None:
        return cfg.train.steps
    return math.ceil(5 * cfg.task.dataset_size / cfg.train.batch_size)


def train_config(cfg: ExperimentConfig, method: str) -> TrainConfig:
    t = cfg.train
    return TrainConfig(method=method, steps=train_steps(cfg), batch_size=t.batch_size,
                       learning_rate=t.learning_rate, beta=t.beta,
                       probe_every=min(t.probe_every, train_steps(cfg)),
                       seed=cfg.seed if t.seed is None else t.seed, optimizer=t.optimizer,
                       b1=t.b1, b2=t.b2, eps=t.eps, alpha_mode=t.alpha_mode,
                       max_grad_norm=t.max_grad_norm,
                       sd_dpo_learning_rate=t.sd_dpo_learning_rate)


def bundled_configs() -> list[str]:
    root = resources.files("apolab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config_doc(ref: str | os.PathLike) -> dict:
    """Read a config file, or a bundled config by name."""
    path = Path(ref)
    if not path.exists() and str(ref) in bundled_configs():
        text = (resources.files("apolab") / "configs" / f"{ref}.json").read_text()
    else:
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def apply_overrides(doc: dict, overrides: dict[str, object]) -> dict:
    """Set dotted keys (``train.steps``) in a copy of ``doc``."""
    doc = copy.deepcopy(doc)
    for key, value in overrides.items():
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}")
        node[parts[-1]] = value
    return doc


# -- pipeline pieces --------------------------------------------------------

@dataclass
class Workbench:
    """Task, data, probe and starting policy shared by every method of a run."""
    config: ExperimentConfig
    task: datagen.SyntheticTask
    dataset: list
    probe: object
    probe_dropped: int
    base: seqmodel.Policy


def build_task(cfg: ExperimentConfig) -> datagen.SyntheticTask:
    t = cfg.task
    return datagen.make_task(t.scenario, subseed(cfg.seed, "task"), n_problems=t.n_problems,
                             vocab_size=t.vocab_size, min_len=t.min_len, max_len=t.max_len,
                             n_free=t.n_free, n_options=t.n_options,
                             habit_correct=t.habit_correct, habit_distance=t.habit_distance,
                             habit_better=t.habit_better)


def build_base(cfg: ExperimentConfig, task: datagen.SyntheticTask) -> seqmodel.Policy:
    m = cfg.model
    base = seqmodel.Policy(m.kind, task.vocab, len(task.problems), context_window=m.context_window,
                           embed_dim=m.embed_dim, hidden=m.hidden, init_scale=m.init_scale,
                           seed=subseed(cfg.seed, "init"))
    if m.pretrain_steps > 0:
        corpus = datagen.gen_base_corpus(task, subseed(cfg.seed, "corpus"), m.corpus_per_problem,
                                         m.habit_rate, m.corpus_noise)
        base = trainer.pretrain(base, corpus, m.pretrain_steps, subseed(cfg.seed, "pretrain"),
                                m.pretrain_batch_size, m.pretrain_lr)
    return base


def prepare(cfg: ExperimentConfig) -> Workbench:
    task = build_task(cfg)
    dataset = datagen.gen_dataset(task, subseed(cfg.seed, "dataset"), cfg.task.dataset_size)
    probe, dropped = datagen.build_probe(task, dataset, subseed(cfg.seed, "probe"), cfg.probe.size)
    return Workbench(cfg, task, dataset, probe, dropped, build_base(cfg, task))


def final_metrics(bench: Workbench, result: trainer.TrainResult) -> dict:
    task = bench.task
    greedy = datagen.greedy_metrics(task, result.policy)
    outcomes = greedy.pop("outcomes")
    try:
        rate = prefmetrics.preference_rate(outcomes)
    except UndefinedRate:
        rate = None
    trace = result.trace
    last = trace.rows[-1]
    out = {
        "final_step": last.step,
        "final_loss": last.loss,
        "final_logprobs": dict(last.values),
        "final_argmax_logprob": last.argmax_logprob,
        "initial_logprobs": dict(trace.rows[0].values),
        "initial_argmax_logprob": trace.rows[0].argmax_logprob,
        "pass_rate": greedy["pass_rate"],
        "mean_quality": greedy["mean_quality"],
        "preference_rate": rate,
        "preference_criterion": "greedy output reaches the best quality among correct responses",
        "squeeze": detect_squeeze(trace, 0, last.step),
        "phases": [{"phase": p.phase, "start_step": p.start_step, "end_step": p.end_step}
                   for p in result.phases],
    }
    if len(result.phases) > 1:
        boundary = result.phases[0].end_step
        out["last_phase_squeeze"] = detect_squeeze(trace, boundary, last.step)
    return out


def run_method(bench: Workbench, method: str) -> tuple[trainer.TrainResult, dict]:
    result = trainer.train(train_config(bench.config, method), bench.dataset, bench.probe,
                           bench.base)
    return result, final_metrics(bench, result)


# -- artifacts ------------------------------------------------------------------

@contextmanager
def run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLocked(f"run directory {directory} is locked by another process") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n")


def write_inputs(bench: Workbench, out: Path) -> None:
    cfg = bench.config
    (out / "task.json").write_text(json.dumps(bench.task.to_record(), sort_keys=True) + "\n")
    datagen.save_dataset(out / "dataset.jsonl", bench.task, bench.dataset, cfg.seed)
    datagen.save_probe(out / "probe.jsonl", bench.task, bench.probe, cfg.seed)


def run_experiment(doc: dict, out: str | os.PathLike | None = None) -> Path:
    """Validate ``doc``, run every configured method, and write the artifacts."""
    cfg = parse_config(doc)
    out = Path(out if out is not None else cfg.outputs.directory)
    with run_lock(out):
        _dump(out / "config.json", cfg.to_dict())
        bench = prepare(cfg)
        if cfg.outputs.save_dataset:
            write_inputs(bench, out)
        seqmodel.save_checkpoint(bench.base, out / "checkpoint_base.json", seed=cfg.seed, step=0)
        for method in cfg.train.methods:
            log.info("training %s", method)
            result, metrics = run_method(bench, method)
            mdir = out / method
            mdir.mkdir(exist_ok=True)
            result.trace.write_csv(mdir / "trace.csv")
            for rec in result.phases:
                seqmodel.save_checkpoint(rec.checkpoint, mdir / f"checkpoint_{rec.phase}.json",
                                         seed=cfg.seed, step=rec.end_step)
            _dump(mdir / "summary.json", {
                "config": doc,
                "resolved_config": cfg.to_dict(),
                "method": method,
                "train_config": dataclasses.asdict(train_config(cfg, method)),
                "seed": cfg.seed,
                "task_seed": subseed(cfg.seed, "task"),
                "task_fingerprint": bench.task.fingerprint(),
                "scenario": cfg.task.scenario,
                "probe": {"entries": len(bench.probe), "dropped": bench.probe_dropped,
                          "roles": bench.probe.roles, "mean_lengths": bench.probe.mean_lengths(),
                          "variant_provenance": "synthetic analogue"},
                "metrics": metrics,
            })
        if len(cfg.train.methods) >= 2:
            _dump(out / "report.json", emit_report(out))
    return out


def emit_report(run_dir: str | os.PathLike) -> dict:
    """Tabulate final metrics of the method runs under ``run_dir``."""
    run_dir = Path(run_dir)
    summaries = {}
    for m in REPORT_ORDER:
        path = run_dir / m / "summary.json"
        if path.exists():
            summaries[m] = json.loads(path.read_text())
    if len(summaries) < 2:
        raise InputDomainError(f"need at least two completed runs under {run_dir}")
    keys = {(s["task_seed"], s["task_fingerprint"]) for s in summaries.values()}
    if len(keys) != 1:
        raise InputDomainError("runs do not share a task seed")
    (task_seed, fingerprint), = keys
    first = next(iter(summaries.values()))
    roles = first["probe"]["roles"]
    rows = []
    for metric in ("pass_rate", "mean_quality", "preference_rate", "final_argmax_logprob"):
        rows.append({"metric": metric,
                     "values": {m: s["metrics"][metric] for m, s in summaries.items()}})
    for role in roles:
        rows.append({"metric": f"final_logprob:{role}",
                     "values": {m: s["metrics"]["final_logprobs"][role] for m, s in summaries.items()}})
    rows.append({"metric": "squeezed",
                 "values": {m: s["metrics"]["squeeze"]["squeezed"] for m, s in summaries.items()}})
    return {"scenario": first["scenario"], "seed": first["seed"], "task_seed": task_seed,
            "task_fingerprint": fingerprint, "methods": list(summaries), "rows": rows}
