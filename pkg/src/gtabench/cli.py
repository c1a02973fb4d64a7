"""
Command-line entry point: prepare data and models, train attackers, evaluate
them against held-out targets, run universality studies and render reports.

Attack crafting only ever sees an ``AttackerContext`` (source datasets, source
models, trained attacker artifacts). Target models are loaded by the
evaluation path alone and are wrapped in ``FirewalledTarget``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .attack_core import PerturbationRecord, clip_pixels, project_to_images
from .baselines import (
    BaselineMethod,
    UapArtifact,
    ensemble_attack_batch,
    joint_attack_batch,
    train_uap,
    uap_noise,
)
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import (
    AttackBudget,
    DatasetError,
    DeskSpec,
    LabeledImageSet,
    coordinate_map,
    desk_train_test,
    load_external_dataset,
    save_archive,
    to_tensor,
)
from .evaluation import (
    FirewalledTarget,
    FirewallViolation,
    GTAReport,
    TargetResult,
    build_report,
    gta_success_rate,
    merge_reports,
    transfer_cross_dataset,
    transfer_within_dataset,
)
from .ice import IceResources, ice_attack_batch, train_ice, write_metrics
from .models import (
    CheckpointError,
    build_classifier,
    freeze,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from .sine_attack import SineParams, sa_train, sine_noise, wave_descriptor

log = logging.getLogger("gtabench")

OUT_ENV = "GTABENCH_OUT"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_TRAINING = 6
EXIT_PRECONDITION = 7
EXIT_FIREWALL = 8

BASELINES = {"fgsm": "FGSM", "pgd": "PGD", "mi": "MI", "di": "DI", "ti-dim": "TI-DIM"}
ATTACK_METHODS = ("ice", "sa", "uap", *BASELINES, "joint", "random")
TRAINABLE = ("ice", "sa", "uap")


class CommandError(Exception):
    code = EXIT_FAILURE


class MissingArtifact(CommandError):
    code = EXIT_MISSING


class TrainingFailure(CommandError):
    code = EXIT_TRAINING


class PreconditionError(CommandError):
    code = EXIT_PRECONDITION


# --------------------------------------------------------------------------
# workspace layout
# --------------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def dataset(self, name: str, split: str) -> Path:
        return self.root / "data" / f"{name}-{split}.gtads"

    def model(self, dataset: str, arch: str) -> Path:
        return self.root / "models" / dataset / f"{arch}.ckpt"

    def attacker(self, method: str, seed: int) -> Path:
        suffix = {"ice": "ckpt", "sa": "txt", "uap": "ckpt"}[method]
        return self.root / "attackers" / f"{method}-s{seed}.{suffix}"

    def attacker_metrics(self, method: str, seed: int) -> Path:
        return self.root / "attackers" / f"{method}-s{seed}-metrics.csv"

    def report(self, method: str, seed: int) -> Path:
        return self.root / "reports" / f"{method}-s{seed}.csv"

    def transfer(self, method: str, kind: str, seed: int) -> Path:
        return self.root / "transfer" / f"{method}-{kind}-s{seed}.csv"

    def figures(self, method: str, seed: int) -> Path:
        return self.root / "figures" / f"{method}-s{seed}"

    def manifest(self, stem: str) -> Path:
        return self.root / "manifests" / f"{stem}.json"


def resolve_output_root(cfg: ExperimentConfig, flag: str | None) -> Path:
    return Path(flag or cfg.output_dir or os.environ.get(OUT_ENV) or "gtabench-out")


def versions() -> dict:
    return {
        "gtabench": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def write_manifest(ws: Workspace, stem: str, cfg: ExperimentConfig, stage_hash: str,
                   outputs: list, extra: dict | None = None) -> Path:
    path = ws.manifest(stem)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": stem,
        "stage_hash": stage_hash,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "attack_seed": cfg.effective_attack_seed,
        "versions": versions(),
        "outputs": sorted(str(Path(p).relative_to(ws.root)) for p in outputs),
        "config": cfg.to_dict(),
        **(extra or {}),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def up_to_date(ws: Workspace, stem: str, stage_hash: str) -> bool:
    path = ws.manifest(stem)
    if not path.exists():
        return False
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if doc.get("stage_hash") != stage_hash:
        return False
    return all((ws.root / p).exists() for p in doc.get("outputs", []))


# --------------------------------------------------------------------------
# prepare: datasets and classifiers
# --------------------------------------------------------------------------

PREPARE_SECTIONS = ("sources", "target", "training", "seed")


def _materialise(spec) -> tuple[LabeledImageSet, LabeledImageSet]:
    if spec.kind == "desk":
        desk = DeskSpec(spec.name, tuple(spec.resolution), spec.num_classes,
                        spec.samples_per_class, spec.seed, spec.noise_std)
        return desk_train_test(desk, spec.test_per_class)
    train = load_external_dataset(spec.path, spec.format)
    test = load_external_dataset(spec.test_path, spec.format) if spec.test_path else train
    return train, test


def cmd_prepare(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> int:
    stage = cfg.hash(*PREPARE_SECTIONS)
    if not force and up_to_date(ws, "prepare", stage):
        log.info("prepare: up-to-date, skipping (use --force to rebuild)")
        return EXIT_OK
    outputs = []
    rows = []
    model_index = 0
    roles = [("source", d) for d in cfg.sources] + [("target", cfg.target)]
    for role, spec in roles:
        train, test = _materialise(spec)
        for split, ds in (("train", train), ("test", test)):
            path = ws.dataset(spec.name, split)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_archive(ds, path)
            outputs.append(path)
        for arch in spec.models:
            name = f"{role} {arch} on {spec.name}"
            log.info("training %s", name)
            model = build_classifier(arch, train.num_classes, train.resolution,
                                     cfg.seed + model_index)
            hp = type(cfg.training)(**{**cfg.training.__dict__, "seed": cfg.seed + model_index})
            model_index += 1
            try:
                train_classifier(model, train, hp, test)
            except (FloatingPointError, DatasetError, RuntimeError) as exc:
                raise TrainingFailure(f"training failed for {name}: {exc}") from exc
            path = ws.model(spec.name, arch)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path)
            outputs.append(path)
            rows.append([role, spec.name, arch, repr(model.metrics["train_acc"]),
                         repr(model.metrics["test_acc"])])
    acc_path = ws.root / "models" / "accuracy.csv"
    with open(acc_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role", "dataset", "architecture", "train_acc", "test_acc"])
        w.writerows(rows)
    outputs.append(acc_path)
    write_manifest(ws, "prepare", cfg, stage, outputs)
    for r in rows:
        log.info("%s %s/%s test accuracy %.3f", r[0], r[1], r[2], float(r[4]))
    return EXIT_OK


def _require_prepared(cfg: ExperimentConfig, ws: Workspace) -> None:
    if not up_to_date(ws, "prepare", cfg.hash(*PREPARE_SECTIONS)):
        raise MissingArtifact(f"prepared artifacts missing or stale under {ws.root}; "
                              f"run 'gtabench prepare' first")


def _load_dataset(ws: Workspace, name: str, split: str) -> LabeledImageSet:
    path = ws.dataset(name, split)
    if not path.exists():
        raise MissingArtifact(f"dataset archive {path} not found")
    return load_external_dataset(path, "archive")


def _load_model(ws: Workspace, dataset: str, arch: str, dtype=torch.float32):
    path = ws.model(dataset, arch)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    return freeze(load_checkpoint(path, dtype))


# --------------------------------------------------------------------------
# attacker side (never touches targets)
# --------------------------------------------------------------------------

@dataclass
class AttackerContext:
    """Everything an attacker may use: white-box sources and its own artifacts."""

    resources: IceResources
    source_tests: dict
    workspace: Workspace
    config: ExperimentConfig


def load_attacker_context(cfg: ExperimentConfig, ws: Workspace) -> AttackerContext:
    _require_prepared(cfg, ws)
    datasets, models, tests = [], [], {}
    for spec in cfg.sources:
        datasets.append(_load_dataset(ws, spec.name, "train"))
        tests[spec.name] = _load_dataset(ws, spec.name, "test")
        models.append([_load_model(ws, spec.name, arch) for arch in spec.models])
    return AttackerContext(IceResources(datasets, models), tests, ws, cfg)


def cmd_train(cfg: ExperimentConfig, ws: Workspace, method: str, force: bool = False) -> int:
    if method not in TRAINABLE:
        raise ConfigError(f"cannot train {method!r}; trainable methods: {TRAINABLE}")
    seed = cfg.effective_attack_seed
    stem = f"train-{method}-s{seed}"
    stage = cfg.hash(*PREPARE_SECTIONS, method) + f":{seed}"
    if not force and up_to_date(ws, stem, stage):
        log.info("train %s: up-to-date, skipping", method)
        return EXIT_OK
    ctx = load_attacker_context(cfg, ws)
    artifact, metrics_path = ws.attacker(method, seed), ws.attacker_metrics(method, seed)
    artifact.parent.mkdir(parents=True, exist_ok=True)
    try:
        if method == "ice":
            icfg = type(cfg.ice)(**{**cfg.ice.__dict__, "seed": seed})
            result = train_ice(ctx.resources, icfg)
            save_checkpoint(result.surrogate, artifact)
        elif method == "sa":
            scfg = type(cfg.sa)(**{**cfg.sa.__dict__, "seed": seed, "init_seed": seed})
            result = sa_train(ctx.resources, scfg)
            result.omega.save(artifact, seed=seed, epsilon=scfg.epsilon)
            log.info("sa waves\n%s", wave_descriptor(result.omega).table())
        else:
            ucfg = type(cfg.uap)(**{**cfg.uap.__dict__, "seed": seed})
            result = train_uap(ctx.resources, ucfg)
            result.artifact.save(artifact, seed=seed)
    except FloatingPointError as exc:
        raise TrainingFailure(f"{method} training diverged: {exc}") from exc
    write_metrics(result.metrics, metrics_path)
    write_manifest(ws, stem, cfg, stage, [artifact, metrics_path])
    log.info("train %s: wrote %s", method, artifact)
    return EXIT_OK


def _load_trained(ctx: AttackerContext, method: str):
    path = ctx.workspace.attacker(method, ctx.config.effective_attack_seed)
    if not path.exists():
        raise MissingArtifact(f"{method} artifact {path} not found; run 'gtabench train {method}'")
    if method == "ice":
        return load_checkpoint(path, torch.float32)
    if method == "sa":
        return SineParams.load(path)
    return UapArtifact.load(path)


def build_attack(method: str, ctx: AttackerContext) -> Callable[[np.ndarray], np.ndarray]:
    """Pixel-array in, adversarial pixel-array out, from attacker resources only."""
    if method not in ATTACK_METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {ATTACK_METHODS}")
    cfg = ctx.config
    eps = cfg.attack.epsilon
    budget = AttackBudget(eps, cfg.attack.steps)
    groups = ctx.resources.source_models

    if method == "ice":
        surrogate = _load_trained(ctx, "ice")

        def attack(x):
            xt = to_tensor(x, torch.float32)
            x_t = ice_attack_batch(surrogate, xt, budget, sign_project=False,
                                   loss_mode=cfg.attack.loss_mode)
            return project_to_images(x, xt, x_t, eps)
    elif method == "sa":
        omega = _load_trained(ctx, "sa")

        def attack(x):
            z = np.sign(sine_noise(omega, coordinate_map(*x.shape[1:3])))
            return clip_pixels(x + eps * z[None])
    elif method == "uap":
        artifact = _load_trained(ctx, "uap")

        def attack(x):
            return clip_pixels(x + eps * uap_noise(artifact, x.shape[1:3])[None])
    elif method in BASELINES:
        bm = BaselineMethod(**{**cfg.baseline.__dict__, "name": BASELINES[method]})

        def attack(x):
            xt = to_tensor(x, torch.float32)
            fused, _ = ensemble_attack_batch(groups, xt, bm, budget, cfg.attack.loss_mode)
            return project_to_images(x, xt, fused, eps)
    elif method == "joint":
        def attack(x):
            xt = to_tensor(x, torch.float32)
            return project_to_images(x, xt, joint_attack_batch(groups, xt, budget, False), eps)
    else:
        rng = np.random.default_rng(cfg.effective_attack_seed)

        def attack(x):
            return clip_pixels(x + eps * rng.choice([-1.0, 1.0], size=x.shape))
    return attack


def craft_records(attack: Callable, images: np.ndarray, method: str, budget: AttackBudget,
                  batch_size: int = 64) -> list[PerturbationRecord]:
    records = []
    for i in range(0, len(images), batch_size):
        clean = images[i:i + batch_size]
        adv = attack(clean.copy())
        records += [PerturbationRecord(c, a, method, budget) for c, a in zip(clean, adv)]
    return records


# --------------------------------------------------------------------------
# evaluation side
# --------------------------------------------------------------------------

def load_targets(cfg: ExperimentConfig, ws: Workspace):
    """Held-out test set and firewalled target models (evaluation only)."""
    _require_prepared(cfg, ws)
    test = _load_dataset(ws, cfg.target.name, "test")
    targets = [FirewalledTarget(_load_model(ws, cfg.target.name, arch), arch)
               for arch in cfg.target.models]
    return test, targets


def _eval_subset(cfg: ExperimentConfig, test: LabeledImageSet) -> LabeledImageSet:
    n = cfg.evaluation.max_images
    if n is None or n >= len(test):
        return test
    return test.subset(np.arange(n))


def _metadata(cfg: ExperimentConfig) -> dict:
    return {"epsilon": cfg.attack.epsilon, "T": cfg.attack.steps,
            "seed": cfg.effective_attack_seed}


def evaluate_method(cfg: ExperimentConfig, ws: Workspace, method: str) -> GTAReport:
    ctx = load_attacker_context(cfg, ws)
    attack = build_attack(method, ctx)
    test, targets = load_targets(cfg, ws)
    test = _eval_subset(cfg, test)
    reports = [gta_success_rate(t, test, attack, method, cfg.evaluation.batch_size)
               for t in targets]
    report = merge_reports(reports, method)
    report.metadata = _metadata(cfg)
    return report


def write_report(report: GTAReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(build_report([report], "csv"))
    return path


def read_reports(paths) -> list[GTAReport]:
    """Parse long-format report CSVs back into reports, one per (method, seed)."""
    grouped: dict = {}
    for p in paths:
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["method"], row["seed"])
                rep = grouped.setdefault(key, GTAReport(row["method"], metadata={
                    "epsilon": row["epsilon"], "T": row["T"], "seed": row["seed"]}))
                rep.results.append(TargetResult(row["target_model"], int(row["evaluated"]),
                                                int(row["successes"])))
    return list(grouped.values())


def write_spectra(cfg: ExperimentConfig, ws: Workspace, method: str, ctx=None) -> list[Path]:
    from .plotting import noise_and_spectrum

    ctx = ctx or load_attacker_context(cfg, ws)
    attack = build_attack(method, ctx)
    images = _load_dataset(ws, cfg.target.name, "test").images[:cfg.evaluation.spectrum_samples]
    out_dir = ws.figures(method, cfg.effective_attack_seed)
    paths = []
    for i, adv in enumerate(attack(images.copy())):
        paths += noise_and_spectrum(adv - images[i], out_dir, f"{method}-{i}")
    if method == "sa":
        table = out_dir / "sa-waves.txt"
        table.write_text(wave_descriptor(_load_trained(ctx, "sa")).table() + "\n")
        paths.append(table)
    return paths


def cmd_attack_eval(cfg: ExperimentConfig, ws: Workspace, method: str,
                    spectrum: bool = False) -> int:
    report = evaluate_method(cfg, ws, method)
    seed = cfg.effective_attack_seed
    outputs = [write_report(report, ws.report(method, seed))]
    if spectrum:
        outputs += write_spectra(cfg, ws, method)
    write_manifest(ws, f"attack-eval-{method}-s{seed}", cfg, cfg.hash(), outputs)
    for r in report.results:
        log.info("%s vs %s: %d/%d = %.3f", method, r.target_model, r.successes, r.evaluated,
                 r.rate)
    sys.stdout.write(build_report([report], "table"))
    return EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, ws: Workspace, method: str) -> int:
    paths = write_spectra(cfg, ws, method)
    seed = cfg.effective_attack_seed
    write_manifest(ws, f"spectrum-{method}-s{seed}", cfg, cfg.hash(), paths)
    log.info("spectrum: wrote %d files to %s", len(paths), ws.figures(method, seed))
    return EXIT_OK


def _sample(n_total: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=min(n, n_total), replace=False))


def transfer_study(cfg: ExperimentConfig, ws: Workspace, method: str, kind: str,
                   source: str | None = None) -> list[GTAReport]:
    """Universality of ``method`` noise next to a random-sign baseline of equal epsilon."""
    ctx = load_attacker_context(cfg, ws)
    seed = cfg.effective_attack_seed
    n = cfg.evaluation.transfer_pairs
    budget = AttackBudget(cfg.attack.epsilon, cfg.attack.steps)
    attack = build_attack(method, ctx)
    rand = build_attack("random", ctx)
    if kind == "within":
        test = _load_dataset(ws, cfg.target.name, "test")
        victims = test.subset(_sample(len(test), n, seed))
        records = craft_records(attack, victims.images, method, budget)
        baseline = craft_records(rand, victims.images, "random", budget)
    elif kind == "cross":
        if source is None:
            raise ConfigError("cross-dataset transfer needs --source")
        if source not in ctx.source_tests:
            raise ConfigError(f"unknown source dataset {source!r}")
        src = ctx.source_tests[source]
        th, tw = tuple(cfg.target.resolution)
        if src.resolution[0] < th or src.resolution[1] < tw:
            raise PreconditionError(
                f"cross-dataset transfer needs source resolution >= target: {source} is "
                f"{src.resolution[0]}x{src.resolution[1]}, target is {th}x{tw}"
            )
        src_imgs = src.images[_sample(len(src), n, seed)]
        records = craft_records(attack, src_imgs, method, budget)
        baseline = craft_records(rand, src_imgs, "random", budget)
        test = _load_dataset(ws, cfg.target.name, "test")
        victims = test.subset(_sample(len(test), n, seed + 1))
    else:
        raise ConfigError(f"kind must be 'within' or 'cross', got {kind!r}")

    _, targets = load_targets(cfg, ws)
    out = []
    for name, recs in ((f"{method}-{kind}", records), (f"random-{kind}", baseline)):
        reps = []
        for t in targets:
            if kind == "within":
                reps.append(transfer_within_dataset(recs, victims, t, name))
            else:
                reps.append(transfer_cross_dataset(recs, victims, cfg.attack.epsilon, t, name))
        rep = merge_reports(reps, name)
        rep.metadata = _metadata(cfg)
        out.append(rep)
    return out


def cmd_transfer_study(cfg: ExperimentConfig, ws: Workspace, method: str, kind: str,
                       source: str | None = None) -> int:
    reports = transfer_study(cfg, ws, method, kind, source)
    seed = cfg.effective_attack_seed
    path = ws.transfer(method, kind, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(build_report(reports, "csv"))
    write_manifest(ws, f"transfer-{method}-{kind}-s{seed}", cfg, cfg.hash(), [path])
    sys.stdout.write(build_report(reports, "table"))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, ws: Workspace) -> int:
    paths = sorted((ws.root / "reports").glob("*-s*.csv"))
    if not paths:
        raise MissingArtifact(f"no reports under {ws.root / 'reports'}; run attack-eval first")
    reports = read_reports(paths)
    for rep in reports:
        rep.method = f"{rep.method}@s{rep.metadata['seed']}"
    summary = ws.root / "reports" / "summary.csv"
    table = ws.root / "reports" / "table.csv"
    summary.write_text(build_report(reports, "csv"))
    table.write_text(build_report(reports, "table"))
    write_manifest(ws, "report", cfg, cfg.hash(), [summary, table])
    sys.stdout.write(table.read_text())
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config layered over the preset")
    common.add_argument("--preset", default="desk", help="built-in preset: desk or quick")
    common.add_argument("--out", help=f"output root (default: config, then ${OUT_ENV})")
    common.add_argument("--seed", type=int, help="global seed for data and models")
    common.add_argument("--attack-seed", type=int, help="seed for attacker training/sampling")
    common.add_argument("--epsilon", type=float, help="L-inf budget in pixel units")
    common.add_argument("--steps", type=int, help="attack iterations T")
    common.add_argument("--loss-mode", choices=["entropy", "kl_vs_clean"])
    common.add_argument("--output-dim", type=int, help="ICE surrogate output dimension")
    common.add_argument("--max-images", type=int, help="cap on evaluated target images")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gtabench", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("prepare", parents=[common], help="build datasets and train classifiers")
    sp.add_argument("--force", action="store_true")
    sp = sub.add_parser("train", parents=[common], help="train an attacker")
    sp.add_argument("method", choices=TRAINABLE)
    sp.add_argument("--force", action="store_true")
    sp = sub.add_parser("attack-eval", parents=[common], help="GTA success rate vs targets")
    sp.add_argument("method", choices=ATTACK_METHODS)
    sp.add_argument("--spectrum", action="store_true", help="also write noise/spectrum PNGs")
    sp = sub.add_parser("transfer-study", parents=[common], help="noise universality study")
    sp.add_argument("method", choices=ATTACK_METHODS)
    sp.add_argument("--kind", choices=["within", "cross"], default="within")
    sp.add_argument("--source", help="source dataset for cross-dataset transfer")
    sp = sub.add_parser("spectrum", parents=[common], help="noise and spectrum PNG panels")
    sp.add_argument("method", choices=ATTACK_METHODS)
    sub.add_parser("report", parents=[common], help="combine reports into tables")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.attack_seed is not None:
        o["attack_seed"] = args.attack_seed
    attack = {k: v for k, v in (("epsilon", args.epsilon), ("steps", args.steps),
                                ("loss_mode", args.loss_mode)) if v is not None}
    if attack:
        o["attack"] = attack
    if args.output_dim is not None:
        o["ice"] = {"output_dim": args.output_dim}
    if args.max_images is not None:
        o["evaluation"] = {"max_images": args.max_images}
    return o


def run(args) -> int:
    cfg = load_config(args.config, args.preset, _overrides(args))
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.threads:
        torch.set_num_threads(args.threads)
    ws = Workspace(resolve_output_root(cfg, args.out))
    ws.root.mkdir(parents=True, exist_ok=True)
    if args.command == "prepare":
        return cmd_prepare(cfg, ws, args.force)
    if args.command == "train":
        return cmd_train(cfg, ws, args.method, args.force)
    if args.command == "attack-eval":
        return cmd_attack_eval(cfg, ws, args.method, args.spectrum)
    if args.command == "transfer-study":
        return cmd_transfer_study(cfg, ws, args.method, args.kind, args.source)
    if args.command == "spectrum":
        return cmd_spectrum(cfg, ws, args.method)
    return cmd_report(cfg, ws)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CommandError as exc:
        log.error("%s", exc)
        return exc.code
    except FirewallViolation as exc:
        log.error("firewall violation: %s", exc)
        return EXIT_FIREWALL
    except (DatasetError, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("precondition failed: %s", exc)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
