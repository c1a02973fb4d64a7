"""The attacker never observes target weights, outputs or data."""

import ast
import inspect
from pathlib import Path

import numpy as np

import gtabench
from gtabench import cli
from gtabench.cli import EXIT_FIREWALL, EXIT_OK, Workspace, main
from gtabench.models import load_checkpoint

from test_cli import prepared, run  # noqa: F401

PKG = Path(gtabench.__file__).parent
ATTACK_MODULES = ["attack_core.py", "ice.py", "sine_attack.py", "baselines.py"]
ATTACKER_FUNCTIONS = ["load_attacker_context", "build_attack", "craft_records", "cmd_train",
                      "_load_trained"]
FORBIDDEN_NAMES = {"load_targets", "FirewalledTarget", "gta_success_rate",
                   "transfer_within_dataset", "transfer_cross_dataset"}


def _imports(tree):
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            yield node.module or ""
        elif isinstance(node, ast.Import):
            yield from (a.name for a in node.names)


def static_violations() -> list[str]:
    found = []
    for name in ATTACK_MODULES:
        tree = ast.parse((PKG / name).read_text())
        for mod in _imports(tree):
            if mod.endswith("evaluation") or mod.endswith("cli"):
                found.append(f"{name} imports {mod}")
    for fn in ATTACKER_FUNCTIONS:
        tree = ast.parse(inspect.getsource(getattr(cli, fn)))
        for node in ast.walk(tree):
            if isinstance(node, ast.Name) and node.id in FORBIDDEN_NAMES:
                found.append(f"{fn} uses {node.id}")
            # the target section of the config names the held-out dataset and models
            if isinstance(node, ast.Attribute) and node.attr == "target":
                found.append(f"{fn} reads .target")
    return found


def test_attack_code_has_no_path_to_targets():
    assert static_violations() == []


def test_attacker_context_loads_sources_only(prepared, monkeypatch):  # noqa: F811
    cfg_path, out = prepared
    seen = []
    real_ds, real_model = cli._load_dataset, cli._load_model
    monkeypatch.setattr(cli, "_load_dataset",
                        lambda ws, name, split: seen.append(name) or real_ds(ws, name, split))
    monkeypatch.setattr(cli, "_load_model",
                        lambda ws, ds, arch, *a: seen.append(ds) or real_model(ws, ds, arch, *a))
    cfg = cli.load_config(str(cfg_path), "desk", {})
    ctx = cli.load_attacker_context(cfg, Workspace(out))
    assert set(seen) == {"a", "b"}
    for method in ["pgd", "joint", "random", "sa"]:
        if method == "sa":
            assert run(prepared, "train", "sa") == EXIT_OK
        attack = cli.build_attack(method, ctx)
        assert attack(np.full((1, 20, 20, 3), 100.0)).shape == (1, 20, 20, 3)
    assert "t" not in seen


def leaking_attack_exit_code(prepared, monkeypatch):  # noqa: F811
    """Exit code of attack-eval when the attack tries to consult a target model."""
    _, out = prepared
    spy = load_checkpoint(Workspace(out).model("t", "vgg-mini"))
    real_load = cli._load_model
    monkeypatch.setattr(cli, "_load_model", lambda ws, ds, arch, *a:
                        spy if (ds, arch) == ("t", "vgg-mini") else real_load(ws, ds, arch, *a))

    def build(method, ctx):
        import torch

        def attack(x):
            spy(torch.tensor(x.transpose(0, 3, 1, 2), dtype=torch.float64))
            return x
        return attack

    monkeypatch.setattr(cli, "build_attack", build)
    return run(prepared, "attack-eval", "pgd")


def test_leaking_attack_is_stopped(prepared, monkeypatch):  # noqa: F811
    assert leaking_attack_exit_code(prepared, monkeypatch) == EXIT_FIREWALL


def test_honest_attack_passes_the_firewall(prepared):  # noqa: F811
    for method in ["fgsm", "mi", "di", "ti-dim", "joint"]:
        assert run(prepared, "attack-eval", method) == EXIT_OK
