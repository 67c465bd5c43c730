"""Named experiment recipes.

Each preset is a partial :class:`~grokwl.cli.ExperimentConfig` dictionary;
anything it leaves out keeps its default.
"""

from __future__ import annotations

import copy

__all__ = ["PRESETS", "get_preset", "preset_names"]


def _adamw(task, d, mlp, lr, wd, fixed_norm=None):
    return {
        "command": "train-adamw",
        "task": {"kind": task, "p": 67},
        "model": {"d_model": d, "n_heads": 4, "d_mlp": mlp},
        "optimizer": {"learning_rate": lr, "weight_decay": wd, "steps": 10_000,
                      "fixed_norm": fixed_norm},
    }


def _shell(d, mlp):
    return {
        "command": "wlmd",
        "task": {"kind": "add", "p": 67},
        "model": {"d_model": d, "n_heads": 4, "d_mlp": mlp},
        "sampler": {"constraint": "norm_shell", "radius": 30.0, "walkers": 8,
                    "epochs": 1_000_000, "round_size": 100_000, "stride": 1000},
    }


PRESETS: dict[str, dict] = {
    # training hyperparameter table: fixed-norm width sweep, then the free-norm rows
    "table1-add-fn32": _adamw("add", 32, 128, 1e-3, 0.0, 30.0),
    "table1-add-fn64": _adamw("add", 64, 256, 1e-3, 0.0, 30.0),
    "table1-add-fn128": _adamw("add", 128, 512, 1e-3, 0.0, 30.0),
    "table1-add": _adamw("add", 128, 512, 3e-3, 1.0),
    "table1-square": _adamw("square", 128, 512, 5e-3, 1.0),
    "table1-cubic": _adamw("cubic", 128, 512, 1e-2, 1.0),
    # calibrated: dt^2 kT sets the noise-driven norm growth, the strong bias
    # keeps ln loss under its threshold against that noise
    "wand-add": {
        "command": "train-wand",
        "task": {"kind": "add", "p": 67},
        "model": {"d_model": 128, "n_heads": 4, "d_mlp": 512},
        "optimizer": {"learning_rate": 0.024, "kT": 0.008, "bias_beta": 1e4, "steps": 2_500},
    },
    # desk-scale landscape: 8 walkers x 250k epochs = 2M epochs in total
    "wlmd-desk": {
        "command": "wlmd",
        "task": {"kind": "add", "p": 13},
        "model": {"d_model": 32, "n_heads": 4, "d_mlp": 128},
        "sampler": {"constraint": "hypercube", "walkers": 8, "epochs": 250_000,
                    "round_size": 25_000, "stride": 250},
    },
    "wlmd-p67": {
        "command": "wlmd",
        "task": {"kind": "add", "p": 67},
        "model": {"d_model": 128, "n_heads": 4, "d_mlp": 512},
        "sampler": {"constraint": "hypercube", "walkers": 8, "epochs": 1_000_000,
                    "round_size": 100_000, "stride": 1000},
    },
    "wlmd-shell32": _shell(32, 128),
    "wlmd-shell64": _shell(64, 256),
    "wlmd-shell128": _shell(128, 512),
}

for _n in (2, 4, 6):
    PRESETS[f"oracle-n{_n}"] = {"command": "oracle", "oracle": {"n": _n}}


def preset_names(command: str | None = None) -> list[str]:
    return sorted(k for k, v in PRESETS.items() if command is None or v["command"] == command)


def get_preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(preset_names())}") from None
