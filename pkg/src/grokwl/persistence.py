"""Binary checkpoints: a JSON header followed by little-endian float64 data.

File layout::

    b"GRKWLCK1"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys
    payload                     concatenated arrays, '<f8' / '<i8'

The header lists every array (name, dtype, shape) in payload order together
with a SHA-256 of the payload, so truncated or altered files are rejected
before anything is returned.  Writing is deterministic: saving a loaded
checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from . import transformer as tf
from .optim import AdamState, AdamWConfig, Entropy1D, WandConfig, WandState

__all__ = [
    "CheckpointError",
    "FORMAT_VERSION",
    "write_checkpoint",
    "read_checkpoint",
    "save_params",
    "load_params",
    "save_adam",
    "load_adam",
    "save_wand",
    "load_wand",
    "save_grid",
    "load_grid",
    "save_walker",
    "load_walker",
    "save_campaign_state",
    "load_campaign_state",
]

MAGIC = b"GRKWLCK1"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write ``arrays`` (float64 or int64) with ``meta`` under a JSON header.

    The file is written to a temporary name and renamed into place.
    """
    table, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        chunks.append(data)
    payload = b"".join(chunks)
    header = _dumps({
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    })
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; raises :class:`CheckpointError` on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = blob[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays, off = {}, 0
    for entry in header["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    if off != len(payload):
        raise CheckpointError(f"{path}: array table does not cover the payload")
    return header["meta"], arrays


# -- typed wrappers -----------------------------------------------------------

def _layout_table(layout) -> list:
    return [{"name": g.name, "shape": list(g.shape), "offset": g.offset, "fan_in": g.fan_in}
            for g in layout]


def _params_meta(params: tf.ParamVector, **extra) -> dict:
    meta = {"config": asdict(params.config), "layout": _layout_table(params.layout),
            "norm": tf.weight_norm(params)}
    meta.update(extra)
    return meta


def _params_from(meta: dict, flat: np.ndarray) -> tf.ParamVector:
    cfg = tf.ModelConfig(**meta["config"])
    layout = tf.build_layout(cfg)
    if _layout_table(layout) != meta["layout"]:
        raise CheckpointError("stored layout does not match the model configuration")
    try:
        return tf.ParamVector(cfg, flat, layout)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None


def save_params(path, params: tf.ParamVector, seed: int | None = None, step: int = 0) -> Path:
    arrays = {"flat": params.flat}
    if params.velocities is not None:
        arrays["velocities"] = params.velocities
    return write_checkpoint(path, "params", _params_meta(params, seed=seed, step=step), arrays)


def load_params(path) -> tf.ParamVector:
    meta, arrays = read_checkpoint(path, "params")
    pv = _params_from(meta, arrays["flat"])
    pv.velocities = arrays.get("velocities")
    return pv


def save_adam(path, state: AdamState, cfg: AdamWConfig, seed: int | None = None, extra: dict | None = None) -> Path:
    meta = _params_meta(state.params, seed=seed, step=state.step, optimizer=asdict(cfg),
                        extra=extra or {})
    return write_checkpoint(path, "adamw", meta,
                            {"flat": state.params.flat, "m": state.m, "v": state.v})


def load_adam(path) -> tuple[AdamState, AdamWConfig, dict]:
    meta, arrays = read_checkpoint(path, "adamw")
    pv = _params_from(meta, arrays["flat"])
    cfg = AdamWConfig(**meta["optimizer"])
    return AdamState(pv, arrays["m"], arrays["v"], int(meta["step"])), cfg, meta


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_wand(path, state: WandState, seed: int | None = None, extra: dict | None = None) -> Path:
    meta = _params_meta(state.params, seed=seed, step=state.t, optimizer=asdict(state.config),
                        rng=_rng_state(state.rng), extra=extra or {})
    ent = state.entropy1d
    return write_checkpoint(path, "wand", meta, {
        "flat": state.params.flat, "velocities": state.velocities,
        "entropy_edges": ent.edges, "entropy_values": ent.values, "entropy_visits": ent.visits})


def load_wand(path) -> tuple[WandState, dict]:
    meta, a = read_checkpoint(path, "wand")
    pv = _params_from(meta, a["flat"])
    cfg = WandConfig(**meta["optimizer"])
    ent = Entropy1D(a["entropy_edges"], a["entropy_values"], a["entropy_visits"])
    st = WandState(pv, a["velocities"], ent, cfg, _rng_from(meta["rng"]), int(meta["step"]))
    return st, meta


def _grid_meta(grid) -> dict:
    return {"deposit_widths": list(grid.deposit_widths), "F_WL": grid.F_WL, "t_WL": grid.t_WL,
            "bias_L0": grid.bias_L0, "bias_beta": grid.bias_beta, "bias_on_log": grid.bias_on_log,
            "reflect": grid.reflect, "deposited": grid.deposited, "boundary_hits": grid.boundary_hits}


def _grid_arrays(grid, prefix="") -> dict:
    return {prefix + "lnL_edges": grid.lnL_edges, prefix + "acc_edges": grid.acc_edges,
            prefix + "S": grid.S, prefix + "visits": grid.visits}


def _grid_from(meta: dict, a: dict, prefix=""):
    from .wlmd import EntropyGrid
    return EntropyGrid(a[prefix + "lnL_edges"], a[prefix + "acc_edges"], a[prefix + "S"],
                       a[prefix + "visits"], tuple(meta["deposit_widths"]), meta["F_WL"],
                       meta["t_WL"], meta["bias_L0"], meta["bias_beta"], meta["bias_on_log"],
                       meta["reflect"], meta["deposited"], meta["boundary_hits"])


def save_grid(path, grid) -> Path:
    return write_checkpoint(path, "grid", _grid_meta(grid), _grid_arrays(grid))


def load_grid(path):
    meta, a = read_checkpoint(path, "grid")
    return _grid_from(meta, a)


def _walker_meta(w) -> dict:
    return {"seed": w.seed, "t": w.t, "constraint": w.constraint.value, "radius": w.radius,
            "rng": _rng_state(w.rng)}


def _walker_from(meta: dict, q, v, bounds):
    from .wlmd import WalkerState
    return WalkerState(q, v, meta["seed"], _rng_from(meta["rng"]), meta["constraint"],
                       bounds, meta["radius"], meta["t"])


def save_walker(path, walker) -> Path:
    arrays = {"q": walker.q, "velocities": walker.velocities}
    if walker.bounds is not None:
        arrays["bounds"] = walker.bounds
    return write_checkpoint(path, "walker", _walker_meta(walker), arrays)


def load_walker(path):
    meta, a = read_checkpoint(path, "walker")
    return _walker_from(meta, a["q"], a["velocities"], a.get("bounds"))


def save_campaign_state(path, state: dict, config_json: str) -> Path:
    """One file holding the merged grid, every walker and the trajectories."""
    arrays: dict[str, Any] = _grid_arrays(state["grid"], "grid.")
    walkers_meta = []
    for k, w in enumerate(state["walkers"]):
        arrays[f"w{k}.q"] = w.q
        arrays[f"w{k}.velocities"] = w.velocities
        if w.bounds is not None:
            arrays[f"w{k}.bounds"] = w.bounds
        traj = np.asarray(state["trajectories"][k], dtype=np.float64).reshape(-1, 3)
        arrays[f"w{k}.trajectory"] = traj
        walkers_meta.append(_walker_meta(w))
    meta = {"config": json.loads(config_json), "grid": _grid_meta(state["grid"]),
            "walkers": walkers_meta, "failed": list(state["failed"]),
            "epochs_done": state["epochs_done"]}
    return write_checkpoint(path, "campaign", meta, arrays)


def load_campaign_state(path) -> tuple[dict, dict]:
    """Return ``(resume_state, config_dict)``."""
    meta, a = read_checkpoint(path, "campaign")
    grid = _grid_from(meta["grid"], a, "grid.")
    walkers, trajs = [], []
    for k, wm in enumerate(meta["walkers"]):
        walkers.append(_walker_from(wm, a[f"w{k}.q"], a[f"w{k}.velocities"], a.get(f"w{k}.bounds")))
        trajs.append([(int(t), float(x), float(y)) for t, x, y in a[f"w{k}.trajectory"]])
    state = {"grid": grid, "walkers": walkers, "trajectories": trajs,
             "failed": meta["failed"], "epochs_done": meta["epochs_done"]}
    return state, meta["config"]
