"""Deterministic binary checkpoints for mid-training state.

A checkpoint holds everything needed to continue a run bit-for-bit: the
rank plan, every adapter factor, the classifier head, per-layer EMA norm
states, optimizer slots, random-stream positions, and the step counter.

Layout: magic, format version, a canonical JSON header (sorted keys, no
whitespace), then tensor payloads in the exact order the header lists.
Because every piece is ordered deterministically, save -> load -> save
reproduces identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError, ShapeError
from .numerics import Rng, read_tensor, tensor_to_bytes
from .prune_engine import EmaState

MAGIC = b"PRLC"
FORMAT_VERSION = 1

__all__ = ["MAGIC", "FORMAT_VERSION", "capture_state", "restore_state"]


def capture_state(
    model,
    optimizer,
    ema_input: Mapping[str, EmaState],
    ema_latent: Mapping[str, EmaState],
    step: int,
    rngs: Mapping[str, Rng],
) -> bytes:
    params = model.trainable()
    opt_state = optimizer.state_dict()

    tensors: list[tuple[str, np.ndarray]] = []
    for pname, t in params.items():
        tensors.append((f"param/{pname}", t.data))
    for name in sorted(ema_input):
        tensors.append((f"ema_input/{name}", ema_input[name].xbar))
    for name in sorted(ema_latent):
        tensors.append((f"ema_latent/{name}", ema_latent[name].xbar))
    for slot in opt_state["slots"]:
        for pname in params:
            tensors.append((f"opt/{slot}/{pname}", opt_state[slot][pname]))

    header = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "plan": {
            "ranks": list(model.plan.ranks),
            "budget_avg": model.plan.budget_avg,
        },
        "adapters": [
            {
                "name": name,
                "rank": pair.rank,
                "scale": pair.scale,
                "frozen_ref": pair.frozen_ref,
            }
            for name, pair in model.adapters.items()
        ],
        "ema_input": [
            {"name": name, "decay": ema_input[name].decay} for name in sorted(ema_input)
        ],
        "ema_latent": [
            {"name": name, "decay": ema_latent[name].decay} for name in sorted(ema_latent)
        ],
        "optimizer": {"kind": opt_state["kind"], "t": opt_state["t"], "slots": list(opt_state["slots"])},
        "rng": {tag: rngs[tag].get_state() for tag in sorted(rngs)},
        "tensors": [name for name, _ in tensors],
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(head_bytes))
    out += head_bytes
    for _, arr in tensors:
        out += tensor_to_bytes(arr)
    return bytes(out)


def _parse(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    (head_len,) = struct.unpack_from("<Q", blob, 8)
    head_end = 16 + head_len
    if len(blob) < head_end:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[16:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    fp = io.BytesIO(blob[head_end:])
    arrays: dict[str, np.ndarray] = {}
    for name in header["tensors"]:
        try:
            arrays[name] = read_tensor(fp).data
        except ShapeError as exc:
            raise FormatError(f"checkpoint tensor {name}: {exc}") from None
    if fp.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return header, arrays


def restore_state(
    blob: bytes,
    model,
    optimizer,
    ema_input: dict[str, EmaState],
    ema_latent: dict[str, EmaState],
    rngs: Mapping[str, Rng],
) -> int:
    """Load a checkpoint into live objects; returns the stored step.

    The model must already be built with the same plan and adapter layout;
    tensors are written in place so optimizer bindings stay valid.
    """
    header, arrays = _parse(blob)

    if list(model.plan.ranks) != header["plan"]["ranks"]:
        raise FormatError(
            f"checkpoint plan {header['plan']['ranks']} does not match model "
            f"plan {list(model.plan.ranks)}"
        )
    saved_adapters = {entry["name"]: entry for entry in header["adapters"]}
    if set(saved_adapters) != set(model.adapters):
        raise FormatError("checkpoint adapter set does not match the model")
    for name, pair in model.adapters.items():
        if saved_adapters[name]["rank"] != pair.rank:
            raise FormatError(f"adapter {name}: rank mismatch")

    params = model.trainable()
    for pname, t in params.items():
        key = f"param/{pname}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing tensor {key}")
        if arrays[key].shape != t.data.shape:
            raise FormatError(
                f"tensor {key}: saved shape {arrays[key].shape} != live {t.data.shape}"
            )
        t.data[...] = arrays[key]

    ema_input.clear()
    for entry in header["ema_input"]:
        ema_input[entry["name"]] = EmaState(
            arrays[f"ema_input/{entry['name']}"], decay=entry["decay"]
        )
    ema_latent.clear()
    for entry in header["ema_latent"]:
        ema_latent[entry["name"]] = EmaState(
            arrays[f"ema_latent/{entry['name']}"], decay=entry["decay"]
        )

    opt_meta = header["optimizer"]
    loaded = {"kind": opt_meta["kind"], "t": opt_meta["t"], "slots": list(opt_meta["slots"])}
    for slot in opt_meta["slots"]:
        loaded[slot] = {pname: arrays[f"opt/{slot}/{pname}"] for pname in params}
    optimizer.load_state_dict(loaded)

    saved_rng = header["rng"]
    for tag in saved_rng:
        if tag in rngs:
            rngs[tag].set_state(saved_rng[tag])
    return int(header["step"])
