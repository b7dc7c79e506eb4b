"""Self-describing checkpoint container for the three model kinds.

Layout: magic, 4-byte big-endian header length, canonical JSON header, then
raw little-endian tensor bytes. The encoding is fully deterministic, so two
checkpoints of the same model bytes-compare equal and can be digest-checked.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import models
from .data import EmotionClass

MAGIC = b"ECGRCKPT1\n"


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


def config_hash(config: Any) -> str:
    """Stable sha256 over a config dataclass or mapping, for checkpoint audit."""
    if hasattr(config, "__dataclass_fields__"):
        payload = {k: getattr(config, k) for k in sorted(config.__dataclass_fields__)}
    elif isinstance(config, dict):
        payload = config
    else:
        payload = {"value": str(config)}
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _arch_of(model) -> dict[str, Any]:
    if isinstance(model, models.ClassifierModel):
        return {"kind": "classifier", "num_classes": model.num_classes,
                "image_size": model.image_size, "width": model.width,
                "trainable_scope": model.trainable_scope}
    if isinstance(model, models.GeneratorModel):
        return {"kind": "generator", "noise_dim": model.noise_dim,
                "image_size": model.image_shape[0], "class_tag": model.class_tag.label,
                "gen_id": model.gen_id, "width": model.net.base_channels}
    if isinstance(model, models.CriticModel):
        return {"kind": "critic", "image_size": model.image_size,
                "width": model.net.blocks[0].out_channels}
    raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model, path: str | Path, *, config_hash: str = "",
                    seed: int | None = None) -> Path:
    """Write architecture descriptor, parameters, counts, config hash, and seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    state = getattr(model, "net").state_dict()
    tensors = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": arr.nbytes})
        payload += arr.tobytes()

    header = {
        "format": "ecgr-checkpoint-v1",
        "arch": _arch_of(model),
        "descriptor": list(getattr(model, "descriptor", ())),
        "param_count": models.count_all_parameters(model),
        "trainable_param_count": models.count_parameters(model),
        "config_hash": config_hash,
        "seed": seed,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(4, "big"))
        fh.write(head)
        fh.write(bytes(payload))
    return path


def read_header(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not an ecgr checkpoint")
        head_len = int.from_bytes(fh.read(4), "big")
        return json.loads(fh.read(head_len).decode("utf-8"))


def load_checkpoint(path: str | Path):
    """Rebuild the model from its architecture descriptor and restore parameters."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not an ecgr checkpoint")
        head_len = int.from_bytes(fh.read(4), "big")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        payload = fh.read()

    arch = header["arch"]
    kind = arch["kind"]
    if kind == "classifier":
        model = models.build_classifier(arch["num_classes"], arch["image_size"],
                                        width=arch["width"])
    elif kind == "generator":
        model = models.build_generator(arch["noise_dim"], arch["image_size"],
                                       EmotionClass.from_name(arch["class_tag"]),
                                       width=arch["width"])
        model.gen_id = arch["gen_id"]
    elif kind == "critic":
        model = models.build_critic(arch["image_size"], width=arch["width"])
    else:
        raise CheckpointError(f"unknown checkpoint kind: {kind!r}")

    state = {}
    for spec in header["tensors"]:
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
        state[spec["name"]] = torch.from_numpy(arr)
    model.net.load_state_dict(state)
    if kind == "classifier" and arch.get("trainable_scope", "all") != "all":
        model.set_trainable_scope(arch["trainable_scope"])
    return model


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
