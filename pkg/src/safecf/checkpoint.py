"""Weight-file container: one canonical JSON header line, then raw arrays.

Layout: a single line of UTF-8 JSON (sorted keys, no whitespace) terminated
by ``\\n``, followed by the concatenated little-endian float32 buffers of
every array in declaration order. The header carries the array names and
shapes, a content hash over config + weights, and arbitrary extra metadata.
Saving a loaded file reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(config: dict, arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    digest.update(canonical_json(config).encode("utf-8"))
    digest.update(b"\0")
    for name, arr in arrays.items():
        digest.update(name.encode("utf-8"))
        digest.update(b"\0")
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    kind: str  # "agent" | "generator" | "critic"
    env_id: str
    config: dict
    arrays: dict[str, np.ndarray]  # insertion order == declaration order
    extra: dict = field(default_factory=dict)
    hash: str = ""

    def __post_init__(self):
        if not self.hash:
            self.hash = content_hash(self.config, self.arrays)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format": "safecf-checkpoint-v1",
        "kind": ckpt.kind,
        "env_id": ckpt.env_id,
        "config": ckpt.config,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in ckpt.arrays.items()],
        "hash": ckpt.hash,
        "extra": ckpt.extra,
    }
    with open(path, "wb") as f:
        f.write(canonical_json(header).encode("utf-8"))
        f.write(b"\n")
        for arr in ckpt.arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format") != "safecf-checkpoint-v1":
            raise IntegrityError(f"{path} is not a safecf checkpoint")
        blob = f.read()

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise IntegrityError(f"truncated checkpoint {path}: array {spec['name']}")
        arrays[spec["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise IntegrityError(f"trailing bytes in checkpoint {path}")

    ckpt = Checkpoint(
        kind=header["kind"],
        env_id=header["env_id"],
        config=header["config"],
        arrays=arrays,
        extra=header.get("extra", {}),
        hash=header["hash"],
    )
    expected = content_hash(ckpt.config, ckpt.arrays)
    if expected != ckpt.hash:
        raise IntegrityError(f"hash mismatch in {path}")
    return ckpt


def module_arrays(module) -> dict[str, np.ndarray]:
    """State dict of a torch module as float32 numpy arrays, in declaration order."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(module, arrays: dict[str, np.ndarray]) -> None:
    import torch

    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state)
