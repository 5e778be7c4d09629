"""Binary checkpoint container.

Layout: 4-byte magic, u32 format version, u32 header length, a UTF-8 JSON
header (sorted keys) describing every array, then the arrays as raw
little-endian float64 in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gail import ModelBundle, TrainConfig, build_bundle
from ..layers import load_into

MAGIC = b"PPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    variant: str
    dims: dict                       # num_actions, obs_dim, z_dim, state_dim
    arrays: dict                     # name -> float64 array
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: int = VERSION

    def header(self):
        entries, offset = [], 0
        for name in sorted(self.arrays):
            a = self.arrays[name]
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            offset += int(a.size) * 8
        return {"version": self.version, "variant": self.variant, "dims": self.dims,
                "config": self.config, "seed": self.seed, "arrays": entries}

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(np.ascontiguousarray(self.arrays[n], dtype="<f8").tobytes() for n in sorted(self.arrays))
        return _PREFIX.pack(MAGIC, self.version, len(head)) + head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _PREFIX.size:
            raise CheckpointError("file too short for a checkpoint header")
        magic, version, hlen = _PREFIX.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size + hlen
        try:
            head = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable header: {e}") from None
        body = raw[start:]
        arrays, expected = {}, 0
        for e in head["arrays"]:
            name, shape, count = e["name"], tuple(e["shape"]), e["count"]
            if int(np.prod(shape, dtype=np.int64)) != count:
                raise CheckpointError(f"array {name!r}: shape {shape} does not hold {count} values")
            if e["offset"] != expected or e["offset"] + 8 * count > len(body):
                raise CheckpointError(f"array {name!r}: data truncated or misplaced")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]) \
                .astype(np.float64).reshape(shape)
            expected += 8 * count
        if expected != len(body):
            raise CheckpointError(f"{len(body) - expected} trailing bytes after the last array")
        ck = cls(head["variant"], head["dims"], arrays, head["config"], head["seed"], version)
        ck.validate()
        return ck

    def validate(self):
        d = self.dims
        for key in ("num_actions", "obs_dim", "z_dim", "state_dim"):
            if key not in d:
                raise CheckpointError(f"dims missing {key!r}")
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise CheckpointError(f"array {name!r} has non-finite entries")
        # the declared dims must agree with the parameters they shape
        expected = _bundle_shapes(self)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise CheckpointError(f"missing array {name!r}")
            if self.arrays[name].shape != shape:
                raise CheckpointError(f"array {name!r}: shape {self.arrays[name].shape} "
                                      f"does not match declared dims ({shape})")
        extra = set(self.arrays) - set(expected)
        if extra:
            raise CheckpointError(f"unexpected arrays {sorted(extra)}")


def _fresh_bundle(ck: Checkpoint) -> ModelBundle:
    cfg = TrainConfig(**ck.config) if ck.config else TrainConfig(z_dim=ck.dims["z_dim"])
    if cfg.z_dim != ck.dims["z_dim"]:
        raise CheckpointError(f"config z_dim {cfg.z_dim} disagrees with dims z_dim {ck.dims['z_dim']}")
    try:
        return build_bundle(ck.variant, ck.dims["obs_dim"], ck.dims["num_actions"], cfg)
    except ValueError as e:
        raise CheckpointError(str(e)) from None


def _bundle_shapes(ck):
    return {k: p.shape for k, p in _fresh_bundle(ck).named_parameters().items()}


def from_bundle(bundle: ModelBundle) -> Checkpoint:
    arrays = {k: p.data.copy() for k, p in bundle.named_parameters().items()}
    dims = {"num_actions": bundle.num_actions, "obs_dim": bundle.obs_dim, "z_dim": bundle.z_dim,
            "state_dim": bundle.obs_dim}
    return Checkpoint(bundle.variant, dims, arrays, _jsonable(bundle.config), bundle.seed)


def to_bundle(ck: Checkpoint) -> ModelBundle:
    bundle = _fresh_bundle(ck)
    load_into(bundle.named_parameters(), ck.arrays)
    bundle.seed = ck.seed
    return bundle


def _jsonable(x):
    return json.loads(json.dumps(x))


def save_checkpoint(obj, path):
    ck = from_bundle(obj) if isinstance(obj, ModelBundle) else obj
    Path(path).write_bytes(ck.to_bytes())
    return ck


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_bundle(path) -> ModelBundle:
    return to_bundle(load_checkpoint(path))
