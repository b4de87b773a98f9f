"""Named parameter collections with per-name seeded init and checkpoint IO.

Each parameter's initial values are drawn from an RNG keyed on
(init_seed, name), so adding or reordering parameters never shifts the
values of existing ones. Checkpoints are text files with hex-encoded raw
float64 bytes per parameter: diffable and bit-exact on round trip.
"""

from __future__ import annotations

import binascii
import hashlib
import json
import math

import numpy as np

from .autodiff import ContractError, Tensor

CHECKPOINT_MAGIC = "dualground-checkpoint"
CHECKPOINT_VERSION = 1


def _name_entropy(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class ParamStore:
    def __init__(self, init_seed: int):
        self.init_seed = int(init_seed)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.init_seed, spawn_key=(_name_entropy(name),))
        )

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data = self._rng(name).uniform(-bound, bound, size=(fan_in, fan_out))
        return self._register(name, data)

    def normal(self, name: str, shape, std: float = 0.3) -> Tensor:
        data = self._rng(name).normal(0.0, std, size=shape)
        return self._register(name, data)

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy_from(self, other: "ParamStore", prefix: str = "") -> int:
        """Overwrite values of all own parameters under ``prefix`` that the
        other store also has. Returns the number of tensors copied."""
        copied = 0
        for name, t in self._params.items():
            if name.startswith(prefix) and name in other._params:
                src = other._params[name]
                if src.data.shape != t.data.shape:
                    raise ContractError(f"copy_from: shape mismatch for {name!r}")
                t.data = src.data.copy()
                copied += 1
        return copied

    # -- checkpoint IO ------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
        lines.append(f"seed {self.init_seed}")
        lines.append("meta " + json.dumps(meta or {}, sort_keys=True))
        for name, t in self._params.items():
            shape = ",".join(str(s) for s in t.data.shape)
            payload = binascii.hexlify(np.ascontiguousarray(t.data).tobytes()).decode()
            lines.append(f"param {name} {shape} {payload}")
        lines.append("end")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
            raise ContractError(f"not a version-{CHECKPOINT_VERSION} checkpoint: {path}")
        if lines[-1] != "end":
            raise ContractError(f"truncated checkpoint: {path}")
        seed = int(lines[1].split(" ", 1)[1])
        meta = json.loads(lines[2].split(" ", 1)[1])
        store = cls(seed)
        for line in lines[3:-1]:
            kind, name, shape_s, payload = line.split(" ", 3)
            if kind != "param":
                raise ContractError(f"unexpected checkpoint line kind {kind!r}")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            data = np.frombuffer(binascii.unhexlify(payload), dtype=np.float64)
            store._register(name, data.reshape(shape).copy())
        return store, meta
