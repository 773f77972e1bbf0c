"""Named deterministic random streams.

All randomness in a run funnels through one root seed. Each stochastic
site (mask sampling, scale sampling, weight init, shuffling, ...) asks
for a stream by name and gets an independent counter-based generator
whose key is derived from (seed, name) with a stable hash. Toggling one
consumer therefore never perturbs the draws seen by another, which is
what makes ablation cells comparable.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngPool", "derive_generator"]


def _name_words(name: str) -> list[int]:
    # sha256 rather than hash(): stable across processes and platforms
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_generator(seed: int, name: str) -> np.random.Generator:
    """Build a fresh Philox generator keyed by (seed, name)."""
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF] + _name_words(name)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class RngPool:
    """Pool of named, independently derived random streams.

    Streams are created lazily and cached, so a stream advances across
    calls; `state()`/`set_state()` round-trip every stream that has been
    touched, which is what checkpoint resume relies on.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = derive_generator(self.seed, name)
            self._streams[name] = gen
        return gen

    def spawn(self, name: str) -> np.random.Generator:
        """Fresh, uncached generator (for e.g. per-image parallel work)."""
        return derive_generator(self.seed, name)

    def state(self) -> dict:
        """JSON-serializable snapshot of all touched streams."""
        out = {"seed": self.seed, "streams": {}}
        for name, gen in sorted(self._streams.items()):
            out["streams"][name] = _state_to_jsonable(gen.bit_generator.state)
        return out

    def set_state(self, snapshot: dict) -> None:
        if int(snapshot["seed"]) != self.seed:
            raise ValueError(
                f"rng snapshot was taken with seed {snapshot['seed']}, pool has {self.seed}"
            )
        for name, st in snapshot["streams"].items():
            gen = derive_generator(self.seed, name)
            gen.bit_generator.state = _state_from_jsonable(st)
            self._streams[name] = gen


def _state_to_jsonable(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict):
            out[key] = _state_to_jsonable(val)
        elif isinstance(val, np.ndarray):
            out[key] = {"__ndarray__": val.tolist(), "dtype": str(val.dtype)}
        elif isinstance(val, np.integer):
            out[key] = int(val)
        else:
            out[key] = val
    return out


def _state_from_jsonable(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict) and "__ndarray__" in val:
            out[key] = np.array(val["__ndarray__"], dtype=val["dtype"])
        elif isinstance(val, dict):
            out[key] = _state_from_jsonable(val)
        else:
            out[key] = val
    return out
