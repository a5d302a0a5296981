"""
Counter-based random streams.

Every random number used by a simulation is addressed by a key derived from
``(seed, names...)`` and an absolute position in a Philox stream. Values never
depend on how draws are chunked or which thread asks for them.
"""

import hashlib
from functools import cached_property
from typing import Tuple, Union

import attr
import numpy as np

# Philox emits four 64-bit words per counter increment
WORDS_PER_COUNTER = 4

Name = Union[int, str]


def _name_to_int(name: Name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"stream names must be non-negative, got {name}")
        return int(name)
    if not name:
        raise ValueError("stream name must be non-empty")
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def derive_seed(base_seed: int, repetition: int) -> int:
    """Stable per-repetition seed derived from one base seed."""
    if repetition < 0:
        raise ValueError("repetition must be non-negative")
    sequence = np.random.SeedSequence(entropy=base_seed, spawn_key=(repetition,))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@attr.s(frozen=True)
class CounterStream:
    seed = attr.ib(type=int, converter=int)
    names = attr.ib(type=tuple, converter=tuple, factory=tuple)

    @seed.validator
    def _check_seed(self, attribute, value):
        if value < 0:
            raise ValueError(f"seed must be non-negative, got {value}")

    def child(self, *names: Name) -> "CounterStream":
        return CounterStream(self.seed, self.names + tuple(names))

    @cached_property
    def key(self) -> np.ndarray:
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_name_to_int(n) for n in self.names)
        )
        return sequence.generate_state(2, dtype=np.uint64)

    def raw(self, offset: int, count: int) -> np.ndarray:
        """64-bit words at positions [offset, offset + count)."""
        if offset < 0 or count < 0:
            raise ValueError("offset and count must be non-negative")
        start, skip = divmod(int(offset), WORDS_PER_COUNTER)
        bit_generator = np.random.Philox(key=self.key, counter=start)
        return bit_generator.random_raw(skip + int(count))[skip:]

    def uniforms(self, offset: int, count: int) -> np.ndarray:
        """Uniforms in the open interval (0, 1), one per 64-bit word."""
        words = self.raw(offset, count)
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def generator(self) -> np.random.Generator:
        """
        Sequential generator for draws consumed in order by a single owner.
        """
        return np.random.Generator(np.random.Philox(key=self.key))

    def split(self, count: int) -> Tuple["CounterStream", ...]:
        return tuple(self.child(i) for i in range(count))
