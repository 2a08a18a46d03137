"""Ordered, named parameter storage shared by the network, optimizer and I/O."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Checkpoint:
    """Named tensors in a deterministic order plus string metadata.

    ``version`` is bumped whenever parameters are updated in place; forward
    passes record it so that a backward pass can detect stale activations.
    It is not persisted.
    """

    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = field(default=0, compare=False)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self):
        return Checkpoint(
            {k: v.copy() for k, v in self.tensors.items()},
            dict(self.metadata),
        )

    def num_elements(self, names=None):
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def equals(self, other):
        """Bitwise equality of names, order, shapes, dtypes and payloads."""
        if list(self.tensors) != list(other.tensors):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return self.metadata == other.metadata

    def touch(self):
        self.version += 1


def zeros_like(ckpt, names=None):
    names = ckpt.names() if names is None else names
    return Checkpoint({n: np.zeros_like(ckpt[n]) for n in names})
