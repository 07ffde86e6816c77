import zlib

import numpy as np
import torch

"""
Seed splitting.

Every stochastic component draws from its own stream derived from
(run seed, component tag, index). Adding a component never shifts the draws
of an existing one, and the same triple always yields the same stream.
"""


def stream_key(seed: int, component: str, index: int = 0) -> list:
    return [int(seed), zlib.crc32(component.encode('utf-8')), int(index)]


def derive_rng(seed: int, component: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(stream_key(seed, component, index)))


def derive_int(seed: int, component: str, index: int = 0) -> int:
    """32-bit integer seed for libraries that take a plain int (torch, scikit-learn)."""
    return int(np.random.SeedSequence(stream_key(seed, component, index)).generate_state(1)[0])


def torch_generator(seed: int, component: str, index: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_int(seed, component, index))
    return g
