"""Named random substreams derived from one user-visible seed."""
import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for component ``name`` (e.g. ``"crops"``, ``"init"``)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
