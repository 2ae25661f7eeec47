"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, lane)`` whose counter's
top words encode ``(domain, step)``. A node's stream at step ``t`` therefore
depends only on ``(seed, node, t)``: neither the node count nor the execution
mode can change the random sequence a node sees.
"""

import numpy as np

# counter domains; one per consumer so streams never overlap
ENGINE = 0
DATA = 1
PARTITION = 2
ESTIMATE = 3
INIT = 4

_U64 = 2**64


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < _U64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed, *, lane=0, step=0, domain=ENGINE):
    """Return a fresh ``numpy.random.Generator`` for one (lane, step) slot."""
    seed = check_seed(seed)
    key = np.array([seed, lane], dtype=np.uint64)
    counter = np.array([0, 0, domain, step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def node_stream(seed, node_id, t):
    return stream(seed, lane=node_id, step=t, domain=ENGINE)
