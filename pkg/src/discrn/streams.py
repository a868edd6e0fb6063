"""Counter-based random streams keyed by integer index tuples.

Every random draw in the library comes from ``stream(seed, *keys)``.  The
generator is Philox (a 64-bit counter-based bit generator) seeded through a
``SeedSequence`` whose spawn key is the index tuple, so a stream depends only
on ``(seed, keys)`` and never on the order in which streams are created.
That property is what makes parallel and sequential batch assembly agree
bit-for-bit and lets several methods share the same realizations.
"""

import numpy as np

# Top-level stream namespaces.
SCENARIO = 0
BATCH = 1
EVALUATION = 2
GRAPH = 3
ORACLE_CHECK = 4


def stream(seed, *keys):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
