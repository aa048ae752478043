"""Deterministic counter-based random streams.

Every random draw in this package comes from a Philox-4x64-10 generator
(the counter-based generator of Salmon et al., as implemented by
``numpy.random.Philox``) keyed by a ``(seed, stream)`` pair:

    key     = [seed, stream]      (two little-endian 64-bit words)
    counter = 0 at stream start

The stream word packs a domain tag and up to three 16-bit sub-fields:

    stream = domain << 48 | a << 32 | b << 16 | c

so that, for example, the shuffle order of client 3 in round 12, epoch 1
is an independent, addressable stream. Results therefore do not depend on
the order in which streams are consumed, which is what makes concurrent
and sequential client execution bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

# Domain tags. Values are part of the on-disk/golden-file contract; do not
# renumber without regenerating golden files.
BACKBONE_INIT = 1
ADAPTER_INIT = 2
CLASS_PROTOTYPES = 3
SAMPLE_NOISE = 4
PARTITION = 5
FEW_SHOT = 6
SHUFFLE = 7
PARTICIPANTS = 8
PRETRAIN = 9
GRADCHECK = 10
DOMAIN_MAPS = 11

_FIELD_MAX = 1 << 16


def stream_id(domain: int, a: int = 0, b: int = 0, c: int = 0) -> int:
    """Pack a domain tag and three 16-bit fields into one stream word."""
    for name, value in (("domain", domain), ("a", a), ("b", b), ("c", c)):
        if not 0 <= value < _FIELD_MAX:
            raise ContractError(f"stream field {name}={value} outside [0, 65536)")
    return domain << 48 | a << 32 | b << 16 | c


def stream(seed: int, domain: int, a: int = 0, b: int = 0, c: int = 0) -> np.random.Generator:
    """Return the Philox generator addressed by (seed, domain, a, b, c)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream_id(domain, a, b, c))])
    return np.random.Generator(np.random.Philox(key=key))
