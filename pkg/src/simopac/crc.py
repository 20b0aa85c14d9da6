"""CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no final xor)."""

from __future__ import annotations

import binascii


def crc16_ccitt_false(data: bytes) -> int:
    # binascii.crc_hqx is the unreflected 0x1021 CRC with a caller-supplied init.
    return binascii.crc_hqx(data, 0xFFFF)
