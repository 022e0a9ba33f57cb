"""
CTRForge Utility Functions
Helpers for size-prefixed binary framing and file checksums.
"""

import hashlib
import struct

from errors import CheckpointError


def read_exact(stream, num_bytes):
    """
    Read an exact number of bytes from a binary stream.
    Handles short reads until complete.

    Args:
        stream: Binary file-like object
        num_bytes: Exact number of bytes to read

    Returns:
        bytes: The requested data

    Raises:
        CheckpointError: If the stream ends early
    """
    data = b''
    while len(data) < num_bytes:
        # Request remaining bytes
        packet = stream.read(num_bytes - len(data))
        if not packet:
            raise CheckpointError(f"unexpected end of file: wanted {num_bytes} bytes, got {len(data)}")
        data += packet
    return data


def write_with_size(stream, data):
    """
    Write data prefixed with a 4-byte size header.
    Format: [4-byte little-endian size][data]

    Args:
        stream: Binary file-like object
        data: Payload bytes
    """
    stream.write(struct.pack('<I', len(data)) + data)


def read_with_size(stream):
    """
    Read data prefixed with a 4-byte size header.
    Complements write_with_size.

    Args:
        stream: Binary file-like object

    Returns:
        bytes: The payload
    """
    size = struct.unpack('<I', read_exact(stream, 4))[0]
    return read_exact(stream, size)


def write_uint32(stream, value):
    stream.write(struct.pack('<I', value))


def read_uint32(stream):
    return struct.unpack('<I', read_exact(stream, 4))[0]


def write_int64s(stream, values):
    """Write a count-prefixed sequence of little-endian signed 64-bit integers."""
    values = [int(v) for v in values]
    write_uint32(stream, len(values))
    stream.write(struct.pack(f'<{len(values)}q', *values))


def read_int64s(stream):
    count = read_uint32(stream)
    return list(struct.unpack(f'<{count}q', read_exact(stream, 8 * count)))


def file_sha256(path, chunk_size=1 << 20):
    """
    Compute the SHA-256 hex digest of a file.

    Args:
        path: File to hash
        chunk_size: Read size per iteration

    Returns:
        str: Hex digest
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def text_sha256(text):
    """SHA-256 hex digest of a string (used for synthetic data descriptors)."""
    return hashlib.sha256(text.encode('utf-8')).hexdigest()
