"""Little-endian container helpers: magic + u32 version header, trailing CRC32."""
import struct
import zlib

from .errors import BadMagic, ChecksumMismatch, TruncatedFile, VersionMismatch


def pack_header(magic, version, fmt, *fields):
    return magic + struct.pack("<I", version) + struct.pack(fmt, *fields)


def write_with_crc(path, payload):
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(crc)


def read_verified(path):
    with open(path, "rb") as fh:
        return fh.read()


def require_length(data, expected):
    """Raise TruncatedFile if short; verify the trailing CRC otherwise."""
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(data)}")
    body, (crc,) = data[: expected - 4], struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc or len(data) != expected:
        raise ChecksumMismatch("CRC32 mismatch or trailing bytes")


def unpack_header(data, magic, version, fmt):
    """Check magic/version and unpack the fixed header; returns (fields, offset)."""
    if len(data) < len(magic) or data[: len(magic)] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:len(magic)]!r}")
    off = len(magic)
    need = off + 4 + struct.calcsize(fmt)
    if len(data) < need:
        raise TruncatedFile(f"header needs {need} bytes, found {len(data)}")
    (ver,) = struct.unpack_from("<I", data, off)
    if ver != version:
        raise VersionMismatch(f"expected version {version}, found {ver}")
    off += 4
    fields = struct.unpack_from(fmt, data, off)
    return fields, off + struct.calcsize(fmt)
