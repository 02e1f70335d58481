"""Byte-level dataset fixtures, built by hand rather than through the writers."""
import struct

# two 2x2 images; pixel bytes chosen to cover 0, 255 and values in between
IDX_PIXELS = bytes([0, 51, 102, 255,
                    17, 34, 200, 128])
IDX_LABELS = bytes([3, 9])


def idx_images(count=2, rows=2, cols=2, pixels=IDX_PIXELS, magic=0x00000803) -> bytes:
    return struct.pack(">IIII", magic, count, rows, cols) + pixels


def idx_labels(count=2, labels=IDX_LABELS, magic=0x00000801) -> bytes:
    return struct.pack(">II", magic, count) + labels


def cifar_record(label: int, first_pixel: int = 255, fill: int = 0) -> bytes:
    return bytes([label, first_pixel]) + bytes([fill]) * (3 * 32 * 32 - 1)


def write(path, data: bytes):
    path.write_bytes(data)
    return path
