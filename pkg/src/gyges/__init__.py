"""Deniable storage on a file-backed block device.

Layers, bottom up: :mod:`block_store` (image file), :mod:`crypto` (sector
encryption), :mod:`thin_pool` (chunk allocator), :mod:`volumes` (outer,
hidden and null-sink volumes) and :mod:`mount_service` (token-gated
mounts). :mod:`adversary` and :mod:`bench` exercise the stack.
"""

__version__ = "0.1.0"
