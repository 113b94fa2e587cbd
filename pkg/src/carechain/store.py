"""Content-addressed blob store with version links.

Objects live in memory, or on disk with one file per address when a root
directory is given::

    <root>/objects/<hex address>
    <root>/links/<hex address>      # hex address of the previous version
"""

from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Optional, Union

from .crypto import digest
from .errors import NotFoundError, StorageIOError


def parse_address(text: str) -> bytes:
    try:
        addr = bytes.fromhex(text)
    except ValueError:
        raise NotFoundError(f"not a hex address: {text!r}") from None
    if len(addr) != 32:
        raise NotFoundError(f"address must be 32 bytes, got {len(addr)}")
    return addr


class ContentStore:

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root) if root is not None else None
        self._objects: dict[bytes, bytes] = {}
        self._links: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            try:
                (self.root / "objects").mkdir(parents=True, exist_ok=True)
                (self.root / "links").mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageIOError(f"cannot create store at {self.root}: {exc}") from None

    def __contains__(self, addr: bytes) -> bool:
        if addr in self._objects:
            return True
        return self.root is not None and (self.root / "objects" / addr.hex()).exists()

    def __len__(self) -> int:
        if self.root is None:
            return len(self._objects)
        return len(os.listdir(self.root / "objects"))

    def put(self, data: bytes, prev_version: Optional[bytes] = None) -> bytes:
        """Store ``data``; identical bytes always land on the same address.

        Objects are immutable: re-putting existing bytes leaves their version
        link untouched.
        """
        data = bytes(data)
        addr = digest(data)
        if prev_version is not None and prev_version not in self:
            raise NotFoundError(f"previous version {prev_version.hex()} is not stored")
        with self._lock:
            if addr in self:
                return addr
            if self.root is None:
                self._objects[addr] = data
                if prev_version is not None:
                    self._links[addr] = prev_version
                return addr
            try:
                if prev_version is not None:
                    (self.root / "links" / addr.hex()).write_text(prev_version.hex())
                tmp = self.root / "objects" / (addr.hex() + ".tmp")
                tmp.write_bytes(data)
                tmp.replace(self.root / "objects" / addr.hex())
            except OSError as exc:
                raise StorageIOError(f"cannot write object {addr.hex()}: {exc}") from None
            return addr

    def get(self, addr: bytes) -> bytes:
        if addr in self._objects:
            return self._objects[addr]
        if self.root is not None:
            path = self.root / "objects" / addr.hex()
            if path.exists():
                return path.read_bytes()
        raise NotFoundError(f"no object at {addr.hex()}")

    def verify(self, addr: bytes, data: bytes) -> bool:
        return digest(data) == addr

    def prev_version(self, addr: bytes) -> Optional[bytes]:
        if addr not in self:
            raise NotFoundError(f"no object at {addr.hex()}")
        if addr in self._links:
            return self._links[addr]
        if self.root is not None:
            link = self.root / "links" / addr.hex()
            if link.exists():
                return bytes.fromhex(link.read_text().strip())
        return None

    def history(self, addr: bytes) -> list[bytes]:
        """Addresses from ``addr`` back to the first version, newest first."""
        out = [addr]
        prev = self.prev_version(addr)
        while prev is not None:
            out.append(prev)
            prev = self.prev_version(prev)
        return out

    def addresses(self) -> list[bytes]:
        if self.root is None:
            return sorted(self._objects)
        return sorted(bytes.fromhex(p.name) for p in (self.root / "objects").iterdir()
                      if not p.name.endswith(".tmp"))
