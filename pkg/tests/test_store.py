import hashlib

import pytest
from hypothesis import given, strategies as st

from carechain.errors import NotFoundError
from carechain.store import ContentStore, parse_address


@pytest.fixture(params=["memory", "disk"])
def store(request, tmp_path):
    return ContentStore(None if request.param == "memory" else tmp_path / "s")


def test_address_is_sha256(store):
    addr = store.put(b"hello")
    assert addr == hashlib.sha256(b"hello").digest()
    assert store.get(addr) == b"hello"
    assert store.verify(addr, b"hello") and not store.verify(addr, b"hellp")


def test_dedup_and_immutability(store):
    a = store.put(b"v1")
    b = store.put(b"v2", prev_version=a)
    assert store.put(b"v1") == a and len(store) == 2
    # re-putting v2 with another link must not rewrite the existing link
    c = store.put(b"v3")
    assert store.put(b"v2", prev_version=c) == b
    assert store.prev_version(b) == a


def test_history_newest_first(store):
    a = store.put(b"v1")
    b = store.put(b"v2", a)
    c = store.put(b"v3", b)
    assert store.history(c) == [c, b, a]
    assert store.prev_version(a) is None
    assert store.addresses() == sorted([a, b, c])


def test_missing_objects(store):
    with pytest.raises(NotFoundError):
        store.get(bytes(32))
    with pytest.raises(NotFoundError):
        store.put(b"x", prev_version=bytes(32))
    with pytest.raises(NotFoundError):
        store.prev_version(bytes(32))


def test_disk_store_reopens(tmp_path):
    s = ContentStore(tmp_path / "s")
    a = s.put(b"one")
    b = s.put(b"two", a)
    again = ContentStore(tmp_path / "s")
    assert again.get(b) == b"two" and again.history(b) == [b, a]


def test_parse_address():
    addr = hashlib.sha256(b"x").digest()
    assert parse_address(addr.hex()) == addr
    for bad in ("zz", "ab"):
        with pytest.raises(NotFoundError):
            parse_address(bad)


@given(st.lists(st.binary(max_size=40), max_size=20))
def test_get_returns_put(blobs):
    s = ContentStore()
    addrs = [s.put(b) for b in blobs]
    assert [s.get(a) for a in addrs] == blobs
    assert len(s) == len(set(blobs))
