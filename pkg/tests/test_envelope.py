import os
import stat

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmtrain import envelope as env

# AES-128-GCM reference vector (McGrew & Viega test case 3, no AAD).
KAT_KEY = bytes.fromhex("feffe9928665731c6d6a8f9467308308")
KAT_IV = bytes.fromhex("cafebabefacedbaddecaf888")
KAT_PT = bytes.fromhex(
    "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
    "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255"
)
KAT_CT = bytes.fromhex(
    "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
    "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985"
)
KAT_TAG = bytes.fromhex("4d5c2af327cd64a62cf35abd2ba6fab4")


def test_known_answer_encrypt(monkeypatch):
    monkeypatch.setattr(env.os, "urandom", lambda n: KAT_IV)
    e = env.encrypt(env.Key128(KAT_KEY), KAT_PT)
    assert (e.iv, e.mac, e.ciphertext) == (KAT_IV, KAT_TAG, KAT_CT)
    assert e.to_bytes() == KAT_IV + KAT_TAG + KAT_CT


def test_known_answer_decrypt():
    e = env.Envelope.from_bytes(KAT_IV + KAT_TAG + KAT_CT)
    assert env.decrypt(env.Key128(KAT_KEY), e) == KAT_PT


def test_key_generation():
    a, b = env.generate_key(), env.generate_key()
    assert len(a.key_bytes) == 16 and a != b
    assert "redacted" in repr(a) and a.key_bytes.hex() not in repr(a)
    with pytest.raises(ValueError):
        env.Key128(b"short")


def test_sizes(key):
    assert len(env.encrypt(key, bytes(64)).to_bytes()) == 92
    assert len(env.encrypt(key, b"")) == 28
    assert env.decrypt(key, env.encrypt(key, b"")) == b""


def test_fresh_iv_per_call(key):
    a, b = env.encrypt(key, b"same"), env.encrypt(key, b"same")
    assert a.iv != b.iv and a.ciphertext != b.ciphertext


@given(st.binary(max_size=4096))
def test_roundtrip(data):
    k = env.Key128(b"k" * 16)
    assert env.decrypt(k, env.Envelope.from_bytes(env.encrypt(k, data).to_bytes())) == data


def test_every_flipped_byte_is_detected(key):
    raw = env.encrypt(key, os.urandom(64)).to_bytes()
    for pos in range(len(raw)):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(env.IntegrityError):
            env.decrypt(key, env.Envelope.from_bytes(bad))


def test_wrong_key_and_truncation(key):
    e = env.encrypt(key, b"payload")
    with pytest.raises(env.IntegrityError):
        env.decrypt(env.generate_key(), e)
    with pytest.raises(env.IntegrityError):
        env.Envelope.from_bytes(e.to_bytes()[:27])
    with pytest.raises(env.IntegrityError):
        env.decrypt(key, env.Envelope.from_bytes(e.to_bytes()[:-1]))


@pytest.mark.parametrize("n,want", [(0, 0), (1, 28), (5, 140), (12, 336)])
def test_overhead(n, want):
    assert env.envelope_overhead(n) == want


def test_key_file_and_env(tmp_path, monkeypatch, key):
    path = tmp_path / "k"
    env.save_key(key, path)
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o600
    assert env.load_key(path) == key
    with pytest.raises(FileExistsError):
        env.save_key(key, path)
    monkeypatch.setenv(env.KEY_ENV, key.key_bytes.hex())
    assert env.load_key() == key
    monkeypatch.delenv(env.KEY_ENV)
    with pytest.raises(ValueError):
        env.load_key()
