import base64
import json

import numpy as np
import pytest
import torch

from errors import (
    ArgumentError,
    DomainError,
    GeometryError,
    KeyMaterialError,
    SignatureFormatError,
)
from sn_core import (
    OwnerIdentity,
    SignatureRecord,
    SNPattern,
    derive_bits,
    generate_keypair,
    generate_serial,
    load_private_key,
    perturb_pattern,
    stamp,
    stamp_images,
    verify_signature,
)

from conftest import TIMESTAMP


def test_generate_serial_is_deterministic(identity):
    p1, r1 = generate_serial(identity, 3, 3, (0, 0))
    p2, r2 = generate_serial(identity, 3, 3, (0, 0))
    assert p1 == p2
    assert r1.dict() == r2.dict()
    assert r1.record_hash() == r2.record_hash()


def test_generate_serial_geometry(identity):
    pattern, record = generate_serial(identity, 3, 3, (0, 0))
    assert record.derivation["pattern_rows"] == 3
    assert len(record.pattern_bits) == 9
    assert pattern.n_active == 9
    assert (pattern.numpy() == -1).sum() == 0
    assert pattern.bits() == record.pattern_bits


def test_block_is_row_major(identity):
    pattern, record = generate_serial(identity, 2, 5, (1, 2))
    bits = [int(b) for b in record.pattern_bits]
    for i in range(2):
        for j in range(5):
            assert pattern.block[i][j] == bits[i * 5 + j]
    assert pattern.anchor == (1, 2)


def test_seeded_keys_are_reproducible(tmp_path):
    a = generate_keypair(str(tmp_path / "a.pem"), seed=b"same")
    b = generate_keypair(str(tmp_path / "b.pem"), seed=b"same")
    assert a.sign(b"v") == b.sign(b"v")
    loaded = load_private_key(str(tmp_path / "a.pem"))
    assert loaded.sign(b"v") == a.sign(b"v")


def test_missing_key_raises(tmp_path):
    identity = OwnerIdentity(
        owner_name="Acme", timestamp=TIMESTAMP, keypair_ref=str(tmp_path / "nope.pem")
    )
    with pytest.raises(KeyMaterialError) as e:
        generate_serial(identity)
    assert "nope.pem" in str(e.value)
    assert e.value.exit_code == 3


def test_identity_validation(key_file):
    with pytest.raises(ValueError):
        OwnerIdentity(owner_name=" ", timestamp=TIMESTAMP, keypair_ref=key_file)
    with pytest.raises(ValueError):
        OwnerIdentity(owner_name="Acme", timestamp="yesterday", keypair_ref=key_file)
    z = OwnerIdentity(owner_name="Acme", timestamp="2024-01-01T00:00:00Z", keypair_ref=key_file)
    assert z.verifier == "Acme|2024-01-01T00:00:00Z"


def test_anchor_out_of_declared_image(identity):
    with pytest.raises(GeometryError):
        generate_serial(identity, 3, 3, (26, 0), image_shape=(28, 28))
    generate_serial(identity, 3, 3, (25, 25), image_shape=(28, 28))


def test_different_timestamps_give_different_patterns(key_file):
    base = OwnerIdentity(owner_name="Acme", timestamp=TIMESTAMP, keypair_ref=key_file)
    reference, _ = generate_serial(base)
    n_trials, differ = 1000, 0
    for i in range(1, n_trials + 1):
        other = OwnerIdentity(
            owner_name="Acme",
            timestamp=f"2024-01-01T{i // 3600:02d}:{i // 60 % 60:02d}:{i % 60:02d}+00:00",
            keypair_ref=key_file,
        )
        pattern, _ = generate_serial(other)
        differ += pattern != reference
    assert differ / n_trials >= 0.99


def test_pattern_bit_entropy(key_file):
    counts = np.zeros(9)
    n = 1000
    for i in range(n):
        identity = OwnerIdentity(owner_name=f"owner-{i}", timestamp=TIMESTAMP, keypair_ref=key_file)
        pattern, _ = generate_serial(identity)
        counts += pattern.numpy().reshape(-1)
    ratios = counts / n
    assert np.all(ratios >= 0.4) and np.all(ratios <= 0.6)


def test_derive_bits_extends_past_digest():
    signature = bytes(range(64))
    long = derive_bits(signature, 300)
    assert len(long) == 300
    assert long[:256] == derive_bits(signature, 256)
    with pytest.raises(ArgumentError):
        derive_bits(signature, 9, "not-a-hash")


def test_verify_accepts_generated_record(identity):
    _, record = generate_serial(identity)
    assert verify_signature(record)


def test_verify_rejects_flipped_signature_byte(identity):
    _, record = generate_serial(identity)
    sig = bytearray(record.signature())
    sig[10] ^= 0x01
    tampered = record.copy(update=dict(signature_b64=base64.b64encode(bytes(sig)).decode()))
    assert not verify_signature(tampered)


def test_verify_rejects_tampered_verifier(identity):
    _, record = generate_serial(identity)
    tampered = record.copy(update=dict(verifier="Acme Corp|2025-01-01T00:00:00+00:00"))
    assert not verify_signature(tampered)


def test_verify_rejects_edited_pattern(identity):
    _, record = generate_serial(identity)
    first = "1" if record.pattern_bits[0] == "0" else "0"
    tampered = record.copy(update=dict(pattern_bits=first + record.pattern_bits[1:]))
    assert not verify_signature(tampered)


def test_verify_malformed_bytes_is_a_format_error(identity):
    _, record = generate_serial(identity)
    with pytest.raises(SignatureFormatError):
        verify_signature(record.copy(update=dict(signature_b64="***")))
    with pytest.raises(SignatureFormatError):
        verify_signature(record.copy(update=dict(public_key_b64=base64.b64encode(b"x").decode())))
    with pytest.raises(SignatureFormatError):
        verify_signature(record.copy(update=dict(signature_b64=base64.b64encode(b"y" * 10).decode())))
    with pytest.raises(SignatureFormatError):
        verify_signature(record.copy(update=dict(hash_algorithm="not-a-hash")))


def test_record_file_round_trip(identity, tmp_path):
    _, record = generate_serial(identity)
    path = tmp_path / "sn.json"
    record.save(str(path))
    loaded = SignatureRecord.load(str(path))
    assert loaded == record
    assert loaded.record_hash() == record.record_hash()
    with pytest.raises(KeyMaterialError):
        SignatureRecord.load(str(tmp_path / "missing.json"))


def test_corrupt_record_file_is_a_format_error(identity, tmp_path):
    _, record = generate_serial(identity)
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(SignatureFormatError):
        SignatureRecord.load(str(broken))
    broken.write_text("[1, 2]")
    with pytest.raises(SignatureFormatError):
        SignatureRecord.load(str(broken))
    fields = record.dict()
    del fields["signature_b64"]
    broken.write_text(json.dumps(fields))
    with pytest.raises(SignatureFormatError):
        SignatureRecord.load(str(broken))


def test_stamp_hand_computed():
    pattern = SNPattern(block=[[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    images = torch.full((1, 1, 28, 28), 0.5)
    out = stamp_images(images, pattern)[0, 0]
    for r, c in [(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)]:
        assert out[r, c].item() == 1.0
    for r, c in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        assert out[r, c].item() == 0.0
    rest = out.clone()
    rest[:3, :3] = 0.5
    assert torch.all(rest == 0.5)


def test_stamp_conformance_on_random_images():
    rng = np.random.default_rng(0)
    for trial in range(20):
        block = rng.integers(-1, 2, size=(3, 4)).tolist()
        block[0][0] = 1
        pattern = SNPattern(block=block, anchor=(2, 1))
        images = torch.rand(2, 3, 6, 6)
        out = stamp_images(images, pattern)
        mask = torch.as_tensor(pattern.full_mask(6, 6))
        expected = torch.where(mask == -1, images, mask.to(images.dtype).expand_as(images))
        assert torch.equal(out, expected)


def test_stamp_is_pure_and_idempotent():
    pattern = SNPattern(block=[[1, 0], [0, 1]], anchor=(3, 3))
    images = torch.rand(4, 3, 8, 8)
    before = images.clone()
    once = stamp_images(images, pattern)
    assert torch.equal(images, before)
    assert torch.equal(stamp_images(once, pattern), once)


def test_all_transparent_pattern_is_identity():
    pattern = SNPattern(block=[[-1, -1], [-1, -1]])
    images = torch.rand(2, 1, 5, 5)
    assert torch.equal(stamp_images(images, pattern), images)


def test_stamp_broadcasts_over_channels():
    pattern = SNPattern(block=[[1, 0]])
    out = stamp(torch.full((1, 3, 4, 4), 0.5), pattern)
    assert out.pattern_applied == pattern
    assert torch.all(out.images[0, :, 0, 0] == 1.0)
    assert torch.all(out.images[0, :, 0, 1] == 0.0)


def test_stamp_errors():
    pattern = SNPattern(block=[[1, 0, 1]])
    with pytest.raises(DomainError):
        stamp_images(torch.full((1, 1, 4, 4), 255.0), pattern)
    nan = torch.full((1, 1, 4, 4), 0.5)
    nan[0, 0, 3, 3] = float("nan")
    with pytest.raises(DomainError):
        stamp_images(nan, pattern)
    with pytest.raises(GeometryError):
        stamp_images(torch.rand(1, 1, 2, 2), pattern)


def test_upscale_replicates_cells():
    pattern = SNPattern(block=[[1, 0], [0, 1]], anchor=(1, 2))
    big = pattern.upscale(2)
    assert big.rows == 4 and big.cols == 4
    assert big.anchor == (2, 4)
    assert big.block[0] == [1, 1, 0, 0]
    assert big.block[3] == [0, 0, 1, 1]


def test_perturb_pattern():
    pattern = SNPattern(block=[[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    assert perturb_pattern(pattern, 0, 7) == pattern
    inverted = perturb_pattern(pattern, 9, 7)
    assert np.array_equal(inverted.numpy(), 1 - pattern.numpy())
    a = perturb_pattern(pattern, 3, 11)
    assert a == perturb_pattern(pattern, 3, 11)
    assert (a.numpy() != pattern.numpy()).sum() == 3
    with pytest.raises(ArgumentError):
        perturb_pattern(pattern, 10, 0)
