import base64
import binascii
import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from pydantic import BaseModel, ValidationError, validator
from torch import Tensor

from errors import (
    ArgumentError,
    DomainError,
    GeometryError,
    KeyMaterialError,
    SignatureFormatError,
)

logger = logging.getLogger(__name__)

Anchor = Tuple[int, int]
TRANSPARENT = -1


def generate_keypair(path: str, seed: Optional[bytes] = None) -> Ed25519PrivateKey:
    """Creates an Ed25519 signing key and stores it as PEM.

    With a seed the key is sha256(seed), so the same seed gives the same key.
    """
    if seed is not None:
        key = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
    else:
        key = Ed25519PrivateKey.generate()
    pem = key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )
    Path(path).parent.mkdir(exist_ok=True, parents=True)
    Path(path).write_bytes(pem)
    logger.info(str(dict(new_key=path)))
    return key


def load_private_key(ref: str) -> Ed25519PrivateKey:
    path = Path(ref)
    if not ref or not path.is_file():
        raise KeyMaterialError(f"signing key not found: {ref}")
    try:
        key = serialization.load_pem_private_key(path.read_bytes(), password=None)
    except (ValueError, TypeError) as e:
        raise KeyMaterialError(f"invalid signing key {ref}: {e}")
    if not isinstance(key, Ed25519PrivateKey):
        raise KeyMaterialError(f"signing key {ref} is not an Ed25519 key")
    return key


def raw_public_key(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
    )


class OwnerIdentity(BaseModel):
    owner_name: str
    timestamp: str
    keypair_ref: str  # path of the PEM private key, never copied into artifacts

    @validator("owner_name")
    def check_owner(cls, v):
        if not v.strip():
            raise ValueError("owner_name must be non-empty")
        return v

    @validator("timestamp")
    def check_timestamp(cls, v):
        datetime.fromisoformat(v.replace("Z", "+00:00"))
        return v

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).replace(microsecond=0).isoformat()

    @property
    def verifier(self) -> str:
        return f"{self.owner_name}|{self.timestamp}"


class SNPattern(BaseModel):
    block: List[List[int]]
    anchor: Anchor = (0, 0)
    channel_rule: str = "broadcast_all_channels"

    @validator("block")
    def check_block(cls, v):
        if not v or not v[0]:
            raise ValueError("pattern block must be non-empty")
        if len(set(len(row) for row in v)) != 1:
            raise ValueError("pattern block must be rectangular")
        if any(x not in (0, 1, TRANSPARENT) for row in v for x in row):
            raise ValueError("pattern cells must be 0, 1 or -1")
        return v

    @validator("channel_rule")
    def check_channel_rule(cls, v):
        if v != "broadcast_all_channels":
            raise ValueError(f"unsupported channel rule {v}")
        return v

    @property
    def rows(self) -> int:
        return len(self.block)

    @property
    def cols(self) -> int:
        return len(self.block[0])

    @property
    def n_active(self) -> int:
        return sum(x != TRANSPARENT for row in self.block for x in row)

    def numpy(self) -> np.ndarray:
        return np.array(self.block, dtype=np.int64)

    def bits(self) -> str:
        return "".join(str(x) for row in self.block for x in row if x != TRANSPARENT)

    def check_fits(self, height: int, width: int):
        row, col = self.anchor
        if row < 0 or col < 0 or row + self.rows > height or col + self.cols > width:
            raise GeometryError(
                f"pattern {self.rows}x{self.cols} at {self.anchor} "
                f"exceeds image bounds {height}x{width}"
            )

    def full_mask(self, height: int, width: int) -> np.ndarray:
        """The pattern as a full-image grid, -1 everywhere outside the block."""
        self.check_fits(height, width)
        mask = np.full((height, width), TRANSPARENT, dtype=np.int64)
        row, col = self.anchor
        mask[row : row + self.rows, col : col + self.cols] = self.numpy()
        return mask

    def upscale(self, factor: int):
        if factor < 1:
            raise ArgumentError(f"upscale factor must be >= 1, got {factor}")
        block = np.kron(self.numpy(), np.ones((factor, factor), dtype=np.int64))
        row, col = self.anchor
        return SNPattern(
            block=block.tolist(),
            anchor=(row * factor, col * factor),
            channel_rule=self.channel_rule,
        )


class SignatureRecord(BaseModel):
    verifier: str
    signature_b64: str
    public_key_b64: str
    hash_algorithm: str = "sha256"
    rows: int
    cols: int
    anchor_row: int = 0
    anchor_col: int = 0
    pattern_bits: str

    @validator("cols")
    def check_geometry(cls, v, values):
        if v * values.get("rows", 0) < 1:
            raise ValueError("pattern_rows x pattern_cols must be >= 1")
        return v

    @property
    def derivation(self) -> dict:
        return dict(
            hash_algorithm_id=self.hash_algorithm,
            pattern_rows=self.rows,
            pattern_cols=self.cols,
            anchor_row=self.anchor_row,
            anchor_col=self.anchor_col,
        )

    def signature(self) -> bytes:
        return decode_b64(self.signature_b64, "signature")

    def public_key(self) -> bytes:
        return decode_b64(self.public_key_b64, "public key")

    def pattern(self) -> SNPattern:
        bits = [int(b) for b in self.pattern_bits]
        block = [bits[i * self.cols : (i + 1) * self.cols] for i in range(self.rows)]
        return SNPattern(block=block, anchor=(self.anchor_row, self.anchor_col))

    def canonical_json(self) -> str:
        return json.dumps(self.dict(), sort_keys=True, separators=(",", ":"))

    def record_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path: str):
        Path(path).parent.mkdir(exist_ok=True, parents=True)
        with open(path, "w") as f:
            f.write(json.dumps(self.dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str):
        if not Path(path).is_file():
            raise KeyMaterialError(f"serial number certificate not found: {path}")
        try:
            with open(path) as f:
                payload = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SignatureFormatError(f"certificate {path} is not valid JSON: {e}")
        if not isinstance(payload, dict):
            raise SignatureFormatError(f"certificate {path} must hold a JSON object")
        try:
            return cls(**payload)
        except ValidationError as e:
            raise SignatureFormatError(f"certificate {path} has invalid fields: {e}")


def decode_b64(text: str, what: str) -> bytes:
    try:
        return base64.b64decode(text.encode(), validate=True)
    except (binascii.Error, ValueError) as e:
        raise SignatureFormatError(f"malformed {what}: {e}")


def derive_bits(signature: bytes, n_bits: int, hash_algorithm: str = "sha256") -> str:
    """Leading n_bits of hash(signature), extended by hash(signature || counter)."""
    try:
        digest = hashlib.new(hash_algorithm, signature).digest()
    except ValueError:
        raise ArgumentError(f"unknown hash algorithm {hash_algorithm}")

    counter = 1
    while len(digest) * 8 < n_bits:
        block = signature + counter.to_bytes(4, "big")
        digest += hashlib.new(hash_algorithm, block).digest()
        counter += 1

    bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:n_bits]
    return "".join(str(b) for b in bits)


def generate_serial(
    identity: OwnerIdentity,
    rows: int = 3,
    cols: int = 3,
    anchor: Anchor = (0, 0),
    image_shape: Optional[Tuple[int, int]] = None,
    hash_algorithm: str = "sha256",
) -> Tuple[SNPattern, SignatureRecord]:
    """Signs the owner verifier and derives the serial number pattern from the signature.

    Args:
        identity: owner name, timestamp and the signing key reference
        rows, cols: pattern geometry, all cells active
        anchor: (row, col) of the top-left cell in pixel coordinates
        image_shape: optional (H, W) the pattern must fit into

    Returns:
        the pattern and its certificate
    """
    if rows * cols < 1 or rows < 1 or cols < 1:
        raise ArgumentError(f"pattern must have at least one cell, got {rows}x{cols}")

    key = load_private_key(identity.keypair_ref)
    signature = key.sign(identity.verifier.encode())
    bits = derive_bits(signature, rows * cols, hash_algorithm)

    record = SignatureRecord(
        verifier=identity.verifier,
        signature_b64=base64.b64encode(signature).decode(),
        public_key_b64=base64.b64encode(raw_public_key(key)).decode(),
        hash_algorithm=hash_algorithm,
        rows=rows,
        cols=cols,
        anchor_row=anchor[0],
        anchor_col=anchor[1],
        pattern_bits=bits,
    )
    pattern = record.pattern()
    if image_shape is not None:
        pattern.check_fits(*image_shape)
    return pattern, record


def verify_signature(record: SignatureRecord) -> bool:
    """True iff the signature is valid for the verifier and reproduces the recorded pattern."""
    signature = record.signature()
    try:
        public_key = Ed25519PublicKey.from_public_bytes(record.public_key())
    except ValueError as e:
        raise SignatureFormatError(f"malformed public key: {e}")
    if len(signature) != 64:
        raise SignatureFormatError(f"signature must be 64 bytes, got {len(signature)}")

    try:
        public_key.verify(signature, record.verifier.encode())
    except InvalidSignature:
        return False

    if len(record.pattern_bits) != record.rows * record.cols:
        return False
    try:
        bits = derive_bits(signature, record.rows * record.cols, record.hash_algorithm)
    except ArgumentError as e:
        raise SignatureFormatError(f"malformed certificate: {e}")
    return bits == record.pattern_bits


class StampedBatch(BaseModel):
    images: Tensor  # [N, C, H, W], pixels in [0, 1]
    pattern_applied: Optional[SNPattern] = None

    class Config:
        arbitrary_types_allowed = True


def check_normalized(images: Tensor):
    if images.numel() and torch.isnan(images).any():
        raise DomainError("images contain NaN pixels")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise DomainError(
            "images must be normalized to [0, 1], got range "
            f"[{images.min().item():.3f}, {images.max().item():.3f}]"
        )


def stamp_images(images: Tensor, pattern: SNPattern) -> Tensor:
    """Writes 1 where the pattern is 1, 0 where it is 0, leaves -1 cells untouched.

    images is [N, C, H, W]; the block is broadcast over every channel. The input
    tensor is not modified.
    """
    if images.dim() != 4:
        raise GeometryError(f"expected [N, C, H, W] images, got {tuple(images.shape)}")
    check_normalized(images)
    height, width = images.shape[-2:]
    pattern.check_fits(height, width)

    row, col = pattern.anchor
    block = torch.as_tensor(pattern.block, device=images.device)
    active = block != TRANSPARENT
    values = block.clamp(min=0).to(images.dtype)

    out = images.clone()
    region = out[:, :, row : row + pattern.rows, col : col + pattern.cols]
    region[:, :, active] = values[active]
    return out


def stamp(batch: Union[StampedBatch, Tensor], pattern: SNPattern) -> StampedBatch:
    images = batch.images if isinstance(batch, StampedBatch) else batch
    return StampedBatch(images=stamp_images(images, pattern), pattern_applied=pattern)


def perturb_pattern(pattern: SNPattern, n_flips: int, rng_seed: int) -> SNPattern:
    """Copy of the pattern with exactly n_flips active cells inverted."""
    block = pattern.numpy()
    active = np.flatnonzero(block.reshape(-1) != TRANSPARENT)
    if n_flips < 0 or n_flips > len(active):
        raise ArgumentError(
            f"n_flips={n_flips} must be within [0, {len(active)}] active cells"
        )

    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(active, size=n_flips, replace=False)
    flat = block.reshape(-1).copy()
    flat[chosen] = 1 - flat[chosen]
    return SNPattern(
        block=flat.reshape(block.shape).tolist(),
        anchor=pattern.anchor,
        channel_rule=pattern.channel_rule,
    )


def test_stamp():
    pattern = SNPattern(block=[[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    images = torch.full((1, 1, 28, 28), 0.5)
    out = stamp_images(images, pattern)
    print(out[0, 0, :4, :4])
    assert torch.equal(stamp_images(out, pattern), out)
