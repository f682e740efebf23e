# attestation.py - Measurements, TAP sealed payloads, local attestation, secrets
"""
TapBlob wire format (all integers big-endian):

    magic      4   b"ATAP"
    version    u16 1
    count      u16 number of lockboxes (>= 1)
    lockbox*   u16 algorithm_id, u32 length, length bytes encapsulated key
    nonce      12
    ct_len     u32 length of ciphertext including the 16-byte GCM tag
    ciphertext ct_len  AES-256-GCM(tap_key, nonce, payload, aad=header)

The header (everything before the nonce) is authenticated as AAD.

Serialized TapPayload:

    pcr_code_data 48, pcr_fdt 48, pcr_boot_hart 48
    u16 secret count, then per secret: u32 index, u32 length, bytes
"""
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from dotenv import load_dotenv

import kem
from errors import (
    AttestationFailed,
    AuthFailure,
    ConfigError,
    NoMatchingLockbox,
    NoSuchSecret,
    ParseError,
    UnsupportedAlgorithm,
)
from machine import HartArchState

load_dotenv()

logger = logging.getLogger(__name__)

TAP_MAGIC = b"ATAP"
TAP_VERSION = 1
DIGEST_BYTES = 48
NONCE_BYTES = 12
TAG_BYTES = 16

# RFC 7748 test-vector scalar; the simulator's hard-coded attestation key.
FIXTURE_PRIVATE_KEY = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")


# --- Measurements ---

@dataclass(frozen=True)
class MeasurementRegisters:
    pcr_code_data: bytes
    pcr_fdt: bytes
    pcr_boot_hart: bytes

    NAMES = ("pcr_code_data", "pcr_fdt", "pcr_boot_hart")

    def encode(self) -> bytes:
        return self.pcr_code_data + self.pcr_fdt + self.pcr_boot_hart

    @classmethod
    def decode(cls, data: bytes) -> "MeasurementRegisters":
        if len(data) != 3 * DIGEST_BYTES:
            raise ParseError("measurement block must be 144 bytes", field="measurements")
        return cls(data[:48], data[48:96], data[96:])

    def mismatches(self, other: "MeasurementRegisters") -> List[str]:
        return [n for n in self.NAMES if getattr(self, n) != getattr(other, n)]


def measure_tvm(page_list: Iterable[Tuple[int, bytes]], fdt_bytes: bytes, boot_hart: HartArchState) -> MeasurementRegisters:
    """page_list must be ascending by guest page number with zero pages left out."""
    code = hashlib.sha384()
    for gpn, data in page_list:
        code.update(struct.pack(">Q", gpn))
        code.update(data)
    return MeasurementRegisters(
        pcr_code_data=code.digest(),
        pcr_fdt=hashlib.sha384(fdt_bytes).digest(),
        pcr_boot_hart=hashlib.sha384(boot_hart.encode()).digest(),
    )


# --- Payload ---

@dataclass
class TapPayload:
    reference_measurements: MeasurementRegisters
    secrets: List[Tuple[int, bytes]] = field(default_factory=list)

    def __post_init__(self):
        indices = [i for i, _ in self.secrets]
        if len(set(indices)) != len(indices):
            raise ParseError("secret indices must be unique", field="secrets")

    def encode(self) -> bytes:
        out = [self.reference_measurements.encode(), struct.pack(">H", len(self.secrets))]
        for index, data in self.secrets:
            out.append(struct.pack(">II", index, len(data)))
            out.append(data)
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes) -> "TapPayload":
        if len(data) < 3 * DIGEST_BYTES + 2:
            raise ParseError("payload truncated", field="measurements")
        regs = MeasurementRegisters.decode(data[:144])
        (count,) = struct.unpack_from(">H", data, 144)
        pos, secrets = 146, []
        for n in range(count):
            if pos + 8 > len(data):
                raise ParseError(f"secret {n} header truncated", field="secrets")
            index, length = struct.unpack_from(">II", data, pos)
            pos += 8
            if pos + length > len(data):
                raise ParseError(f"secret {n} body truncated", field="secrets")
            secrets.append((index, bytes(data[pos:pos + length])))
            pos += length
        if pos != len(data):
            raise ParseError("trailing bytes after payload", field="secrets")
        return cls(regs, secrets)


# --- Blob ---

@dataclass(frozen=True)
class Lockbox:
    algorithm_id: int
    encapsulated_key: bytes


@dataclass
class TapBlob:
    lockboxes: List[Lockbox]
    nonce: bytes
    ciphertext: bytes
    version: int = TAP_VERSION

    def header(self) -> bytes:
        out = [TAP_MAGIC, struct.pack(">HH", self.version, len(self.lockboxes))]
        for box in self.lockboxes:
            out.append(struct.pack(">HI", box.algorithm_id, len(box.encapsulated_key)))
            out.append(box.encapsulated_key)
        return b"".join(out)

    def encode(self) -> bytes:
        return self.header() + self.nonce + struct.pack(">I", len(self.ciphertext)) + self.ciphertext

    @classmethod
    def parse(cls, data: bytes) -> "TapBlob":
        data = bytes(data)
        if len(data) < 8 or data[:4] != TAP_MAGIC:
            raise ParseError("bad TAP magic", field="magic")
        version, count = struct.unpack_from(">HH", data, 4)
        if version != TAP_VERSION:
            raise ParseError(f"unsupported TAP version {version}", field="version")
        if count == 0:
            raise ParseError("TAP has no lockbox", field="lockboxes")
        pos, boxes = 8, []
        for n in range(count):
            if pos + 6 > len(data):
                raise ParseError(f"lockbox {n} header truncated", field="lockboxes")
            alg, length = struct.unpack_from(">HI", data, pos)
            pos += 6
            expected = kem.ENCAPSULATED_BYTES.get(alg)
            if expected is not None and length != expected:
                raise ParseError(f"lockbox {n} length {length} wrong for {kem.algorithm_label(alg)}", field="lockboxes")
            if pos + length > len(data):
                raise ParseError(f"lockbox {n} body truncated", field="lockboxes")
            boxes.append(Lockbox(alg, data[pos:pos + length]))
            pos += length
        if pos + NONCE_BYTES + 4 > len(data):
            raise ParseError("nonce truncated", field="nonce")
        nonce = data[pos:pos + NONCE_BYTES]
        (ct_len,) = struct.unpack_from(">I", data, pos + NONCE_BYTES)
        pos += NONCE_BYTES + 4
        if ct_len < TAG_BYTES or pos + ct_len != len(data):
            raise ParseError("ciphertext length inconsistent", field="ciphertext")
        return cls(boxes, nonce, data[pos:], version)


@dataclass
class TsmAttestationKey:
    """Private KEM keys held by the TSM. Never rendered."""

    keys: Dict[int, Tuple[bytes, bytes]] = field(default_factory=dict)  # alg -> (public, private)

    def __repr__(self) -> str:
        return f"TsmAttestationKey(algorithms={[kem.algorithm_label(a) for a in sorted(self.keys)]})"

    @classmethod
    def from_private(cls, private: bytes) -> "TsmAttestationKey":
        return cls({kem.ALG_TESTKEM: (kem.public_from_private(private), private)})

    @classmethod
    def from_env(cls) -> "TsmAttestationKey":
        """TestKem key from ACESIM_ATTESTATION_KEY (hex), else the fixture key."""
        raw = os.getenv("ACESIM_ATTESTATION_KEY", "").strip()
        if not raw:
            return cls.from_private(FIXTURE_PRIVATE_KEY)
        try:
            private = bytes.fromhex(raw)
        except ValueError:
            raise ConfigError("ACESIM_ATTESTATION_KEY is not hex") from None
        if len(private) != 32:
            raise ConfigError("ACESIM_ATTESTATION_KEY must be 32 bytes")
        return cls.from_private(private)

    def add_generated(self, algorithm_id: int) -> bytes:
        """Generate and hold a fresh keypair; returns its public part."""
        public, private = kem.provider(algorithm_id).generate_keypair()
        self.keys[algorithm_id] = (public, private)
        return public

    def public_keys(self) -> List[Tuple[int, bytes]]:
        return [(alg, pub) for alg, (pub, _) in sorted(self.keys.items())]

    def public_key(self, algorithm_id: int) -> bytes:
        return self.keys[algorithm_id][0]


def fixture_public_key() -> bytes:
    return kem.public_from_private(FIXTURE_PRIVATE_KEY)


# --- Operations ---

def tap_create(payload: TapPayload, kem_public_keys: Sequence[Tuple[int, bytes]]) -> TapBlob:
    """Owner side: seal payload under a fresh AES-256 key, one lockbox per recipient key."""
    if not kem_public_keys:
        raise UnsupportedAlgorithm("at least one KEM public key is required")
    tap_key = AESGCM.generate_key(bit_length=256)
    boxes = [Lockbox(alg, kem.provider(alg).wrap(pub, tap_key)) for alg, pub in kem_public_keys]
    blob = TapBlob(boxes, os.urandom(NONCE_BYTES), b"")
    blob.ciphertext = AESGCM(tap_key).encrypt(blob.nonce, payload.encode(), blob.header())
    return blob


def tap_unseal(blob: TapBlob, key: TsmAttestationKey) -> TapPayload:
    box = next((b for b in blob.lockboxes if b.algorithm_id in key.keys), None)
    if box is None:
        raise NoMatchingLockbox("no lockbox for a held key",
                                offered=[kem.algorithm_label(b.algorithm_id) for b in blob.lockboxes])
    _, private = key.keys[box.algorithm_id]
    tap_key = kem.provider(box.algorithm_id).unwrap(private, box.encapsulated_key)
    try:
        plaintext = AESGCM(tap_key).decrypt(blob.nonce, blob.ciphertext, blob.header())
    except InvalidTag:
        raise AuthFailure("TAP ciphertext failed authentication") from None
    return TapPayload.decode(plaintext)


def verify_local_attestation(measured: MeasurementRegisters, payload: TapPayload) -> List[Tuple[int, bytes]]:
    diff = measured.mismatches(payload.reference_measurements)
    if diff:
        logger.warning("local attestation failed: %s differ", ", ".join(diff))
        raise AttestationFailed("measurements differ from reference", registers=",".join(diff))
    return list(payload.secrets)


def retrieve_secret(tvm, index: int) -> bytes:
    """`tvm` is anything with a `secrets` mapping (the TSM passes its descriptor)."""
    try:
        return tvm.secrets[index]
    except KeyError:
        raise NoSuchSecret(f"no secret at index {index}") from None


def inspect_blob(blob: TapBlob) -> dict:
    """Header summary for display. Holds no plaintext."""
    return {
        "version": blob.version,
        "lockboxes": [
            {"algorithm": kem.algorithm_label(b.algorithm_id), "algorithm_id": b.algorithm_id,
             "length": len(b.encapsulated_key)}
            for b in blob.lockboxes
        ],
        "nonce": blob.nonce.hex(),
        "ciphertext_bytes": len(blob.ciphertext),
    }
