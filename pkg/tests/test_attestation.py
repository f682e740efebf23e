"""
Tests for measurements, TAP sealing and unsealing, local attestation and
the KEM lockboxes. Tampering is checked bit by bit over the whole blob.
"""
import struct

import pytest

import kem
from attestation import (
    FIXTURE_PRIVATE_KEY,
    MeasurementRegisters,
    TapBlob,
    TapPayload,
    TsmAttestationKey,
    fixture_public_key,
    inspect_blob,
    measure_tvm,
    retrieve_secret,
    tap_create,
    tap_unseal,
    verify_local_attestation,
)
from errors import (
    AceError,
    AttestationFailed,
    AuthFailure,
    ConfigError,
    NoMatchingLockbox,
    NoSuchSecret,
    ParseError,
    UnsupportedAlgorithm,
)
from machine import HartArchState

SECRET = b"owner-secret"


def _regs(seed: int) -> MeasurementRegisters:
    return MeasurementRegisters(bytes([seed]) * 48, bytes([seed + 1]) * 48, bytes([seed + 2]) * 48)


@pytest.fixture
def tsm_key():
    return TsmAttestationKey.from_private(FIXTURE_PRIVATE_KEY)


@pytest.fixture
def sealed():
    payload = TapPayload(_regs(1), [(0, SECRET)])
    return payload, tap_create(payload, [(kem.ALG_TESTKEM, fixture_public_key())])


# --- KEM ---


def test_testkem_wrap_unwrap():
    provider = kem.provider(kem.ALG_TESTKEM)
    public, private = provider.generate_keypair()
    box = provider.wrap(public, bytes(range(32)))
    assert len(box) == kem.ENCAPSULATED_BYTES[kem.ALG_TESTKEM] == 80
    assert provider.unwrap(private, box) == bytes(range(32))


def test_unwrap_with_wrong_key_is_auth_failure():
    provider = kem.provider(kem.ALG_TESTKEM)
    public, _ = provider.generate_keypair()
    _, other_private = provider.generate_keypair()
    box = provider.wrap(public, bytes(32))
    with pytest.raises(AuthFailure):
        provider.unwrap(other_private, box)
    with pytest.raises(AuthFailure):
        provider.unwrap(other_private, box[:-1])


def test_algorithm_names():
    assert kem.algorithm_from_name("testkem") == kem.ALG_TESTKEM
    assert kem.algorithm_label(kem.ALG_MLKEM768) == "MlKem768"
    assert kem.algorithm_label(0x1234) == "unknown(0x1234)"
    with pytest.raises(UnsupportedAlgorithm):
        kem.algorithm_from_name("rsa")
    with pytest.raises(UnsupportedAlgorithm):
        kem.provider(0x1234)


def test_mlkem_lockbox(tsm_key, sealed):
    pytest.importorskip("kyber_py")
    public = tsm_key.add_generated(kem.ALG_MLKEM768)
    payload, _ = sealed
    blob = tap_create(payload, [(kem.ALG_MLKEM768, public)])
    assert len(blob.lockboxes[0].encapsulated_key) == 1088 + 48
    assert tap_unseal(TapBlob.parse(blob.encode()), tsm_key).secrets == [(0, SECRET)]


# --- measurements ---


def test_measurement_binds_page_numbers_and_order():
    hart = HartArchState()
    a, b = b"\x01" * 4096, b"\x02" * 4096
    base = measure_tvm([(1, a), (2, b)], b"fdt", hart)
    assert measure_tvm([(2, b), (1, a)], b"fdt", hart) != base
    assert measure_tvm([(1, a), (3, b)], b"fdt", hart) != base
    assert measure_tvm([(1, a), (2, b)], b"fdt", hart) == base
    assert len(base.pcr_code_data) == 48


def test_measurement_covers_fdt_and_boot_hart():
    hart = HartArchState()
    base = measure_tvm([], b"fdt", hart)
    assert base.mismatches(measure_tvm([], b"fdx", hart)) == ["pcr_fdt"]
    hart.set_csr("sepc", 0x8000_0000)
    assert base.mismatches(measure_tvm([], b"fdt", hart)) == ["pcr_boot_hart"]


def test_measurement_block_decode():
    regs = _regs(7)
    assert MeasurementRegisters.decode(regs.encode()) == regs
    with pytest.raises(ParseError):
        MeasurementRegisters.decode(bytes(143))


# --- payload and blob format ---


def test_payload_rejects_duplicate_indices():
    with pytest.raises(ParseError):
        TapPayload(_regs(1), [(0, b"a"), (0, b"b")])


@pytest.mark.parametrize("mutate", [
    lambda raw: raw[:100],
    lambda raw: raw + b"\x00",
    lambda raw: raw[:-1],
    lambda raw: raw[:144] + struct.pack(">H", 2) + raw[146:],
], ids=["truncated-measurements", "trailing", "truncated-secret", "count-too-high"])
def test_payload_decode_errors(mutate):
    raw = TapPayload(_regs(1), [(0, SECRET)]).encode()
    with pytest.raises(ParseError):
        TapPayload.decode(mutate(raw))


@pytest.mark.parametrize("mutate, field", [
    (lambda raw: b"XTAP" + raw[4:], "magic"),
    (lambda raw: raw[:4] + struct.pack(">H", 2) + raw[6:], "version"),
    (lambda raw: raw[:6] + struct.pack(">H", 0) + raw[8:], "lockboxes"),
    (lambda raw: raw[:10] + struct.pack(">I", 81) + raw[14:], "lockboxes"),
    (lambda raw: raw[:-1], "ciphertext"),
    (lambda raw: raw[:100], "nonce"),
])
def test_blob_parse_errors(sealed, mutate, field):
    _, blob = sealed
    with pytest.raises(ParseError) as info:
        TapBlob.parse(mutate(blob.encode()))
    assert info.value.details["field"] == field


def test_blob_layout(sealed):
    _, blob = sealed
    raw = blob.encode()
    assert raw[:4] == b"ATAP"
    assert struct.unpack_from(">HH", raw, 4) == (1, 1)
    assert struct.unpack_from(">HI", raw, 8) == (kem.ALG_TESTKEM, 80)
    assert struct.unpack_from(">I", raw, 106)[0] == len(raw) - 110


# --- sealing ---


def test_round_trips(tsm_key):
    for n in range(500):
        secrets = [(i, bytes([n % 256]) * (n % 37)) for i in range(n % 4)]
        payload = TapPayload(_regs(n % 200), secrets)
        blob = tap_create(payload, [(kem.ALG_TESTKEM, fixture_public_key())])
        back = tap_unseal(TapBlob.parse(blob.encode()), tsm_key)
        assert back.reference_measurements == payload.reference_measurements
        assert back.secrets == secrets


def test_every_authenticated_bit_is_protected(sealed, tsm_key):
    _, blob = sealed
    raw = bytearray(blob.encode())
    protected = {*range(14, 106), *range(110, len(raw))}
    for byte in range(len(raw)):
        for bit in range(8):
            raw[byte] ^= 1 << bit
            try:
                if byte in protected:
                    with pytest.raises(AuthFailure):
                        tap_unseal(TapBlob.parse(bytes(raw)), tsm_key)
                else:
                    with pytest.raises(AceError):
                        tap_unseal(TapBlob.parse(bytes(raw)), tsm_key)
            finally:
                raw[byte] ^= 1 << bit


def test_foreign_key_cannot_unseal(sealed):
    _, blob = sealed
    other = TsmAttestationKey()
    other.add_generated(kem.ALG_TESTKEM)
    with pytest.raises(AuthFailure):
        tap_unseal(blob, other)


def test_no_matching_lockbox(sealed):
    _, blob = sealed
    with pytest.raises(NoMatchingLockbox):
        tap_unseal(blob, TsmAttestationKey())


def test_sealing_needs_a_known_algorithm(sealed):
    payload, _ = sealed
    with pytest.raises(UnsupportedAlgorithm):
        tap_create(payload, [(0x1234, b"")])
    with pytest.raises(UnsupportedAlgorithm):
        tap_create(payload, [])


def test_generated_key_unseals(sealed):
    payload, _ = sealed
    other = TsmAttestationKey()
    other_public = other.add_generated(kem.ALG_TESTKEM)
    blob = tap_create(payload, [(kem.ALG_TESTKEM, other_public)])
    assert tap_unseal(blob, other).secrets == [(0, SECRET)]


def test_inspect_shows_no_secrets(sealed):
    _, blob = sealed
    info = inspect_blob(blob)
    assert info["lockboxes"] == [{"algorithm": "TestKem", "algorithm_id": kem.ALG_TESTKEM, "length": 80}]
    assert SECRET.decode() not in repr(info)
    assert SECRET.hex() not in repr(info)


# --- attestation key ---


def test_key_repr_hides_material(tsm_key):
    text = repr(tsm_key)
    assert FIXTURE_PRIVATE_KEY.hex() not in text
    assert "TestKem" in text


def test_key_from_env_default(monkeypatch):
    monkeypatch.delenv("ACESIM_ATTESTATION_KEY", raising=False)
    key = TsmAttestationKey.from_env()
    assert key.public_key(kem.ALG_TESTKEM) == fixture_public_key()


def test_key_from_env_custom(monkeypatch):
    monkeypatch.setenv("ACESIM_ATTESTATION_KEY", "11" * 32)
    key = TsmAttestationKey.from_env()
    assert key.public_key(kem.ALG_TESTKEM) != fixture_public_key()


@pytest.mark.parametrize("value", ["zz" * 32, "11" * 31])
def test_key_from_env_rejects_bad_values(monkeypatch, value):
    monkeypatch.setenv("ACESIM_ATTESTATION_KEY", value)
    with pytest.raises(ConfigError):
        TsmAttestationKey.from_env()


# --- local attestation and secrets ---


def test_verify_returns_secrets():
    payload = TapPayload(_regs(1), [(3, b"x")])
    assert verify_local_attestation(_regs(1), payload) == [(3, b"x")]


def test_verify_names_differing_registers():
    measured = MeasurementRegisters(_regs(1).pcr_code_data, b"\xff" * 48, _regs(1).pcr_boot_hart)
    with pytest.raises(AttestationFailed) as info:
        verify_local_attestation(measured, TapPayload(_regs(1)))
    assert info.value.details["registers"] == "pcr_fdt"


def test_retrieve_secret():
    class Holder:
        secrets = {0: SECRET}

    assert retrieve_secret(Holder(), 0) == SECRET
    with pytest.raises(NoSuchSecret):
        retrieve_secret(Holder(), 1)
