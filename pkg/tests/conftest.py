"""
Shared fixtures: a small machine (64 MiB, 32 MiB confidential, 2 harts), a
TSM holding the fixture attestation key, and a staging arena.
"""
import sys
from pathlib import Path

import pytest

# Ensure src is on path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import abi
from attestation import FIXTURE_PRIVATE_KEY, TsmAttestationKey
from machine import MachineConfig, PageSize, build_machine
from tsm import Tsm
from vmimage import NcArena

SMALL = MachineConfig(
    memory_base=0x8000_0000,
    memory_size=64 << 20,
    confidential_base=0x8200_0000,
    confidential_size=32 << 20,
    hart_count=2,
    alignment=PageSize.SIZE_2M,
)


@pytest.fixture(autouse=True)
def fixture_key_env(monkeypatch):
    """Tests always run against the built-in attestation key, whatever .env says."""
    monkeypatch.delenv("ACESIM_ATTESTATION_KEY", raising=False)


@pytest.fixture
def machine():
    return build_machine(SMALL)


@pytest.fixture
def tsm(machine):
    return Tsm(machine, TsmAttestationKey.from_private(FIXTURE_PRIVATE_KEY))


@pytest.fixture
def arena(tsm):
    return NcArena(tsm.machine)


def promote(tsm, staged, hart=0):
    return tsm.hypervisor_ecall(hart, abi.EXT_ACETVM, abi.FID_PROMOTE, list(staged.promote_args()))


def run(tsm, tvm, vhart=0, hart=0, irq=abi.NO_IRQ, reply=(0, 0)):
    return tsm.hypervisor_ecall(hart, abi.EXT_ACETVM, abi.FID_RUN, [tvm, vhart, irq, *reply])


def destroy(tsm, tvm, hart=0):
    return tsm.hypervisor_ecall(hart, abi.EXT_ACETVM, abi.FID_DESTROY, [tvm])
