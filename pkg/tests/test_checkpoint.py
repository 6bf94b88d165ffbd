import numpy as np
import pytest

from uapdefend.errors import ValidationError
from uapdefend.nnet import Network, load_network, load_params, save_network

SPECS = [
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 4},
    {"kind": "relu"},
    {"kind": "residual_block", "kernel": 3, "maps": 4},
    {"kind": "maxpool2"},
    {"kind": "dense", "units": 5},
]


@pytest.fixture
def net():
    return Network.from_specs((8, 8, 2), SPECS, seed=42)


def test_round_trip_reproduces_forward_bit_exactly(net, tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 8, 8, 2)).astype(np.float32)
    before = net.forward(x)
    save_network(net, tmp_path / "ckpt", meta={"note": "test"})

    reloaded, meta = load_network(tmp_path / "ckpt")
    assert meta["note"] == "test"
    np.testing.assert_array_equal(reloaded.forward(x), before)

    fresh = Network.from_specs((8, 8, 2), SPECS, seed=7)
    assert not np.array_equal(fresh.forward(x), before)
    load_params(fresh, tmp_path / "ckpt")
    np.testing.assert_array_equal(fresh.forward(x), before)


def test_truncated_payload_rejected(net, tmp_path):
    save_network(net, tmp_path / "ckpt")
    victim = next((tmp_path / "ckpt").glob("*.bin"))
    victim.write_bytes(victim.read_bytes()[:-8])
    with pytest.raises(ValidationError, match="corrupted"):
        load_network(tmp_path / "ckpt")


def test_checksum_mismatch_rejected(net, tmp_path):
    save_network(net, tmp_path / "ckpt")
    victim = sorted((tmp_path / "ckpt").glob("*.bin"))[0]
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="checksum"):
        load_network(tmp_path / "ckpt")


def test_manifest_checksums_match_payloads(net, tmp_path):
    from uapdefend.nnet.checkpoint import read_manifest
    from uapdefend.util import sha256_bytes

    save_network(net, tmp_path / "ckpt")
    manifest = read_manifest(tmp_path / "ckpt")
    for entry in manifest["params"]:
        payload = (tmp_path / "ckpt" / entry["file"]).read_bytes()
        assert sha256_bytes(payload) == entry["sha256"]


def test_architecture_mismatch_rejected(net, tmp_path):
    save_network(net, tmp_path / "ckpt")
    other = Network.from_specs(
        (8, 8, 2), [{"kind": "dense", "units": 5}], seed=0
    )
    with pytest.raises(ValidationError, match="architecture"):
        load_params(other, tmp_path / "ckpt")


def test_fingerprint_changes_with_params(net):
    fp = net.fingerprint()
    params = net.param_dict()
    name = next(iter(params))
    params[name] = params[name] + 1.0
    net.load_param_dict(params)
    assert net.fingerprint() != fp
