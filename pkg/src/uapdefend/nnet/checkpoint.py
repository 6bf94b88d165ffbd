"""Checkpoint container: JSON manifest + raw little-endian float32 payloads.

Layout of a checkpoint directory:

    manifest.json   layer specs, input shape, per-parameter name/shape/file/
                    sha256, network fingerprint, free-form metadata
    <group>.bin     one raw little-endian payload file per parameter group

Loading verifies shapes and checksums; a truncated or altered payload is
rejected before any parameter is installed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..util import sha256_bytes
from .network import Network

FORMAT = "uapdefend-checkpoint-v1"


def _payload_name(param_name: str) -> str:
    return param_name.replace("/", "__") + ".bin"


def save_network(net: Network, path, meta: dict | None = None) -> dict:
    """Write the network to `path` (a directory); returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = []
    for name, arr in net.param_dict().items():
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fname = _payload_name(name)
        (path / fname).write_bytes(payload)
        params.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "<f4",
                "file": fname,
                "sha256": sha256_bytes(payload),
            }
        )
    manifest = {
        "format": FORMAT,
        "input_shape": list(net.input_shape),
        "layers": net.specs(),
        "params": params,
        "fingerprint": net.fingerprint(),
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ValidationError(
            f"unexpected checkpoint format {manifest.get('format')!r} at {mpath}"
        )
    return manifest


def _read_payloads(path: Path, manifest: dict) -> dict:
    values = {}
    for entry in manifest["params"]:
        fpath = path / entry["file"]
        if not fpath.exists():
            raise ValidationError(f"checkpoint payload missing: {fpath}")
        payload = fpath.read_bytes()
        expected = int(np.prod(entry["shape"])) * 4
        if len(payload) != expected:
            raise ValidationError(
                f"checkpoint payload corrupted (size {len(payload)} != {expected}):"
                f" {fpath}"
            )
        if sha256_bytes(payload) != entry["sha256"]:
            raise ValidationError(f"checkpoint payload corrupted (checksum): {fpath}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(entry["shape"])
        values[entry["name"]] = arr
    return values


def load_params(net: Network, path) -> dict:
    """Install checkpointed parameters into an existing network.

    The manifest's layer specs and input shape must match the network.
    Returns the manifest metadata.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["layers"] != net.specs() or tuple(manifest["input_shape"]) != net.input_shape:
        raise ValidationError(
            f"checkpoint at {path} does not match the network architecture"
        )
    values = _read_payloads(path, manifest)
    if set(values) != set(net.param_dict()):
        raise ValidationError(f"checkpoint at {path} has mismatched parameter names")
    net.load_param_dict(values)
    return manifest.get("meta", {})


def load_network(path, dtype=np.float32) -> tuple[Network, dict]:
    """Rebuild the architecture from the manifest and load its parameters."""
    path = Path(path)
    manifest = read_manifest(path)
    net = Network.from_specs(manifest["input_shape"], manifest["layers"], seed=0, dtype=dtype)
    values = _read_payloads(path, manifest)
    net.load_param_dict(values)
    if net.fingerprint() != manifest["fingerprint"]:
        raise ValidationError(f"checkpoint at {path} fingerprint mismatch after load")
    return net, manifest.get("meta", {})
