"""Self-describing checkpoint container.

Layout: 8-byte magic ``PTSNET01`` | uint64 little-endian header length |
UTF-8 JSON header | concatenated raw little-endian float64 arrays.
The header lists layer specs and, per array, (layer, name, shape, offset).
Round-trips are bit-exact at 64-bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import layer_from_spec
from .network import Network

MAGIC = b"PTSNET01"


class CheckpointError(ValueError):
    pass


def save_network(net: Network, path) -> None:
    arrays = []
    blobs = []
    offset = 0
    for i, layer in enumerate(net.layers):
        for name in sorted(layer.params()):
            arr = np.ascontiguousarray(layer.params()[name], dtype="<f8")
            arrays.append({"layer": i, "name": name, "shape": list(arr.shape),
                           "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({
        "layers": [l.spec() for l in net.layers],
        "arrays": arrays,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    net = Network([layer_from_spec(s) for s in header["layers"]])
    for rec in header["arrays"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).copy()
        layer = net.layers[rec["layer"]]
        if rec["name"] not in layer.params():
            raise CheckpointError(f"unknown param {rec['name']} for layer {rec['layer']}")
        setattr(layer, _attr_name(rec["name"]), arr)
    return net


def _attr_name(param_name: str) -> str:
    return param_name
