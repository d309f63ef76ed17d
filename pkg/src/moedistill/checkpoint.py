"""Binary model checkpoints.

Layout: magic "MOEB" | uint32 version | uint32 header length | JSON header
| payload. The header carries the full model config, a tensor manifest
(name + shape in payload order), routing tables, an optional vocabulary
reference and an importance-table digest. The payload is the manifest's
tensors as little-endian float32, row major, concatenated. Loading checks
the byte length against the manifest exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import EncoderModel, ModelConfig
from .moe import ExpertSet, RoutingTable, GATE
from .tensor import Tensor

MAGIC = b"MOEB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _routing_headers(model: EncoderModel) -> list[dict | None]:
    out = []
    for layer in model.layers:
        if layer.routing is None:
            out.append(None)
        else:
            out.append(layer.routing.to_header())
    return out


def _provenance_headers(model: EncoderModel) -> list[list[list[int]] | None]:
    out = []
    for layer in model.layers:
        if isinstance(layer.ffn, ExpertSet):
            out.append([[int(c) for c in prov] for prov in layer.ffn.provenance])
        else:
            out.append(None)
    return out


def save_checkpoint(model: EncoderModel, path: str,
                    vocab_file: str | None = None,
                    importance_digest: str | None = None) -> None:
    named = model.named_parameters()
    manifest = [{"name": name, "shape": list(t.shape)} for name, t in named.items()]
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                       for t in named.values())
    header = {
        "format_version": VERSION,
        "config": model.cfg.to_dict(),
        "manifest": manifest,
        "routing": _routing_headers(model),
        "provenance": _provenance_headers(model),
        "vocab_file": vocab_file,
        "importance_digest": importance_digest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path: str) -> EncoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = blob[12 + hlen:]

    expected = sum(int(np.prod(m["shape"])) * 4 for m in header["manifest"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest requires {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    cfg = ModelConfig.from_dict(header["config"])
    model = EncoderModel(cfg, seed=0)
    if cfg.moe is not None:
        _install_moe_structure(model, header)

    named = model.named_parameters()
    offset = 0
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f4").reshape(shape)
        offset += size
        if name not in named:
            raise CheckpointError(f"{path}: unknown tensor {name!r} in manifest")
        target = named[name]
        if target.shape != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        target.data = arr.astype(np.float64)
    return model


def _install_moe_structure(model: EncoderModel, header: dict) -> None:
    """Replace dense FFNs with expert sets shaped per the header."""
    cfg = model.cfg
    n, e = cfg.moe.num_experts, cfg.moe.expert_dim
    d = cfg.embed_dim
    for i, layer in enumerate(model.layers):
        prov = header["provenance"][i]
        es = ExpertSet([], [], [], [], [])
        for j in range(n):
            es.w1.append(Tensor(np.zeros((d, e)), requires_grad=True))
            es.b1.append(Tensor(np.zeros(e), requires_grad=True))
            es.w2.append(Tensor(np.zeros((e, d)), requires_grad=True))
            es.b2.append(Tensor(np.zeros(d), requires_grad=True))
            es.provenance.append(np.asarray(prov[j], dtype=np.int64))
        layer.ffn = es
        rh = header["routing"][i]
        if rh is None:
            layer.routing = None
        elif rh["strategy"] == GATE:
            layer.routing = RoutingTable(
                GATE, gate_weight=Tensor(np.zeros((d, rh["num_experts"])),
                                         requires_grad=True),
                num_experts=rh["num_experts"])
        else:
            layer.routing = RoutingTable(
                rh["strategy"], table=np.asarray(rh["table"], dtype=np.int64),
                num_experts=rh["num_experts"])


def importance_json_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
