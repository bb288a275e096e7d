"""Encoder weight files.

Layout::

    b"RDOT" | u16 version | u32 manifest length | manifest JSON | payloads

The manifest (`treeood.schemas.WeightManifestSchema`) lists the encoder kind,
its constructor settings and the name and shape of every tensor; payloads are
little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import typing

import marshmallow as ma
import numpy as np
import torch

from treeood.exceptions import FormatError, LoadError, VersionError
from treeood.nn import GraphEncoder, TreeEncoder
from treeood.schemas import WeightManifestSchema

logger = logging.getLogger(__name__)

__all__ = ["FORMAT_VERSION", "MAGIC", "from_bytes", "load_weights", "save_weights", "to_bytes"]

MAGIC = b"RDOT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHI")

Encoder = typing.Union[GraphEncoder, TreeEncoder]

_KINDS: dict[str, type[GraphEncoder] | type[TreeEncoder]] = {
    "graph": GraphEncoder,
    "tree": TreeEncoder,
}


def to_bytes(encoder: Encoder) -> bytes:
    kind = "graph" if isinstance(encoder, GraphEncoder) else "tree"
    state = encoder.state_dict()
    manifest = WeightManifestSchema().dump(
        {
            "kind": kind,
            "config": encoder.settings(),
            "frozen": encoder.frozen,
            "tensors": [
                {"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()
            ],
        }
    )
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(encoded)), encoded]
    for tensor in state.values():
        chunks.append(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    return b"".join(chunks)


def from_bytes(data: bytes) -> Encoder:
    """Rebuild an encoder from `to_bytes` output.

    :raises FormatError: on wrong magic bytes, truncation or a bad manifest.
    :raises VersionError: if the file was written by another format version.
    """
    if len(data) < _HEADER.size:
        raise FormatError("weight file is truncated (no header)")
    magic, version, manifest_length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"not a weight file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"weight file format version {version} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    offset = _HEADER.size
    raw_manifest = data[offset : offset + manifest_length]
    if len(raw_manifest) != manifest_length:
        raise FormatError("weight file is truncated (manifest)")
    try:
        manifest = WeightManifestSchema().load(json.loads(raw_manifest))
    except (ValueError, ma.ValidationError) as error:
        raise FormatError(f"invalid weight manifest: {error}") from error
    offset += manifest_length

    state = {}
    for spec in manifest["tensors"]:
        size = int(np.prod(spec["shape"], dtype=np.int64)) * 8
        chunk = data[offset : offset + size]
        if len(chunk) != size:
            raise FormatError(f"weight file is truncated (tensor {spec['name']})")
        array = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(array.astype(np.float64))
        offset += size
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last tensor")

    encoder = _KINDS[manifest["kind"]](**manifest["config"])
    try:
        encoder.load_state_dict(state)
    except RuntimeError as error:
        raise FormatError(f"tensors do not match the encoder: {error}") from error
    if manifest["frozen"]:
        encoder.freeze()
    return encoder


def save_weights(path: str | os.PathLike[str], encoder: Encoder) -> None:
    with open(path, "wb") as fp:
        fp.write(to_bytes(encoder))
    logger.info("saved %s encoder to %s", type(encoder).__name__, path)


def load_weights(path: str | os.PathLike[str]) -> Encoder:
    try:
        with open(path, "rb") as fp:
            data = fp.read()
    except OSError as error:
        raise LoadError(f"cannot read weight file {path}: {error}") from error
    return from_bytes(data)
