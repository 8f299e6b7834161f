"""Model file format.

Layout::

    b"PKMODEL\\n"                  8-byte magic
    header length                 uint64, little-endian
    header                        UTF-8 JSON document
    blob region                   raw little-endian float32 parameters and
                                  packed mask bitsets

The header lists every node (kind, spec, inputs, eligibility flags) and, for
each parameter, its shape plus byte offset and length inside the blob
region.  ``version`` must equal :data:`FORMAT_VERSION`.
"""

import json
import struct

import numpy as np

from .errors import ModelFormatError, UnsupportedVersionError
from .model_graph import LayerNode, ModelGraph

MAGIC = b"PKMODEL\n"
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 8


def _blob(arr, chunks, offset):
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    chunks.append(data)
    return {"shape": list(arr.shape), "offset": offset, "nbytes": len(data)}, offset + len(data)


def save_model(model, path, masks=None):
    """Write ``model`` (and optional per-layer boolean ``masks``) to ``path``."""
    chunks = []
    offset = 0
    nodes = []
    for n in model.nodes:
        params = {}
        for name, arr in n.params.items():
            params[name], offset = _blob(arr, chunks, offset)
        nodes.append({
            "id": n.id, "kind": n.kind, "spec": n.spec, "inputs": list(n.inputs),
            "prunable_out": bool(n.prunable_out), "prunable_weights": bool(n.prunable_weights),
            "params": params,
        })
    mask_entries = {}
    for lid, bits in (masks or {}).items():
        data = np.packbits(np.asarray(bits, dtype=bool).ravel()).tobytes()
        chunks.append(data)
        mask_entries[lid] = {"shape": list(bits.shape), "offset": offset, "nbytes": len(data), "encoding": "bits"}
        offset += len(data)
    header = {
        "format": "prunekit-model",
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "meta": model.meta,
        "nodes": nodes,
        "masks": mask_entries,
        "blob_bytes": offset,
    }
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for c in chunks:
            f.write(c)


def _parse(raw):
    if len(raw) < _PREFIX:
        raise ModelFormatError(f"file is {len(raw)} bytes, shorter than the {_PREFIX}-byte preamble", len(raw))
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a prunekit model file (bad magic)", 0)
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : _PREFIX])
    if _PREFIX + hlen > len(raw):
        raise ModelFormatError(f"header declares {hlen} bytes but the file ends first", len(raw))
    try:
        header = json.loads(raw[_PREFIX : _PREFIX + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"header is not UTF-8: {exc.reason}", _PREFIX + exc.start) from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"header is not valid JSON: {exc.msg}", _PREFIX + exc.pos) from None
    if not isinstance(header, dict) or header.get("format") != "prunekit-model":
        raise ModelFormatError("header does not describe a prunekit model", _PREFIX)
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model file version {header.get('version')!r} is not supported (expected {FORMAT_VERSION})", _PREFIX
        )
    base = _PREFIX + hlen
    blob = memoryview(raw)[base:]
    declared = header.get("blob_bytes")
    if declared != len(blob):
        raise ModelFormatError(f"blob region is {len(blob)} bytes, header declares {declared}", base + min(len(blob), declared or 0))
    return header, blob, base


def _read_blob(entry, blob, base, what):
    try:
        off, nbytes, shape = int(entry["offset"]), int(entry["nbytes"]), tuple(entry["shape"])
    except (KeyError, TypeError, ValueError):
        raise ModelFormatError(f"{what}: malformed blob descriptor", base) from None
    if off < 0 or off + nbytes > len(blob):
        raise ModelFormatError(f"{what}: blob [{off}, {off + nbytes}) lies outside the blob region", base + off)
    return blob[off : off + nbytes], shape, off


def _decode(raw):
    header, blob, base = _parse(raw)
    nodes = []
    try:
        for spec in header["nodes"]:
            params = {}
            for name, entry in spec["params"].items():
                data, shape, off = _read_blob(entry, blob, base, f"{spec['id']}.{name}")
                if len(data) != 4 * int(np.prod(shape)):
                    raise ModelFormatError(f"{spec['id']}.{name}: {len(data)} bytes cannot hold shape {shape}", base + off)
                params[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
            nodes.append(LayerNode(spec["id"], spec["kind"], spec["spec"], params, list(spec["inputs"]),
                                   bool(spec["prunable_out"]), bool(spec["prunable_weights"])))
        model = ModelGraph(nodes, tuple(header["input_shape"]), int(header["num_classes"]), header.get("meta") or {})
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"header is missing or mistypes field {exc}", _PREFIX) from None
    masks = {}
    for lid, entry in (header.get("masks") or {}).items():
        data, shape, off = _read_blob(entry, blob, base, f"mask {lid}")
        size = int(np.prod(shape))
        if len(data) != (size + 7) // 8:
            raise ModelFormatError(f"mask {lid}: {len(data)} bytes cannot hold {size} bits", base + off)
        masks[lid] = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=size).astype(bool).reshape(shape)
    return model, masks


def load_model(path, with_masks=False):
    """Read a model file.  Returns the model, or ``(model, masks)`` with
    ``with_masks=True``.  Raises :class:`ModelFormatError` on any defect."""
    with open(path, "rb") as f:
        raw = f.read()
    model, masks = _decode(raw)
    return (model, masks) if with_masks else model
