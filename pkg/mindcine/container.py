"""
Array container shared by manifests, checkpoints, adapter tables and
reconstructions.

A container is a directory with one JSON header and one raw file per array:
little-endian float32, row-major. The header lists every array with its
relative path and shape, array byte lengths are validated against it on load.
"""
import json
import logging
import os

import numpy as np
import torch

from mindcine.defs import IngestionError, SCHEMA_VERSION, SchemaVersionError

logger = logging.getLogger(__name__)

HEADER_FILENAME = "header.json"
ARRAY_DTYPE = np.dtype("<f4")


def _remove_none_entries(d):
    if not isinstance(d, dict):
        return d
    return dict((k, _remove_none_entries(v)) for k, v in d.items() if v is not None)


def write_header(root, header):
    os.makedirs(root, exist_ok=True)
    header = dict(header)
    header.setdefault("schema", SCHEMA_VERSION)
    path = os.path.join(root, HEADER_FILENAME)
    with open(path, "w") as f:
        json.dump(_remove_none_entries(header), f, sort_keys=True, indent=4, separators=(",", ": "))
    return path


def read_header(root, kind=None):
    path = os.path.join(root, HEADER_FILENAME)
    if not os.path.exists(path):
        raise IngestionError("no {} in {}".format(HEADER_FILENAME, root))
    try:
        with open(path) as f:
            header = json.load(f)
    except ValueError as e:
        raise IngestionError("{}: {}".format(path, e))

    found = header.get("schema")
    if found != SCHEMA_VERSION:
        raise SchemaVersionError(found, SCHEMA_VERSION)
    if kind is not None and header.get("kind") != kind:
        raise IngestionError("{} is a '{}' container, expected '{}'".format(root, header.get("kind"), kind))
    return header


def write_array(root, relpath, arr):
    """ write one array, return its header entry """
    arr = np.ascontiguousarray(arr, dtype=ARRAY_DTYPE)
    path = os.path.join(root, relpath)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    arr.tofile(path)
    return {"file": relpath, "shape": list(arr.shape)}


def read_array(root, entry, shape=None, clip_id=None):
    """
    read the array described by a header entry.
    shape, if given, is the shape the header dims promise and must match the entry.
    """
    if shape is not None and list(shape) != list(entry["shape"]):
        raise IngestionError(
            "'{}' shape {} does not match header dims {}".format(entry["file"], entry["shape"], list(shape)),
            clip_id,
        )
    path = os.path.join(root, entry["file"])
    if not os.path.exists(path):
        raise IngestionError("missing array file '{}'".format(entry["file"]), clip_id)

    data = np.fromfile(path, dtype=ARRAY_DTYPE)
    expected = int(np.prod(entry["shape"], dtype=np.int64))
    if data.size != expected:
        raise IngestionError(
            "'{}' holds {} values, header shape {} needs {}".format(entry["file"], data.size, entry["shape"], expected),
            clip_id,
        )
    return data.reshape(entry["shape"])


def save_state(root, kind, modules, header=None):
    """
    checkpoint: header (caller supplied echo/metrics) plus every tensor of every
    module's state_dict as float32 arrays.
    """
    header = dict(header or {})
    header["kind"] = kind
    params = {}
    for mname, module in modules.items():
        for pname, tensor in module.state_dict().items():
            rel = os.path.join("params", mname, pname + ".f32")
            params["{}/{}".format(mname, pname)] = write_array(root, rel, tensor.detach().cpu().numpy())
    header["params"] = params
    write_header(root, header)
    logger.info("saved %s checkpoint to %s (%d arrays)", kind, root, len(params))
    return root


def load_state(root, kind, modules):
    """ load arrays into existing modules, the modules define the expected shapes """
    header = read_header(root, kind=kind)
    params = header.get("params", {})
    for mname, module in modules.items():
        state = {}
        for pname, tensor in module.state_dict().items():
            key = "{}/{}".format(mname, pname)
            if key not in params:
                raise IngestionError("checkpoint {} has no array '{}'".format(root, key))
            arr = read_array(root, params[key], shape=tuple(tensor.shape))
            state[pname] = torch.from_numpy(arr.copy()).to(tensor.dtype)
        module.load_state_dict(state)
    return header
