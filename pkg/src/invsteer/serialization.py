"""Versioned JSON container used for feature maps, directions and subjects.

Arrays are stored row-major as lists of float64 values. ``json`` writes floats
with their shortest round-trip repr, so loading reproduces every bit.
"""

import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "invsteer"
VERSION = 1


def encode_array(a):
    if isinstance(a, torch.Tensor):
        a = a.detach().numpy()
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def decode_array(obj):
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def dump_container(kind, payload, path=None):
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "payload": payload}
    text = json.dumps(doc, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_container(source, kind=None):
    """Parse a container from a path or a JSON string, checking format and kind."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        text = Path(source).read_text()
    else:
        text = str(source)
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not an invsteer container")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported container version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} container, got {doc.get('kind')!r}")
    return doc["kind"], doc["payload"]
