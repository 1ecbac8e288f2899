"""Checkpoint files: one .npz holding the parameter arrays, the coupling
masks, and a JSON metadata record; a content hash makes runs auditable."""

import hashlib
import io
import json

import numpy as np

from .flow import ProposalModel

FORMAT_NAME = "entromc-checkpoint"
FORMAT_VERSION = 1
_META_KEY = "__meta__"
_PARAM_PREFIX = "param:"


def save_checkpoint(path, model, extra=None):
    """Write the model to path (.npz) and return the file's sha256 hex."""
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dim": model.dim,
        "n_steps": model.n_steps,
        "width": model.width,
        "eps": model.eps,
        "mode": model.mode,
        "hidden_depth": model.hidden_depth,
        "squash_lambda": model.squash_lambda,
        "param_names": sorted(model.params.keys()),
        "extra": extra or {},
    }
    arrays = {_META_KEY: np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays["masks"] = model.masks
    for k, v in model.params.items():
        arrays[_PARAM_PREFIX + k] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Read a checkpoint; returns (ProposalModel, meta dict)."""
    with np.load(path) as z:
        if _META_KEY not in z:
            raise ValueError(f"{path}: not a checkpoint file")
        meta = json.loads(bytes(z[_META_KEY]).decode())
        if meta.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: unrecognized format "
                             f"{meta.get('format')!r}")
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{meta.get('version')!r}")
        params = {k[len(_PARAM_PREFIX):]: z[k].copy()
                  for k in z.files if k.startswith(_PARAM_PREFIX)}
        masks = z["masks"].copy()
    if sorted(params.keys()) != meta["param_names"]:
        raise ValueError(f"{path}: parameter arrays do not match manifest")
    model = ProposalModel(meta["dim"], meta["n_steps"], meta["width"],
                          meta["eps"], meta["mode"], masks, params,
                          hidden_depth=meta["hidden_depth"],
                          squash_lambda=meta["squash_lambda"])
    return model, meta


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
