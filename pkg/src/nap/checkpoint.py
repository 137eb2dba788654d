"""Parameter checkpoint files.

Layout: magic ``NAPW``, version (u16 LE), config length (u32 LE) + UTF-8 JSON
config, then per parameter: name length (u16 LE) + UTF-8 name, rank (u8),
dims (u32 LE each), float32 LE values. Loading validates the stored config
against the expected one, and every block against the architecture's shapes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, UnsupportedVersionError
from .model import ModelConfig, NapModel, init_params

MAGIC = b"NAPW"
VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict) -> None:
    """Write atomically (write then rename); values are stored as float32."""
    config_blob = json.dumps(config.to_dict()).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(2, "little"))
        fh.write(len(config_blob).to_bytes(4, "little"))
        fh.write(config_blob)
        for name, p in params.items():
            data = p.data if hasattr(p, "data") else np.asarray(p)
            encoded = name.encode("utf-8")
            fh.write(len(encoded).to_bytes(2, "little"))
            fh.write(encoded)
            fh.write(data.ndim.to_bytes(1, "little"))
            for dim in data.shape:
                fh.write(int(dim).to_bytes(4, "little"))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Read (config, name -> float64 array). Raises :class:`ConfigError` if
    ``expected_config`` is given and differs from the stored one."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=pos)
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise ParseError(f"bad magic, expected {MAGIC!r}", offset=0)
    version = int.from_bytes(take(2, "version"), "little")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version} (supported: {VERSION})", offset=4
        )
    config_len = int.from_bytes(take(4, "config length"), "little")
    try:
        config = ModelConfig.from_dict(json.loads(take(config_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint config: {exc}", offset=10) from exc
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise ConfigError(
            f"checkpoint config {config.to_dict()} does not match expected "
            f"{expected_config.to_dict()}"
        )

    values: dict[str, np.ndarray] = {}
    while pos < len(blob):
        name_len = int.from_bytes(take(2, "parameter name length"), "little")
        name = take(name_len, "parameter name").decode("utf-8")
        rank = int.from_bytes(take(1, "parameter rank"), "little")
        shape = tuple(
            int.from_bytes(take(4, f"dimension of {name}"), "little") for _ in range(rank)
        )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(count * 4, f"values of {name}")
        values[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    expected_shapes = {n: p.data.shape for n, p in init_params(config, seed=0).items()}
    if set(values) != set(expected_shapes):
        missing = sorted(set(expected_shapes) - set(values))
        extra = sorted(set(values) - set(expected_shapes))
        raise ParseError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected_shapes.items():
        if values[name].shape != shape:
            raise ParseError(f"parameter '{name}' has shape {values[name].shape}, "
                             f"expected {shape}")
    return config, values


def load_model(path) -> NapModel:
    """Construct a model directly from a checkpoint file."""
    config, values = load_checkpoint(path)
    model = NapModel(config)
    model.set_params(values)
    return model
