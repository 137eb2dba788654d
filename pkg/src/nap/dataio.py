"""Single-file dataset container.

Layout: magic ``NAPD``, version (u16 LE), header length (u32 LE), UTF-8 JSON
header listing recordings (id, length, modality/channel/predictor tables),
then the raw float32 LE probability blocks in header order, then one u8 stage
block per recording. Probabilities round-trip bit-exactly at float32.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedVersionError, ValidationError
from .synth import N_STAGES, Hypnodensity, Hypnogram, PredictionSet

MAGIC = b"NAPD"
VERSION = 1


def _header_dict(sets: list[PredictionSet]) -> dict:
    recordings = []
    for ps in sets:
        recordings.append(
            {
                "id": ps.recording_id,
                "t_rec": ps.t_rec,
                "modalities": [
                    {"id": mod, "channels": channels, "predictors": predictors}
                    for mod, channels, predictors in ps.layout()
                ],
            }
        )
    return {"recordings": recordings}


def write_dataset(path, sets: list[PredictionSet]) -> None:
    """Serialize ``sets`` to ``path`` atomically (write then rename)."""
    if not sets:
        raise ValidationError("refusing to write an empty dataset")
    ids = [ps.recording_id for ps in sets]
    if len(set(ids)) != len(ids):
        raise ValidationError("recording ids must be unique within a dataset")

    header = json.dumps(_header_dict(sets)).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(2, "little"))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for ps in sets:
            for mod, channels, predictors in ps.layout():
                for channel in channels:
                    for predictor in predictors:
                        probs = ps.stream(mod, channel, predictor).probs
                        fh.write(np.ascontiguousarray(probs, dtype="<f4").tobytes())
        for ps in sets:
            fh.write(ps.truth.stages.astype(np.uint8).tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ParseError(f"truncated file while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def read_dataset(path) -> list[PredictionSet]:
    """Parse a dataset container; inverse of :func:`write_dataset`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)

    if rd.take(4, "magic") != MAGIC:
        raise ParseError(f"bad magic, expected {MAGIC!r}", offset=0)
    version = int.from_bytes(rd.take(2, "version"), "little")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset version {version} (supported: {VERSION})", offset=4
        )
    header_len = int.from_bytes(rd.take(4, "header length"), "little")
    header_start = rd.pos
    try:
        header = json.loads(rd.take(header_len, "header").decode("utf-8"))
        recordings = header["recordings"]
    except (ValueError, KeyError) as exc:
        raise ParseError(f"malformed header: {exc}", offset=header_start) from exc

    sets = []
    stage_specs = []
    for rec in recordings:
        try:
            rec_id, t_rec, modalities = rec["id"], int(rec["t_rec"]), rec["modalities"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed recording entry: {exc}", offset=header_start) from exc
        streams: dict[str, dict[str, dict[str, Hypnodensity]]] = {}
        for mod in modalities:
            channels: dict[str, dict[str, Hypnodensity]] = {}
            for channel in mod["channels"]:
                predictors: dict[str, Hypnodensity] = {}
                for predictor in mod["predictors"]:
                    raw = rd.take(t_rec * N_STAGES * 4, f"{rec_id} probabilities")
                    probs = np.frombuffer(raw, dtype="<f4").reshape(t_rec, N_STAGES)
                    try:
                        predictors[predictor] = Hypnodensity(probs.copy())
                    except ValidationError as exc:
                        raise ParseError(
                            f"invalid probabilities for {rec_id}/{mod['id']}/{channel}/"
                            f"{predictor}: {exc}",
                            offset=rd.pos - len(raw),
                        ) from exc
                channels[channel] = predictors
            streams[mod["id"]] = channels
        stage_specs.append((rec_id, t_rec, streams))

    for rec_id, t_rec, streams in stage_specs:
        raw = rd.take(t_rec, f"{rec_id} stages")
        stages = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        if stages.max(initial=0) >= N_STAGES:
            raise ParseError(f"stage byte out of range in {rec_id}", offset=rd.pos - t_rec)
        sets.append(PredictionSet(rec_id, Hypnogram(stages), streams))
    if rd.pos != len(blob):
        raise ParseError(f"{len(blob) - rd.pos} trailing bytes after payload", offset=rd.pos)
    return sets
