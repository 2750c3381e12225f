"""Checkpoint files: a JSON header describing the model, then raw float64 tensors.

Layout::

    4s   magic  b"TKCK"
    H    version (1), little-endian
    I    header length in bytes
    ...  UTF-8 JSON header (sorted keys)
    ...  float64 little-endian tensors in header order
    I    crc32 over header and payload
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from tkan.errors import CheckpointMismatchError, FormatError
from tkan.model import GaitModel
from tkan.spline import SplineGrid

from .config import ARCHITECTURE_FIELDS, TrainConfig, config_hash

logger = logging.getLogger(__name__)

MAGIC = b"TKCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(default_factory=dict)

    @property
    def config(self):
        return TrainConfig.from_dict(self.header["config"])

    @property
    def epoch(self):
        return self.header["epoch"]

    @property
    def class_subjects(self):
        return list(self.header["class_subjects"])


def build_header(model, config, epoch, class_subjects, extra=None):
    grid = SplineGrid(config.grid_min, config.grid_max, config.grid_size, config.spline_degree)
    state = model.state_dict()
    header = {
        "head": config.head,
        "dims": {
            "width": config.width,
            "sub_width": config.effective_sub_width,
            "sublayers": config.sublayers,
            "clip_length": config.clip_length,
            "num_classes": model.num_classes,
        },
        "grid": grid.metadata(),
        "seed": config.seed,
        "epoch": int(epoch),
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "input_mode": config.input_mode,
        "class_subjects": list(class_subjects),
        "tensors": [[name, list(value.shape)] for name, value in state.items()],
    }
    if extra:
        header["extra"] = extra
    return header, state


def encode_checkpoint(header, state):
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(state[name], dtype="<f8").tobytes() for name, _ in header["tensors"]
    )
    body = header_bytes + payload
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(path, model, config, epoch, class_subjects, extra=None):
    header, state = build_header(model, config, epoch, class_subjects, extra)
    data = encode_checkpoint(header, state)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(data)
    os.replace(tmp_path, path)
    logger.info("wrote checkpoint %s (epoch %d, %d bytes)", path, epoch, len(data))
    return path


def decode_checkpoint(data):
    if len(data) < _PREFIX.size + _CRC.size:
        raise FormatError("truncated checkpoint", offset=len(data))
    magic, version, header_length = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    body = data[_PREFIX.size : len(data) - _CRC.size]
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(body) != stored:
        raise FormatError("checkpoint checksum mismatch", offset=len(data) - _CRC.size)
    if header_length > len(body):
        raise FormatError("header length runs past the end of the file", offset=6)
    try:
        header = json.loads(body[:header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=_PREFIX.size) from exc
    tensors = {}
    offset = header_length
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise FormatError(f"tensor {name} truncated", offset=_PREFIX.size + offset)
        tensors[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(body):
        raise FormatError("trailing bytes after tensors", offset=_PREFIX.size + offset)
    return Checkpoint(header=header, tensors=tensors)


def read_checkpoint(path):
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())


def architecture_diff(expected, found):
    diff = {}
    for key in ARCHITECTURE_FIELDS:
        left, right = getattr(expected, key), getattr(found, key)
        if left != right:
            diff[key] = (left, right)
    return diff


def load_checkpoint(path, expected=None):
    """Rebuild the model stored at ``path``.

    With ``expected`` set, refuse to load unless the architecture hash agrees,
    listing each differing field.
    """
    checkpoint = read_checkpoint(path)
    stored = checkpoint.config
    if config_hash(stored) != checkpoint.header["config_hash"]:
        raise CheckpointMismatchError(f"{path}: header hash does not match its own config")
    if expected is not None and config_hash(expected) != checkpoint.header["config_hash"]:
        raise CheckpointMismatchError(
            f"{path}: checkpoint architecture differs from the requested config",
            diff=architecture_diff(expected, stored),
        )
    model = GaitModel(stored, checkpoint.header["dims"]["num_classes"])
    model.load_state_dict(checkpoint.tensors)
    logger.info("loaded checkpoint %s (%s head, epoch %d)", path, stored.head, checkpoint.epoch)
    return model, checkpoint
