"""
Checkpoint files.

Layout: b"AVFM", u32 LE format version, u64 LE header length, UTF-8 JSON
header (sorted keys), then every tensor as little-endian float32 in the
order the header lists them.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from . import heads, lora, vit
from .errors import CheckpointError
from .model import ModelState
from .trainer import Checkpoint, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"AVFM"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")


def _header(ckpt: Checkpoint) -> dict:
    model = ckpt.model
    tensors, offset = [], 0
    for name, tensor in model.named_parameters().items():
        count = int(tensor.size)
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": count})
        offset += 4 * count
    return {
        "format_version": FORMAT_VERSION,
        "backbone": model.config.to_dict(),
        "plan": model.plan.to_dict() if model.plan is not None else None,
        "decoder_groups": model.decoder.groups,
        "backbone_mode": model.backbone_mode,
        "train_config": ckpt.train_config.to_dict(),
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "census": model.census(),
        "tensors": tensors,
        "payload_bytes": offset,
    }


def save(ckpt: Checkpoint, path: Union[str, Path]) -> str:
    """Write ``ckpt`` to ``path``; returns the file's SHA-256"""
    header = json.dumps(_header(ckpt), sort_keys=True).encode("utf-8")
    chunks = [PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for tensor in ckpt.model.named_parameters().values():
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info("Saved checkpoint %s (%d bytes, sha256 %s)", path, len(blob), digest[:12])
    return digest


def _parse_header(blob: bytes) -> tuple:
    if len(blob) < PREAMBLE.size:
        raise CheckpointError("File too short for the checkpoint preamble", offset=0, expected=PREAMBLE.size)
    magic, version, header_length = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"Bad magic bytes {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported format version {version} (reader supports {FORMAT_VERSION})", offset=4)
    start = PREAMBLE.size
    if len(blob) < start + header_length:
        raise CheckpointError("Header truncated", offset=start, expected=header_length)
    try:
        header = json.loads(blob[start:start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"Header is not valid JSON: {e}", offset=start) from e
    return header, start + header_length


def read_header(path: Union[str, Path]) -> dict:
    return _parse_header(Path(path).read_bytes())[0]


def _skeleton(header: dict) -> ModelState:
    """Model with the stored architecture; values are overwritten from the payload"""
    config = vit.BackboneConfig(**header["backbone"])
    rng = np.random.default_rng(0)
    backbone = vit.init_backbone(config, rng)
    if header["plan"] is not None:
        lora.inject(backbone, lora.InjectionPlan.from_dict(header["plan"]), config.adapter_rank, rng)
    return ModelState(
        backbone=backbone,
        decoder=heads.init_decoder(config.embed_dim, header["decoder_groups"], rng),
        score_head=heads.init_score_head(config.embed_dim, rng),
        backbone_mode=header["backbone_mode"],
    )


def load(path: Union[str, Path]) -> Checkpoint:
    blob = Path(path).read_bytes()
    header, payload_start = _parse_header(blob)
    model = _skeleton(header)
    named = model.named_parameters()

    stored = [entry["name"] for entry in header["tensors"]]
    if sorted(stored) != sorted(named):
        missing = sorted(set(named) - set(stored))
        extra = sorted(set(stored) - set(named))
        raise CheckpointError(f"Tensor names do not match the architecture (missing {missing}, unexpected {extra})")

    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        length = 4 * entry["count"]
        if len(blob) < start + length:
            raise CheckpointError(f"Payload truncated in tensor '{entry['name']}'", offset=start, expected=length)
        tensor = named[entry["name"]]
        values = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=start).astype(np.float64)
        if list(tensor.shape) != entry["shape"]:
            raise CheckpointError(f"Tensor '{entry['name']}' has shape {entry['shape']}, expected {list(tensor.shape)}")
        tensor.data = values.reshape(tensor.shape)
    model.apply_trainability()

    return Checkpoint(
        model=model,
        train_config=TrainConfig.from_dict(header["train_config"]),
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        metadata=header["metadata"],
    )
