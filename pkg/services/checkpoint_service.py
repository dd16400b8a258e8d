import logging
import os
import shutil
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from errors import ArchitectureMismatchError, CheckpointFormatError, DataFileError
from network.model import ModelConfig, STMoEBert, architecture_differences
from services.optimizer import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"STMB"
FORMAT_VERSION = 1
OPT_M_PREFIX = "opt.m."
OPT_V_PREFIX = "opt.v."
OPT_LR_PREFIX = "opt.lr."


@dataclass
class Checkpoint:
    """Metadata (key=value strings) plus named float64 arrays."""

    metadata: Dict[str, str] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def phase(self) -> str:
        return self.metadata.get("phase", "")

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", "0"))

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", "0"))

    @property
    def has_optimizer(self) -> bool:
        return any(name.startswith(OPT_M_PREFIX) for name in self.tensors)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_metadata(self.metadata)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}


def _pack(metadata: Dict[str, str], tensors: Dict[str, np.ndarray]) -> bytes:
    meta = "".join(f"{k}={metadata[k]}\n" for k in sorted(metadata)).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack(data: bytes, path: str) -> Checkpoint:
    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    metadata: Dict[str, str] = {}
    for line in reader.take(reader.u32()).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        metadata[key] = value
    tensors: Dict[str, np.ndarray] = {}
    while reader.pos < len(data):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(struct.unpack(f"<{rank}I", reader.take(4 * rank)))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(metadata=metadata, tensors=tensors)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    payload = _pack(checkpoint.metadata, checkpoint.tensors)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise DataFileError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("Checkpoint saved path=%s tensors=%s", path, len(checkpoint.tensors))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataFileError(f"cannot read checkpoint {path}: {exc}") from exc
    return _unpack(data, path)


def capture(
    model: STMoEBert,
    *,
    phase: str,
    epoch: int,
    seed: int,
    optimizer: Optional[OptimizerState] = None,
    extra: Optional[Dict[str, str]] = None,
) -> Checkpoint:
    """Snapshot model parameters (and optimizer moments) into a Checkpoint."""
    metadata = {"format": f"stmb-{FORMAT_VERSION}", "phase": phase, "epoch": str(epoch), "seed": str(seed)}
    metadata.update(model.config.to_metadata())
    tensors = {name: p.data.copy() for name, p in model.named_parameters()}
    metadata["step"] = str(optimizer.step if optimizer is not None else 0)
    if optimizer is not None:
        metadata["opt.weight_decay"] = repr(optimizer.weight_decay)
        metadata["opt.warmup_steps"] = str(optimizer.warmup_steps)
        metadata["opt.groups"] = ",".join(g.name for g in optimizer.groups)
        for group in optimizer.groups:
            metadata[OPT_LR_PREFIX + group.name] = repr(group.lr)
        for name, _ in optimizer.named_parameters():
            tensors[OPT_M_PREFIX + name] = optimizer.m[name].copy()
            tensors[OPT_V_PREFIX + name] = optimizer.v[name].copy()
    metadata.update(extra or {})
    return Checkpoint(metadata=metadata, tensors=tensors)


def check_architecture(checkpoint: Checkpoint, config: ModelConfig) -> None:
    diffs = architecture_differences(checkpoint.model_config(), config)
    if diffs:
        raise ArchitectureMismatchError(diffs)


def restore_model(checkpoint: Checkpoint, config: Optional[ModelConfig] = None) -> STMoEBert:
    """
    Rebuild the network from a checkpoint. When config is given, its architecture
    must match the checkpoint's; its train-time knobs (dropout, aux weight) win.
    """
    stored = checkpoint.model_config()
    if config is not None:
        check_architecture(checkpoint, config)
        stored = config
    model = STMoEBert(stored, np.random.default_rng(0))
    params = checkpoint.parameters()
    names = {name for name, _ in model.named_parameters()}
    if names != set(params):
        missing = sorted(names - set(params))
        unexpected = sorted(set(params) - names)
        raise ArchitectureMismatchError({"parameters": (f"unexpected={unexpected}", f"missing={missing}")})
    for name, param in model.named_parameters():
        if params[name].shape != param.shape:
            raise ArchitectureMismatchError({name: (str(params[name].shape), str(param.shape))})
        param.data[...] = params[name]
    return model


def restore_optimizer(checkpoint: Checkpoint, optimizer: OptimizerState) -> None:
    for name, _ in optimizer.named_parameters():
        try:
            optimizer.m[name][...] = checkpoint.tensors[OPT_M_PREFIX + name]
            optimizer.v[name][...] = checkpoint.tensors[OPT_V_PREFIX + name]
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint has no optimizer state for {name}") from exc
    for group in optimizer.groups:
        key = OPT_LR_PREFIX + group.name
        if key in checkpoint.metadata:
            group.lr = float(checkpoint.metadata[key])
    optimizer.step = checkpoint.step


def link_best(out_dir: str, target_name: str, link_name: str = "best.stmb") -> str:
    """Point best.stmb at target_name; copies when symlinks are unavailable."""
    link_path = os.path.join(out_dir, link_name)
    try:
        if os.path.lexists(link_path):
            os.remove(link_path)
        try:
            os.symlink(target_name, link_path)
        except (OSError, NotImplementedError):
            shutil.copyfile(os.path.join(out_dir, target_name), link_path)
    except OSError as exc:
        raise DataFileError(f"cannot update {link_path}: {exc}") from exc
    return link_path


def epoch_filename(epoch: int) -> str:
    return f"epoch_{epoch:03d}.stmb"
