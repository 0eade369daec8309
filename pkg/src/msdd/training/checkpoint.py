"""
Binary checkpoint codec.

Layout, all integers little-endian:

    "MSDD" | version u32 | parameter entries | velocity entries (".vel")
    | RNG state 4 x u64 | phase u8 | episode u64
    | fingerprint (u16 length + ASCII hex) | drawn image ids
    | bank flag u8 [| bank section]

Drawn image ids are a u32 count followed by sorted u16 length + UTF-8 ids.
An entry section is a u32 count followed by entries of the form
name (u16 length + UTF-8) | dtype u8 (0 = f32, 1 = f64) | rank u8 | dims u32... | payload.
The bank section is a class table (u32 count, then class id u32 and rarity
u8 per class) followed by an entry section holding ``bank.w.<id>``,
``bank.proto.<id>`` and ``bank.proto.bg``.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Set, Tuple

import numpy as np

from msdd.autodiff import OptimState, Tensor
from msdd.config_models import Phase, PhaseConfig
from msdd.corpus_models import Rarity
from msdd.model import MSDDModel
from msdd.model.metric_head import BACKGROUND, Prototype, PrototypeBank
from msdd.model.reweight import ReweightingVector
from msdd.training.deploy import DeployedModel
from msdd.training.episodes import Trainer, clear_buffered_bits

MAGIC = b"MSDD"
VERSION = 2
VELOCITY_SUFFIX = ".vel"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_RARITY_CODES = {Rarity.common: 0, Rarity.rare: 1}
_CODE_RARITIES = {code: rarity for rarity, code in _RARITY_CODES.items()}
_MASK64 = (1 << 64) - 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass
class BankSection:
    rarity: Dict[int, Rarity]
    vectors: Dict[int, np.ndarray]
    prototypes: Dict[int, np.ndarray]
    background: np.ndarray


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray]
    rng_state: Tuple[int, int, int, int]
    phase: Phase
    episode: int
    fingerprint: str = ""
    bank: Optional[BankSection] = None
    touched: Set[str] = field(default_factory=set)


# -----------------------------------------------------------------------------
# RNG state
# -----------------------------------------------------------------------------


def rng_to_words(rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """PCG64 state and increment as (state_hi, state_lo, inc_hi, inc_lo)."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"Only PCG64 generators can be stored, got {state['bit_generator']}.")
    if state["has_uint32"]:
        raise CheckpointError("The generator holds a buffered half-word and cannot be stored exactly.")
    value, inc = state["state"]["state"], state["state"]["inc"]
    return value >> 64, value & _MASK64, inc >> 64, inc & _MASK64


def rng_from_words(words: Tuple[int, int, int, int]) -> np.random.Generator:
    bit_generator = np.random.PCG64()
    bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[0] << 64) | words[1], "inc": (words[2] << 64) | words[3]},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bit_generator)


# -----------------------------------------------------------------------------
# Encoding
# -----------------------------------------------------------------------------


def _pack_entry(out: bytearray, name: str, array: np.ndarray) -> None:
    dtype = np.dtype(array.dtype)
    if dtype not in _DTYPE_CODES:
        raise CheckpointError(f"Entry {name} has unsupported dtype {dtype}.")
    encoded = name.encode("utf-8")
    out += struct.pack("<H", len(encoded)) + encoded
    out += struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim)
    out += struct.pack(f"<{array.ndim}I", *array.shape)
    out += np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes()


def _pack_section(out: bytearray, entries: Dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(entries))
    for name, array in entries.items():
        _pack_entry(out, name, array)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    _pack_section(out, checkpoint.params)
    _pack_section(out, {name + VELOCITY_SUFFIX: v for name, v in checkpoint.velocity.items()})
    out += struct.pack("<4Q", *checkpoint.rng_state)
    out += struct.pack("<BQ", int(checkpoint.phase), checkpoint.episode)
    fingerprint = checkpoint.fingerprint.encode("ascii")
    out += struct.pack("<H", len(fingerprint)) + fingerprint
    out += struct.pack("<I", len(checkpoint.touched))
    for image_id in sorted(checkpoint.touched):
        encoded = image_id.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded

    bank = checkpoint.bank
    out += struct.pack("<B", 0 if bank is None else 1)
    if bank is not None:
        out += struct.pack("<I", len(bank.rarity))
        for class_id in sorted(bank.rarity):
            out += struct.pack("<IB", class_id, _RARITY_CODES[bank.rarity[class_id]])
        entries = {f"bank.w.{c}": bank.vectors[c] for c in sorted(bank.vectors)}
        entries.update({f"bank.proto.{c}": bank.prototypes[c] for c in sorted(bank.prototypes)})
        entries["bank.proto.bg"] = bank.background
        _pack_section(out, entries)
    return bytes(out)


# -----------------------------------------------------------------------------
# Decoding
# -----------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Checkpoint is truncated at byte {len(self.data)}.")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<H")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as ex:
            raise CheckpointError(f"Invalid UTF-8 string: {ex}") from ex

    def entry(self) -> Tuple[str, np.ndarray]:
        name = self.text()
        code, rank = self.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"Entry {name} has unknown dtype code {code}.")
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        shape = self.unpack(f"<{rank}I")
        payload = self.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_CODE_DTYPES[code])
        return name, array

    def section(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        entries: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name, array = self.entry()
            if name in entries:
                raise CheckpointError(f"Duplicate entry {name}.")
            entries[name] = array
        return entries


def _bank_id(name: str, prefix: str) -> int:
    try:
        return int(name[len(prefix) :])
    except ValueError:
        raise CheckpointError(f"Malformed bank entry name {name}.") from None


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Inverse of ``encode_checkpoint``; nothing is returned unless the whole buffer is well-formed."""
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic).")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {VERSION}.")

    params = reader.section()
    velocity = {}
    for name, array in reader.section().items():
        if not name.endswith(VELOCITY_SUFFIX):
            raise CheckpointError(f"Velocity entry {name} lacks the {VELOCITY_SUFFIX} suffix.")
        velocity[name[: -len(VELOCITY_SUFFIX)]] = array
    rng_state = reader.unpack("<4Q")
    phase_code, episode = reader.unpack("<BQ")
    try:
        phase = Phase(phase_code)
    except ValueError:
        raise CheckpointError(f"Unknown phase marker {phase_code}.") from None
    (length,) = reader.unpack("<H")
    fingerprint = reader.take(length).decode("ascii", errors="replace")
    touched = set()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        touched.add(reader.text())

    (flag,) = reader.unpack("<B")
    bank = None
    if flag == 1:
        (count,) = reader.unpack("<I")
        rarity = {}
        for _ in range(count):
            class_id, code = reader.unpack("<IB")
            if code not in _CODE_RARITIES:
                raise CheckpointError(f"Unknown rarity code {code} for class {class_id}.")
            rarity[class_id] = _CODE_RARITIES[code]
        entries = reader.section()
        vectors, prototypes, background = {}, {}, None
        for name, array in entries.items():
            if name == "bank.proto.bg":
                background = array
            elif name.startswith("bank.w."):
                vectors[_bank_id(name, "bank.w.")] = array
            elif name.startswith("bank.proto."):
                prototypes[_bank_id(name, "bank.proto.")] = array
            else:
                raise CheckpointError(f"Unexpected bank entry {name}.")
        if background is None:
            raise CheckpointError("The bank section has no background prototype.")
        if set(vectors) != set(rarity) or set(prototypes) != set(rarity):
            raise CheckpointError("Bank entries do not cover the class table.")
        bank = BankSection(rarity, vectors, prototypes, background)
    elif flag != 0:
        raise CheckpointError(f"Invalid bank flag {flag}.")

    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the checkpoint.")
    return Checkpoint(params, velocity, rng_state, phase, episode, fingerprint, bank, touched)  # type: ignore[arg-type]


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write atomically through a sibling temporary file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(checkpoint))
    tmp.replace(path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as ex:
        raise CheckpointError(f"Cannot read checkpoint {path}: {ex.strerror}") from ex
    return decode_checkpoint(data)


# -----------------------------------------------------------------------------
# Training state
# -----------------------------------------------------------------------------


def trainer_checkpoint(
    trainer: Trainer, phase: Phase, fingerprint: str, deployed: Optional[DeployedModel] = None
) -> Checkpoint:
    """Snapshot of the whole training state; ``deployed`` adds the bank section."""
    # The next episode drops the half-word anyway
    clear_buffered_bits(trainer.rng)
    bank = None
    if deployed is not None:
        bank = BankSection(
            rarity=dict(deployed.rarity),
            vectors={c: v.w.data.copy() for c, v in deployed.vectors.items()},
            prototypes={c: deployed.bank[c].c.data.copy() for c in deployed.class_ids},
            background=deployed.bank[BACKGROUND].c.data.copy(),
        )
    return Checkpoint(
        params=trainer.model.state_dict(),
        velocity={name: v.copy() for name, v in trainer.optim.velocity.items()},
        rng_state=rng_to_words(trainer.rng),
        phase=phase,
        episode=trainer.episode,
        fingerprint=fingerprint,
        bank=bank,
        touched=set(trainer.touched),
    )


def restore_trainer(checkpoint: Checkpoint, model: MSDDModel, cfg: PhaseConfig) -> Trainer:
    """Load the weights into ``model`` and resume its optimizer, generator, counter and drawn image ids."""
    try:
        model.load_state_dict(checkpoint.params)
    except (ValueError, TypeError) as ex:
        raise CheckpointError(f"Checkpoint does not fit the model: {ex}") from ex
    optim = OptimState(cfg.lr, cfg.momentum, {name: v.copy() for name, v in checkpoint.velocity.items()})
    try:
        optim.check(model.parameters())
    except (KeyError, ValueError) as ex:
        raise CheckpointError(f"Optimizer state does not fit the model: {ex}") from ex
    return Trainer(
        model,
        cfg,
        rng=rng_from_words(checkpoint.rng_state),
        optim=optim,
        episode=checkpoint.episode,
        touched=set(checkpoint.touched),
    )


def restore_deployed(checkpoint: Checkpoint, model: MSDDModel) -> DeployedModel:
    """Rebuild a deployed model; prototype support counts are not stored and come back as 1."""
    if checkpoint.bank is None:
        raise CheckpointError("The checkpoint holds no prototype bank.")
    try:
        model.load_state_dict(checkpoint.params)
    except (ValueError, TypeError) as ex:
        raise CheckpointError(f"Checkpoint does not fit the model: {ex}") from ex
    bank = checkpoint.bank
    dtype = model.dtype
    prototypes = [Prototype(Tensor(bank.prototypes[c], dtype=dtype), c, 1) for c in sorted(bank.prototypes)]
    prototypes.append(Prototype(Tensor(bank.background, dtype=dtype), BACKGROUND, 1))
    return DeployedModel(
        model=model,
        vectors={c: ReweightingVector(Tensor(w, dtype=dtype), c) for c, w in sorted(bank.vectors.items())},
        bank=PrototypeBank(prototypes),
        rarity=dict(bank.rarity),
    )
