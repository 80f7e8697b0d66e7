"""
ParamSet: ordered, named, layer-grouped parameter tensors
The unit every aggregation rule operates on
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np

from engine.python.errors import CongruenceError, ContractError, SerializationError
from engine.python.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FPAW"
FORMAT_VERSION = 1

Signature = Tuple[Tuple[int, str, Tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParamEntry:
    """One named tensor and the architectural layer it belongs to"""
    layer_index: int
    name: str
    tensor: Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape


class ParamSet:
    """
    Ordered collection of (layer_index, name, tensor) entries

    Layer indices run from the input side (lowest) to the output side
    (highest) and form a contiguous range. A full model starts at layer 1;
    the top-p subsets produced by the FedPAW server keep the original
    indices of the layers they cover.
    """

    def __init__(self, entries: Iterable[ParamEntry]):
        self._entries: Tuple[ParamEntry, ...] = tuple(entries)
        self._validate()

    def _validate(self) -> None:
        if not self._entries:
            return
        indices = [e.layer_index for e in self._entries]
        if min(indices) < 1:
            raise ContractError("layer_index values start at 1")
        if indices != sorted(indices):
            raise ContractError("ParamSet entries must be ordered by layer_index")
        distinct = sorted(set(indices))
        if distinct != list(range(distinct[0], distinct[-1] + 1)):
            raise ContractError(f"layer indices are not contiguous: {distinct}")
        names = [e.name for e in self._entries]
        if len(set(names)) != len(names):
            raise ContractError("ParamSet entry names must be unique")

    # ------------------------------------------------------------ structure

    @property
    def entries(self) -> Tuple[ParamEntry, ...]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        for entry in self._entries:
            if entry.name == name:
                return entry.tensor
        raise KeyError(name)

    @property
    def layer_indices(self) -> List[int]:
        return sorted({e.layer_index for e in self._entries})

    @property
    def layer_count(self) -> int:
        return len(self.layer_indices)

    @property
    def num_parameters(self) -> int:
        return sum(e.tensor.size for e in self._entries)

    def signature(self) -> Signature:
        return tuple((e.layer_index, e.name, e.shape) for e in self._entries)

    def is_congruent(self, other: "ParamSet") -> bool:
        return self.signature() == other.signature()

    def require_congruent(self, *others: "ParamSet") -> None:
        mine = self.signature()
        for other in others:
            if other.signature() != mine:
                raise CongruenceError("ParamSets differ in layer/name/shape structure")

    def tensors(self) -> List[Tensor]:
        return [e.tensor for e in self._entries]

    def arrays(self) -> List[np.ndarray]:
        return [e.tensor.data for e in self._entries]

    def layer(self, layer_index: int) -> List[ParamEntry]:
        return [e for e in self._entries if e.layer_index == layer_index]

    def top_layer_indices(self, p: int) -> List[int]:
        layers = self.layer_indices
        if not 1 <= p <= len(layers):
            raise ContractError(f"p must lie in 1..{len(layers)}, got {p}")
        return layers[-p:]

    def select_layers(self, layer_indices: Iterable[int]) -> "ParamSet":
        wanted = set(layer_indices)
        return ParamSet(e for e in self._entries if e.layer_index in wanted)

    def top_layers(self, p: int) -> "ParamSet":
        return self.select_layers(self.top_layer_indices(p))

    # --------------------------------------------------------------- values

    def clone(self, requires_grad: bool = False) -> "ParamSet":
        return ParamSet(
            ParamEntry(e.layer_index, e.name, Tensor(e.tensor.data, requires_grad=requires_grad, name=e.name))
            for e in self._entries
        )

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParamSet":
        """Same structure, new values (copied)"""
        if len(arrays) != len(self._entries):
            raise CongruenceError(f"expected {len(self._entries)} arrays, got {len(arrays)}")
        entries = []
        for entry, array in zip(self._entries, arrays):
            array = np.asarray(array, dtype=np.float64)
            if array.shape != entry.shape:
                raise CongruenceError(f"{entry.name}: shape {array.shape} != {entry.shape}")
            entries.append(ParamEntry(entry.layer_index, entry.name, Tensor(array, name=entry.name)))
        return ParamSet(entries)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return self.with_arrays([fn(a) for a in self.arrays()])

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def assign(self, source: "ParamSet") -> None:
        """Copy the values of a congruent ParamSet into this one in place"""
        self.require_congruent(source)
        for dst, src in zip(self.arrays(), source.arrays()):
            dst[...] = src

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if not self.is_congruent(other):
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays()))

    def flat(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def by_layer(self) -> Dict[int, List[np.ndarray]]:
        grouped: Dict[int, List[np.ndarray]] = {}
        for entry in self._entries:
            grouped.setdefault(entry.layer_index, []).append(entry.tensor.data)
        return grouped

    def __repr__(self):
        return f"<ParamSet(layers={self.layer_indices}, tensors={len(self)}, params={self.num_parameters})>"

    # -------------------------------------------------------- serialization

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(self._entries))]
        for entry in self._entries:
            name = entry.name.encode("utf-8")
            shape = entry.shape
            chunks.append(struct.pack("<II", entry.layer_index, len(name)))
            chunks.append(name)
            chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
            chunks.append(np.ascontiguousarray(entry.tensor.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        if blob[:4] != MAGIC:
            raise SerializationError("not a ParamSet file (bad magic)")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
            if version != FORMAT_VERSION:
                raise SerializationError(f"unsupported ParamSet format version {version}")
            offset = 12
            entries = []
            for _ in range(count):
                layer_index, name_len = struct.unpack_from("<II", blob, offset)
                offset += 8
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                shape = struct.unpack_from(f"<{rank}I", blob, offset)
                offset += 4 * rank
                n = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
                offset += 8 * n
                entries.append(ParamEntry(layer_index, name, Tensor(data.reshape(shape), name=name)))
        except (struct.error, ValueError) as exc:
            raise SerializationError(f"truncated or corrupt ParamSet: {exc}") from exc
        if offset != len(blob):
            raise SerializationError(f"{len(blob) - offset} trailing bytes after last entry")
        return cls(entries)

    def save(self, path: Union[str, Path]) -> int:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        logger.debug(f"Saved {self!r} to {path} ({len(blob)} bytes)")
        return len(blob)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamSet":
        return cls.from_bytes(Path(path).read_bytes())


def require_all_congruent(param_sets: Sequence[ParamSet]) -> None:
    if param_sets:
        param_sets[0].require_congruent(*param_sets[1:])
