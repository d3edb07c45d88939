"""Parameter maps: vocabulary relabeling and the absolute-position flip.

A map is plain data (a permutation plus a flag) and is applied functionally.
Under ``perm`` the row of token ``t`` in ``E`` (and in ``W``) moves to row
``perm[t]``; every block weight is copied unchanged. With ``flip_positions``
the absolute position table is read back to front, ``P'[j] = P[max_len-1-j]``.
Rotary and relative-bias models have no absolute table, so there the flip is
a no-op and is reported as such by :func:`param_map_notes`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .seqcore import TokenSeq


class ParamMapError(ValueError):
    pass


@dataclass(frozen=True)
class ParamMap:
    perm: tuple[int, ...]
    flip_positions: bool = False

    def __post_init__(self):
        perm = tuple(int(i) for i in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ParamMapError("perm must be a permutation of 0..n-1")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def identity(cls, n: int, flip_positions: bool = False) -> "ParamMap":
        return cls(tuple(range(n)), flip_positions)

    @property
    def size(self) -> int:
        return len(self.perm)

    def inverse(self) -> "ParamMap":
        inv = [0] * self.size
        for t, u in enumerate(self.perm):
            inv[u] = t
        return ParamMap(tuple(inv), self.flip_positions)

    def then(self, other: "ParamMap") -> "ParamMap":
        """The map ``other o self``: apply ``self`` first."""
        if other.size != self.size:
            raise ParamMapError(f"cannot compose maps of size {self.size} and {other.size}")
        return ParamMap(tuple(other.perm[u] for u in self.perm), self.flip_positions != other.flip_positions)

    def to_dict(self) -> dict:
        return {"perm": list(self.perm), "flip_positions": self.flip_positions}

    @classmethod
    def from_dict(cls, data: dict) -> "ParamMap":
        return cls(tuple(data["perm"]), bool(data.get("flip_positions", False)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ParamMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """``M`` with ``M[perm[t], t] = 1``, so ``M @ E`` relabels rows like the map."""
    n = len(perm)
    m = np.zeros((n, n))
    m[list(perm), np.arange(n)] = 1.0
    return m


def param_map_notes(psi: ParamMap, cfg: ModelConfig) -> list[str]:
    notes = []
    if psi.flip_positions and cfg.pos_mode != "learned_absolute":
        notes.append(f"flip_positions has no effect for pos_mode={cfg.pos_mode} (no absolute position table)")
    return notes


def _relabel(psi: ParamMap, tensors: Params, cfg: ModelConfig) -> Params:
    if psi.size != cfg.vocab_size:
        raise ParamMapError(f"map has size {psi.size}, model vocabulary has {cfg.vocab_size}")
    shapes = param_shapes(cfg)
    if set(tensors) != set(shapes):
        raise ParamMapError("tensor names do not match the model config")
    idx = np.asarray(psi.perm, dtype=np.int64)
    out = {}
    for name, arr in tensors.items():
        if arr.shape != shapes[name]:
            raise ParamMapError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
        if name in ("E", "W"):
            new = np.empty_like(arr)
            new[idx] = arr
        elif name == "P" and psi.flip_positions:
            new = arr[::-1].copy()
        else:
            new = arr.copy()
        out[name] = new
    return out


def apply_param_map(psi: ParamMap, params: Params, cfg: ModelConfig) -> Params:
    return _relabel(psi, params, cfg)


def pushforward_gradient(psi: ParamMap, grads: Params, cfg: ModelConfig) -> Params:
    """Gradients move exactly like parameters: the map is a coordinate permutation."""
    return _relabel(psi, grads, cfg)


def permute_sequence(perm: Sequence[int], z: Sequence[int]) -> TokenSeq:
    n = len(perm)
    out = []
    for i, t in enumerate(z):
        if not 0 <= t < n:
            raise ParamMapError(f"token id {t} at index {i} is outside [0, {n})")
        out.append(perm[t])
    return tuple(out)


def permute_columns(perm: Sequence[int], rows: np.ndarray) -> np.ndarray:
    """Move column ``t`` of ``rows`` to column ``perm[t]``."""
    out = np.empty_like(rows)
    out[..., np.asarray(perm)] = rows
    return out
