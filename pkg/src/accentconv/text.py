"""Phoneme inventories and transcript encoding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


class UnknownSymbolError(KeyError):
    def __init__(self, symbol: str, position: int):
        super().__init__(f"unknown phoneme symbol {symbol!r} at position {position}")
        self.symbol = symbol
        self.position = position


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered symbol table. Ids 0..2 are PAD/SOS/EOS, symbol k gets id k + 3."""

    symbols: tuple[str, ...]
    name: str = "default"

    def __post_init__(self):
        symbols = tuple(self.symbols)
        if len(set(symbols)) != len(symbols):
            dupes = sorted({s for s in symbols if symbols.count(s) > 1})
            raise ValueError(f"duplicate inventory symbols: {dupes}")
        clash = set(symbols) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"symbols collide with special tokens: {sorted(clash)}")
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "_index", {s: i + NUM_SPECIALS for i, s in enumerate(symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def num_ids(self) -> int:
        return len(self.symbols) + NUM_SPECIALS

    @property
    def num_classes(self) -> int:
        """Output classes of a recognizer: every symbol plus EOS."""
        return len(self.symbols) + 1

    def id_of(self, symbol: str) -> int:
        return self._index[symbol]

    def symbol_of(self, idx: int) -> str:
        if idx < NUM_SPECIALS:
            return SPECIAL_TOKENS[idx]
        return self.symbols[idx - NUM_SPECIALS]

    def to_dict(self) -> dict:
        return {"name": self.name, "symbols": list(self.symbols)}

    @classmethod
    def from_dict(cls, d: dict) -> "PhonemeInventory":
        return cls(tuple(d["symbols"]), d.get("name", "default"))


def load_inventory(path, name: str | None = None) -> PhonemeInventory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    symbols = tuple(line.strip() for line in lines if line.strip())
    return PhonemeInventory(symbols, name or Path(path).stem)


def save_inventory(inv: PhonemeInventory, path) -> None:
    Path(path).write_text("".join(s + "\n" for s in inv.symbols), encoding="utf-8")


@dataclass(frozen=True)
class PhonemeSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate(self, inv: PhonemeInventory) -> None:
        ids = self.ids
        body = ids
        if body and body[0] == SOS:
            body = body[1:]
        if body and body[-1] == EOS:
            body = body[:-1]
        for pos, i in enumerate(body):
            if i < NUM_SPECIALS or i >= inv.num_ids:
                raise ValueError(f"id {i} at position {pos} is not a symbol of inventory {inv.name!r}")


def encode_transcript(symbols: Sequence[str], inv: PhonemeInventory) -> PhonemeSequence:
    ids = []
    for pos, s in enumerate(symbols):
        try:
            ids.append(inv.id_of(s))
        except KeyError:
            raise UnknownSymbolError(s, pos) from None
    return PhonemeSequence(tuple(ids))


def decode_ids(seq: PhonemeSequence | Iterable[int], inv: PhonemeInventory) -> list[str]:
    return [inv.symbol_of(i) for i in strip_specials(seq)]


def frame_for_decoding(seq: PhonemeSequence) -> PhonemeSequence:
    return PhonemeSequence((SOS, *seq.ids, EOS))


def strip_specials(seq: PhonemeSequence | Iterable[int]) -> PhonemeSequence:
    ids = seq.ids if isinstance(seq, PhonemeSequence) else tuple(seq)
    return PhonemeSequence(tuple(i for i in ids if i >= NUM_SPECIALS))


def pad_batch(seqs: Sequence[PhonemeSequence], pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a (B, max_len) id matrix; returns (ids, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s.ids
    return out, lengths
