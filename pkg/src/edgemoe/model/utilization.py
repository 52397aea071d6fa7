"""Per-layer, per-expert routing utilization over a token stream."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .transformer import ModelWeights, transformer_forward

LOG10_FLOOR = -6.0
CSV_HEADER = ("layer", "expert", "count", "ratio", "log10_ratio")


@dataclass
class Utilization:
    counts: np.ndarray  # (n_layers, routed_count) kept slots

    @property
    def ratios(self) -> np.ndarray:
        tot = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, tot, out=np.zeros(self.counts.shape), where=tot > 0)

    @property
    def log10_ratios(self) -> np.ndarray:
        r = self.ratios
        with np.errstate(divide="ignore"):
            return np.maximum(np.where(r > 0, np.log10(np.where(r > 0, r, 1.0)), LOG10_FLOOR),
                              LOG10_FLOOR)

    def argmax_experts(self) -> list[int]:
        return [int(i) for i in np.argmax(self.counts, axis=1)]

    def active_experts(self) -> int:
        """Distinct (layer, expert) pairs that received at least one slot."""
        return int(np.count_nonzero(self.counts))

    def rows(self):
        r, lg = self.ratios, self.log10_ratios
        for l in range(self.counts.shape[0]):
            for e in range(self.counts.shape[1]):
                yield l, e, int(self.counts[l, e]), float(r[l, e]), float(lg[l, e])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for l, e, c, r, lg in self.rows():
            w.writerow([l, e, c, repr(r), repr(lg)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Utilization":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            return cls(np.zeros((0, 0), dtype=np.int64))
        if tuple(rows[0].keys()) != CSV_HEADER:
            raise ValueError("unexpected utilization CSV header")
        L = max(int(r["layer"]) for r in rows) + 1
        E = max(int(r["expert"]) for r in rows) + 1
        counts = np.zeros((L, E), dtype=np.int64)
        for r in rows:
            counts[int(r["layer"]), int(r["expert"])] = int(r["count"])
        return cls(counts)


def expert_utilization(model: ModelWeights, token_stream, forced_selection=None,
                       moe_fn=None) -> Utilization:
    """Route every sequence in ``token_stream`` and count kept slots per (layer, expert).

    ``token_stream`` is one sequence of ids or an iterable of sequences.
    """
    seqs = token_stream
    if isinstance(seqs, np.ndarray) and seqs.ndim == 1 or (
        isinstance(seqs, (list, tuple)) and seqs and np.isscalar(seqs[0])
    ):
        seqs = [seqs]
    counts = np.zeros((model.base.n_l, model.routed_count), dtype=np.int64)
    for seq in seqs:
        seq = np.asarray(seq)
        if seq.size == 0:
            continue
        fr = transformer_forward(seq, model, forced_selection=forced_selection, moe_fn=moe_fn)
        counts += fr.loads.astype(np.int64)
    return Utilization(counts)
