"""Mapping time-ordered turns onto a fixed number of output channels.

Two arrangements are supported. The speaker-based one dedicates a whole
channel to each speaker, ordered by first appearance, and therefore
cannot host more speakers than channels. The overlap-based one keeps
appending turns to the channel of the previous turn and only switches
channels when two consecutive turns actually overlap in time, so any
number of speakers and turns fits into N channels as long as no more
than N turns are ever active at once.

Overlap is tested on half-open intervals [start, end): a turn starting
exactly when another ends does not overlap it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

__all__ = [
    "COT_TOKEN",
    "ArrangementError",
    "ChannelTargets",
    "Turn",
    "arrange_overlap_based",
    "arrange_speaker_based",
    "dat_assignment",
    "pit_best_permutation",
    "serialize_channel",
    "serialize_targets",
    "turn_order",
]

# Literal change-of-turn marker inserted between consecutive turns that
# share a channel.
COT_TOKEN = "<cot>"

# Exhaustive permutation search is capped; beyond this use a proper
# assignment solver instead.
MAX_PERMUTATION_SIZE = 8


class ArrangementError(ValueError):
    """Turns cannot be arranged onto the requested channels."""


@dataclass(frozen=True)
class Turn:
    """A placed transcript span: who spoke, when, and what was said."""

    speaker: str
    start_s: float
    end_s: float
    text: str

    def __post_init__(self) -> None:
        if not self.start_s < self.end_s:
            raise ValueError(f"turn must have start < end, got [{self.start_s}, {self.end_s}]")
        if not self.text.split():
            raise ValueError("turn text has no tokens")

    @property
    def tokens(self) -> List[str]:
        return self.text.split()

    def overlaps(self, other: "Turn") -> bool:
        return self.start_s < other.end_s and other.start_s < self.end_s


@dataclass(frozen=True)
class ChannelTargets:
    """N ordered turn sequences forming the model-facing reference.

    ``feasibility_checks`` counts how many channel placements were
    tested while building the arrangement; it stays 0 for the
    speaker-based kind and is bounded by N per turn for the
    overlap-based one.
    """

    channels: Tuple[Tuple[Turn, ...], ...]
    arrangement_kind: str
    feasibility_checks: int = 0

    def __post_init__(self) -> None:
        for idx, channel in enumerate(self.channels):
            for a, b in zip(channel, channel[1:]):
                if b.start_s < a.start_s:
                    raise ValueError(f"channel {idx}: turns not sorted by start time")
                if b.start_s < a.end_s:
                    raise ValueError(f"channel {idx}: turns overlap at t={b.start_s}")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def turn_count(self) -> int:
        return sum(len(c) for c in self.channels)


def turn_order(turns: Sequence[Turn]) -> List[int]:
    """Indices of ``turns`` sorted by (start, end, input position).

    The input position breaks remaining ties so arrangement and scoring
    are deterministic even for identical spans.
    """
    return sorted(range(len(turns)), key=lambda k: (turns[k].start_s, turns[k].end_s, k))


def arrange_speaker_based(turns: Sequence[Turn], n_channels: int = 2) -> ChannelTargets:
    """Assign each speaker a dedicated channel, leading speaker first.

    >>> a = Turn("A", 0.0, 2.0, "hi there")
    >>> b = Turn("B", 1.0, 3.0, "hello")
    >>> [[t.speaker for t in ch] for ch in arrange_speaker_based([a, b]).channels]
    [['A'], ['B']]
    """
    order = turn_order(turns)
    first_seen: List[str] = []
    by_speaker: dict[str, List[Turn]] = {}
    for k in order:
        turn = turns[k]
        if turn.speaker not in by_speaker:
            first_seen.append(turn.speaker)
            by_speaker[turn.speaker] = []
        by_speaker[turn.speaker].append(turn)
    if len(first_seen) > n_channels:
        raise ArrangementError(
            f"{len(first_seen)} speakers do not fit into {n_channels} channels"
        )
    for speaker in first_seen:
        placed = by_speaker[speaker]
        for a, b in zip(placed, placed[1:]):
            if b.start_s < a.end_s:
                raise ArrangementError(
                    f"speaker {speaker!r} overlaps itself at t={b.start_s}"
                )
    channels = [tuple(by_speaker[s]) for s in first_seen]
    channels += [()] * (n_channels - len(channels))
    return ChannelTargets(channels=tuple(channels), arrangement_kind="speaker")


def arrange_overlap_based(turns: Sequence[Turn], n_channels: int = 2) -> ChannelTargets:
    """Greedy arrangement that switches channels only at speech overlap.

    Turns are processed in (start, end, input position) order. A turn
    that does not overlap its predecessor stays on the predecessor's
    channel; an overlapping turn moves to a free channel, preferring
    the one that became free most recently. Under the precondition that
    at most ``n_channels`` turns are ever simultaneously active, a free
    channel always exists.
    """
    order = turn_order(turns)
    channels: List[List[Turn]] = [[] for _ in range(n_channels)]
    last_end = [-math.inf] * n_channels
    last_channel = -1
    checks = 0
    for k in order:
        turn = turns[k]
        if last_channel >= 0:
            checks += 1
            if turn.start_s >= last_end[last_channel]:
                channels[last_channel].append(turn)
                last_end[last_channel] = turn.end_s
                continue
        best = -1
        for c in range(n_channels):
            if last_channel >= 0 and c == last_channel:
                continue  # already tested above
            checks += 1
            if last_end[c] <= turn.start_s:
                if best < 0 or last_end[c] > last_end[best]:
                    best = c
        if best < 0:
            raise ArrangementError(
                f"more than {n_channels} turns active at t={turn.start_s}"
            )
        channels[best].append(turn)
        last_end[best] = turn.end_s
        last_channel = best
    return ChannelTargets(
        channels=tuple(tuple(c) for c in channels),
        arrangement_kind="overlap",
        feasibility_checks=checks,
    )


def serialize_channel(channel: Sequence[Turn], with_cot: bool = False,
                      cot_token: str = COT_TOKEN) -> str:
    """Concatenate a channel's turn texts, optionally marking turn changes.

    >>> serialize_channel([Turn("A", 0, 1, "hello world"), Turn("B", 2, 3, "bye")], with_cot=True)
    'hello world <cot> bye'
    >>> serialize_channel([], with_cot=True)
    ''
    """
    parts = [" ".join(t.tokens) for t in channel]
    sep = f" {cot_token} " if with_cot else " "
    return sep.join(parts)


def serialize_targets(targets: ChannelTargets, with_cot: bool = False,
                      cot_token: str = COT_TOKEN) -> List[str]:
    """Serialize every channel of an arrangement."""
    return [serialize_channel(c, with_cot=with_cot, cot_token=cot_token) for c in targets.channels]


def pit_best_permutation(losses) -> Tuple[Tuple[int, ...], float]:
    """Exhaustively find the permutation minimizing the summed loss.

    ``losses[n][k]`` is the loss of pairing target ``n`` with output
    ``k``; the search covers all N! permutations (N <= 8 enforced) and
    ties resolve to the lexicographically smallest permutation.

    >>> pit_best_permutation([[1.0, 5.0], [5.0, 1.0]])
    ((0, 1), 2.0)
    >>> pit_best_permutation([[5.0, 1.0], [1.0, 5.0]])
    ((1, 0), 2.0)
    """
    mat = np.asarray(losses, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"loss matrix must be square, got shape {mat.shape}")
    if mat.size and not np.all(np.isfinite(mat)):
        raise ValueError("loss matrix contains non-finite entries")
    n = mat.shape[0]
    if n > MAX_PERMUTATION_SIZE:
        raise ValueError(f"permutation search over {n}! is refused (max N={MAX_PERMUTATION_SIZE})")
    best_perm: Tuple[int, ...] | None = None
    best_total = math.inf
    for perm in itertools.permutations(range(n)):
        total = float(sum(mat[i, perm[i]] for i in range(n)))
        if total < best_total:
            best_total = total
            best_perm = perm
    if best_perm is None:  # n == 0
        return (), 0.0
    return best_perm, best_total


def dat_assignment(n: int) -> Tuple[int, ...]:
    """Deterministic order-of-appearance assignment: the identity.

    >>> dat_assignment(2)
    (0, 1)
    """
    if n < 1:
        raise ValueError(f"need at least one channel, got {n}")
    return tuple(range(n))
