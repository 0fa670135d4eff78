"""Scoring: word edit distance, OED WER, ORC WER and turn counting.

ORC WER assigns each reference turn wholly to one of the two hypothesis
channels, concatenates the assigned turns per channel in start-time
order, and reports the assignment with the lowest summed edit distance.
:func:`orc_wer` evaluates every one of the 2^U assignments (vectorized
over assignments, but each is scored independently); :func:`orc_wer_fast`
computes the same optimum with a joint dynamic program over (turn
prefix, position in hypothesis 0, position in hypothesis 1) states and
scales to turn counts where enumeration is hopeless. Both resolve ties
to the lexicographically smallest assignment vector, so they agree not
only on the WER but on the winning assignment and the error breakdown.

OED WER instead permutes whole channels: per-speaker references against
per-channel hypotheses, minimum over channel permutations.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from turnmix.arrange import COT_TOKEN, Turn, pit_best_permutation, turn_order

__all__ = [
    "CorpusReport",
    "EditStats",
    "OedResult",
    "OrcResult",
    "ScoredUtterance",
    "StateLimitError",
    "TooManyTurnsError",
    "TurnConfusion",
    "aggregate_report",
    "count_estimated_turns",
    "normalize_tokens",
    "oed_wer",
    "orc_wer",
    "orc_wer_fast",
    "tokenize",
    "turn_confusion",
    "word_edit_distance",
]

# Default cap on the exhaustive ORC path; references with more turns
# must either go through orc_wer_fast or be skipped.
DEFAULT_MAX_EXHAUSTIVE_TURNS = 16

# State budget for the joint DP: (turns+1) * (|hyp0|+1) * (|hyp1|+1).
DEFAULT_MAX_STATES = 50_000_000


class TooManyTurnsError(ValueError):
    """Exhaustive ORC scoring was asked to enumerate too many turns."""

    def __init__(self, turn_count: int, cap: int):
        super().__init__(
            f"{turn_count} turns exceed the exhaustive cap of {cap}; "
            f"use orc_wer_fast or skip the utterance"
        )
        self.turn_count = turn_count
        self.cap = cap


class StateLimitError(RuntimeError):
    """The joint DP would exceed its configured state budget."""

    def __init__(self, required_states: int, max_states: int):
        super().__init__(
            f"joint DP needs {required_states} states, limit is {max_states}"
        )
        self.required_states = required_states
        self.max_states = max_states


def tokenize(text: str) -> List[str]:
    """Whitespace tokenization, the one segmentation used everywhere."""
    return text.split()


def normalize_tokens(tokens: Iterable[str]) -> List[str]:
    """Lowercase and strip leading/trailing punctuation per token.

    Tokens that become empty are dropped. Off by default at every call
    site; scoring-time opt-in only.
    """
    out = []
    for tok in tokens:
        tok = tok.strip(string.punctuation).lower()
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class EditStats:
    """Error counts of one minimal-cost alignment.

    >>> EditStats(substitutions=1, insertions=0, deletions=0, hits=2, ref_words=3).errors
    1
    """

    substitutions: int
    insertions: int
    deletions: int
    hits: int
    ref_words: int

    def __post_init__(self) -> None:
        for name in ("substitutions", "insertions", "deletions", "hits", "ref_words"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.hits + self.substitutions + self.deletions != self.ref_words:
            raise ValueError(
                f"hits {self.hits} + subs {self.substitutions} + dels {self.deletions} "
                f"!= ref_words {self.ref_words}"
            )

    @classmethod
    def zero(cls) -> "EditStats":
        return cls(0, 0, 0, 0, 0)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float | None:
        """Errors over reference words; None when the reference is empty."""
        if self.ref_words == 0:
            return None
        return self.errors / self.ref_words

    def __add__(self, other: "EditStats") -> "EditStats":
        if not isinstance(other, EditStats):
            return NotImplemented
        return EditStats(
            substitutions=self.substitutions + other.substitutions,
            insertions=self.insertions + other.insertions,
            deletions=self.deletions + other.deletions,
            hits=self.hits + other.hits,
            ref_words=self.ref_words + other.ref_words,
        )

    def __radd__(self, other):
        if other == 0:  # support sum()
            return self
        return NotImplemented


def _as_tokens(seq) -> List[str]:
    if isinstance(seq, str):
        return seq.split()
    return list(seq)


def _intern(vocab: Dict[str, int], tokens: Sequence[str]) -> np.ndarray:
    ids = np.empty(len(tokens), dtype=np.int32)
    for i, tok in enumerate(tokens):
        ids[i] = vocab.setdefault(tok, len(vocab))
    return ids


def _batch_extend(rows: np.ndarray, word_ids: np.ndarray, hyp_ids: np.ndarray) -> np.ndarray:
    """Advance a batch of edit-distance rows by a sequence of words.

    ``rows[b]`` holds, for every prefix position of the hypothesis, the
    best cost reaching that position; the result holds the same after
    additionally aligning ``word_ids``. Standard unit-cost recurrence;
    the in-row insertion chain is resolved with a prefix-minimum scan.
    """
    m = int(hyp_ids.size)
    ar = np.arange(m + 1, dtype=np.int32)
    cur = np.asarray(rows, dtype=np.int32)
    for w in word_ids:
        nxt = np.empty(cur.shape, dtype=np.int32)
        nxt[:, 0] = cur[:, 0] + 1
        if m:
            np.minimum(cur[:, :-1] + (hyp_ids != w), cur[:, 1:] + 1, out=nxt[:, 1:])
        nxt -= ar
        np.minimum.accumulate(nxt, axis=1, out=nxt)
        nxt += ar
        cur = nxt
    return cur


def _batch_extend_rev(rows: np.ndarray, word_ids: np.ndarray, hyp_ids: np.ndarray) -> np.ndarray:
    """Suffix-side counterpart of :func:`_batch_extend`.

    ``rows[b][e]`` is the cost of completing from hypothesis position e;
    the result gives the completion cost from position i after first
    aligning ``word_ids`` against some stretch hyp[i:e]. Equivalent to
    the forward extension on reversed sequences.
    """
    out = _batch_extend(rows[:, ::-1], word_ids[::-1], hyp_ids[::-1])
    return out[:, ::-1]


def _dp_matrix(ref_ids: np.ndarray, hyp_ids: np.ndarray) -> np.ndarray:
    """Full Levenshtein matrix with unit costs, for backtracing."""
    n, m = int(ref_ids.size), int(hyp_ids.size)
    ar = np.arange(m + 1, dtype=np.int32)
    mat = np.empty((n + 1, m + 1), dtype=np.int32)
    mat[0] = ar
    for i in range(1, n + 1):
        prev, nxt = mat[i - 1], mat[i]
        nxt[0] = i
        if m:
            np.minimum(prev[:-1] + (hyp_ids != ref_ids[i - 1]), prev[1:] + 1, out=nxt[1:])
        nxt -= ar
        np.minimum.accumulate(nxt, out=nxt)
        nxt += ar
    return mat


def word_edit_distance(ref, hyp) -> EditStats:
    """Minimal-cost word alignment with a deterministic backtrace.

    Accepts strings (whitespace-split) or token sequences. At equal
    cost the backtrace prefers hit > substitution > deletion >
    insertion, which pins down the S/I/D decomposition (the total
    distance is unaffected by ties).

    >>> word_edit_distance("a b c", "a x c")
    EditStats(substitutions=1, insertions=0, deletions=0, hits=2, ref_words=3)
    >>> word_edit_distance("", "a b").insertions
    2
    """
    ref_tokens = _as_tokens(ref)
    hyp_tokens = _as_tokens(hyp)
    vocab: Dict[str, int] = {}
    ref_ids = _intern(vocab, ref_tokens)
    hyp_ids = _intern(vocab, hyp_tokens)
    mat = _dp_matrix(ref_ids, hyp_ids)
    i, j = len(ref_tokens), len(hyp_tokens)
    hits = subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref_ids[i - 1] == hyp_ids[j - 1] and mat[i, j] == mat[i - 1, j - 1]:
            hits += 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and mat[i, j] == mat[i - 1, j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and mat[i, j] == mat[i - 1, j] + 1:
            dels += 1
            i = i - 1
        else:
            ins += 1
            j = j - 1
    return EditStats(substitutions=subs, insertions=ins, deletions=dels,
                     hits=hits, ref_words=len(ref_tokens))


@dataclass(frozen=True)
class OedResult:
    """Best channel pairing of per-speaker references to hypotheses."""

    stats: EditStats
    wer: float | None
    permutation: Tuple[int, ...]


def oed_wer(refs: Sequence, hyps: Sequence, normalize: bool = False) -> OedResult:
    """WER under the channel permutation minimizing total edit distance.

    Reference n is scored against hypothesis permutation(n); shorter
    side is padded with empty sequences. Ties resolve to the
    lexicographically smallest permutation.

    >>> r = oed_wer(["a b c", "d e"], ["d e", "a b c"])
    >>> r.wer, r.permutation
    (0.0, (1, 0))
    """
    ref_tokens = [_as_tokens(r) for r in refs]
    hyp_tokens = [_as_tokens(h) for h in hyps]
    if normalize:
        ref_tokens = [normalize_tokens(t) for t in ref_tokens]
        hyp_tokens = [normalize_tokens(t) for t in hyp_tokens]
    n = max(len(ref_tokens), len(hyp_tokens))
    ref_tokens += [[] for _ in range(n - len(ref_tokens))]
    hyp_tokens += [[] for _ in range(n - len(hyp_tokens))]
    pair_stats = [[word_edit_distance(r, h) for h in hyp_tokens] for r in ref_tokens]
    losses = [[float(s.errors) for s in row] for row in pair_stats]
    perm, _total = pit_best_permutation(losses)
    stats = sum((pair_stats[i][perm[i]] for i in range(n)), EditStats.zero())
    return OedResult(stats=stats, wer=stats.wer, permutation=perm)


@dataclass(frozen=True)
class OrcResult:
    """Lowest-WER assignment of reference turns to two hypothesis channels.

    ``assignment`` maps each input turn index to its channel.
    ``combinations_evaluated`` is 2^U for the exhaustive path and the
    DP state count for the fast path.
    """

    stats: EditStats
    wer: float | None
    assignment: Mapping[int, int]
    combinations_evaluated: int


def _orc_prepare(ref_turns: Sequence[Turn], hyps: Sequence[str],
                 cot_token: str, normalize: bool):
    """Shared tokenization/interning for both ORC paths."""
    if len(hyps) != 2:
        raise ValueError(f"ORC WER is defined for exactly 2 hypothesis channels, got {len(hyps)}")
    order = turn_order(ref_turns)
    turn_tokens = [tokenize(ref_turns[k].text) for k in order]
    hyp_tokens = [[t for t in _as_tokens(h) if t != cot_token] for h in hyps]
    if normalize:
        turn_tokens = [normalize_tokens(t) for t in turn_tokens]
        hyp_tokens = [normalize_tokens(t) for t in hyp_tokens]
    vocab: Dict[str, int] = {}
    turn_ids = [_intern(vocab, t) for t in turn_tokens]
    hyp_ids = [_intern(vocab, h) for h in hyp_tokens]
    return order, turn_tokens, hyp_tokens, turn_ids, hyp_ids


def _orc_result(order, turn_tokens, hyp_tokens, channels, combinations) -> OrcResult:
    concat = [[], []]
    for u, ch in enumerate(channels):
        concat[ch].extend(turn_tokens[u])
    stats = word_edit_distance(concat[0], hyp_tokens[0]) + word_edit_distance(concat[1], hyp_tokens[1])
    assignment = {order[u]: ch for u, ch in enumerate(channels)}
    return OrcResult(
        stats=stats,
        wer=stats.wer,
        assignment=assignment,
        combinations_evaluated=combinations,
    )


def orc_wer(ref_turns: Sequence[Turn], hyps: Sequence[str],
            max_exhaustive_turns: int = DEFAULT_MAX_EXHAUSTIVE_TURNS, *,
            cot_token: str = COT_TOKEN, normalize: bool = False) -> OrcResult:
    """Exhaustive ORC WER over all 2^U turn-to-channel assignments.

    Change-of-turn tokens are stripped from the hypotheses before
    scoring; references are turn texts and never carry the marker.
    Assignments are enumerated with shared prefixes (one batched DP row
    per partial assignment) but each is scored exactly; ties resolve to
    the lexicographically smallest assignment vector over turns in
    start-time order.
    """
    order, turn_tokens, hyp_tokens, turn_ids, hyp_ids = _orc_prepare(
        ref_turns, hyps, cot_token, normalize)
    n_turns = len(turn_ids)
    if n_turns > max_exhaustive_turns:
        raise TooManyTurnsError(n_turns, max_exhaustive_turns)
    m0, m1 = hyp_ids[0].size, hyp_ids[1].size
    rows0 = np.arange(m0 + 1, dtype=np.int32)[None, :]
    rows1 = np.arange(m1 + 1, dtype=np.int32)[None, :]
    for words in turn_ids:
        # Assignment bit u of the row index: 0 keeps the low half
        # (turn on channel 0), 1 the high half.
        rows0 = np.vstack([_batch_extend(rows0, words, hyp_ids[0]), rows0])
        rows1 = np.vstack([rows1, _batch_extend(rows1, words, hyp_ids[1])])
    totals = rows0[:, -1] + rows1[:, -1]
    best = int(totals.min())
    cands = np.flatnonzero(totals == best)
    if cands.size == 1:
        choice = int(cands[0])
    else:
        # Lexicographic order over (channel of turn 0, turn 1, ...) is
        # numeric order of the bit-reversed index.
        rev = np.zeros(cands.shape, dtype=np.int64)
        for u in range(n_turns):
            rev |= ((cands >> u) & 1) << (n_turns - 1 - u)
        choice = int(cands[int(np.argmin(rev))])
    channels = [(choice >> u) & 1 for u in range(n_turns)]
    return _orc_result(order, turn_tokens, hyp_tokens, channels, 2 ** n_turns)


def orc_wer_fast(ref_turns: Sequence[Turn], hyps: Sequence[str], *,
                 cot_token: str = COT_TOKEN, normalize: bool = False,
                 max_states: int = DEFAULT_MAX_STATES) -> OrcResult:
    """ORC WER via a joint DP; same optimum as :func:`orc_wer`.

    States are (turns consumed, position in hypothesis 0, position in
    hypothesis 1). Completion-cost grids are kept per turn so the
    winning assignment can be recovered greedily, preferring channel 0,
    which reproduces the exhaustive path's lexicographic tie-break.
    Raises :class:`StateLimitError` when the grids would exceed
    ``max_states``.
    """
    order, turn_tokens, hyp_tokens, turn_ids, hyp_ids = _orc_prepare(
        ref_turns, hyps, cot_token, normalize)
    n_turns = len(turn_ids)
    m0, m1 = int(hyp_ids[0].size), int(hyp_ids[1].size)
    required = (n_turns + 1) * (m0 + 1) * (m1 + 1)
    if required > max_states:
        raise StateLimitError(required, max_states)
    ar0 = np.arange(m0 + 1, dtype=np.int32)
    ar1 = np.arange(m1 + 1, dtype=np.int32)
    # completion[u][i][j]: cheapest way to align turns u.. given that
    # channel 0 already consumed hyp0[:i] and channel 1 hyp1[:j].
    completion: List[np.ndarray] = [np.empty(0)] * (n_turns + 1)
    grid = np.add.outer(m0 - ar0, m1 - ar1).astype(np.int32)
    completion[n_turns] = grid
    for u in range(n_turns - 1, -1, -1):
        words = turn_ids[u]
        on0 = _batch_extend_rev(grid.T, words, hyp_ids[0]).T
        on1 = _batch_extend_rev(grid, words, hyp_ids[1])
        grid = np.minimum(on0, on1)
        completion[u] = grid
    optimum = int(completion[0][0, 0])
    # Greedy recovery: with the prefix assignment fixed, the forward
    # cost factors into independent per-channel rows.
    f0 = ar0[None, :].copy()
    f1 = ar1[None, :].copy()
    channels: List[int] = []
    for u, words in enumerate(turn_ids):
        g0 = _batch_extend(f0, words, hyp_ids[0])
        if int((g0[0][:, None] + f1[0][None, :] + completion[u + 1]).min()) == optimum:
            channels.append(0)
            f0 = g0
            continue
        g1 = _batch_extend(f1, words, hyp_ids[1])
        reachable = int((f0[0][:, None] + g1[0][None, :] + completion[u + 1]).min())
        if reachable != optimum:
            raise AssertionError("joint DP backtrace lost the optimum")
        channels.append(1)
        f1 = g1
    total = int(f0[0, -1] + f1[0, -1])
    if total != optimum:
        raise AssertionError("joint DP total does not match recovered assignment")
    return _orc_result(order, turn_tokens, hyp_tokens, channels, required)


def count_estimated_turns(hyp_channels: Sequence[str], cot_token: str = COT_TOKEN) -> int:
    """Turn count implied by the hypotheses: per non-empty channel,
    one turn plus one per change-of-turn marker.

    >>> count_estimated_turns(["hi <cot> there", "yo"])
    3
    >>> count_estimated_turns(["", ""])
    0
    """
    total = 0
    for channel in hyp_channels:
        tokens = channel.split()
        if not tokens:
            continue
        total += 1 + sum(1 for t in tokens if t == cot_token)
    return total


@dataclass(frozen=True)
class TurnConfusion:
    """Counts of (actual turn count, estimated turn count) pairs."""

    counts: Mapping[Tuple[int, int], int]

    @property
    def actual_values(self) -> List[int]:
        return sorted({a for a, _ in self.counts})

    @property
    def estimated_values(self) -> List[int]:
        cols = {e for _, e in self.counts} | set(self.actual_values)
        return sorted(cols)

    def row_percentages(self, actual: int) -> Dict[int, float]:
        row = {e: c for (a, e), c in self.counts.items() if a == actual}
        total = sum(row.values())
        if total == 0:
            return {}
        return {e: 100.0 * c / total for e, c in row.items()}

    def accuracy(self) -> float | None:
        """Fraction of utterances whose turn count was estimated exactly."""
        total = sum(self.counts.values())
        if total == 0:
            return None
        diag = sum(c for (a, e), c in self.counts.items() if a == e)
        return diag / total

    def render(self) -> str:
        """Plain-text table: rows actual, columns estimated, row-normalized
        percentages with the diagonal highlighted."""
        if not self.counts:
            return "turn-count confusion: no data\n"
        cols = self.estimated_values
        width = 9
        lines = ["Actual  | Estimated # turns"]
        header = "# turns | " + "".join(f"{c:>{width}}" for c in cols)
        lines.append(header)
        lines.append("-" * len(header))
        for a in self.actual_values:
            pct = self.row_percentages(a)
            cells = []
            for e in cols:
                value = pct.get(e, 0.0)
                text = f"*{value:.2f}*" if e == a else f"{value:.2f}"
                cells.append(f"{text:>{width}}")
            lines.append(f"{a:>7} | " + "".join(cells))
        acc = self.accuracy()
        if acc is not None:
            lines.append(f"turn counting accuracy: {100.0 * acc:.2f}%")
        return "\n".join(lines) + "\n"


def turn_confusion(pairs: Iterable[Tuple[int, int]]) -> TurnConfusion:
    """Build the confusion matrix from (actual, estimated) pairs.

    >>> turn_confusion([(2, 2), (2, 1)]).row_percentages(2)
    {1: 50.0, 2: 50.0}
    """
    counts: Dict[Tuple[int, int], int] = {}
    for actual, estimated in pairs:
        if actual < 1:
            raise ValueError(f"actual turn count must be >= 1, got {actual}")
        key = (int(actual), int(estimated))
        counts[key] = counts.get(key, 0) + 1
    return TurnConfusion(counts=dict(sorted(counts.items())))


@dataclass(frozen=True)
class ScoredUtterance:
    """Per-utterance scoring outcome fed into report aggregation."""

    utterance_id: str
    stats: EditStats | None
    partition: str | None = None
    skipped_reason: str | None = None


@dataclass(frozen=True)
class CorpusReport:
    """Micro-averaged corpus WER with per-partition breakdown.

    Utterances with empty references have undefined WER; they are
    listed with their raw insertion counts and excluded from the
    pooled numerator and denominator. Skipped utterances never enter
    the averages.
    """

    overall: EditStats
    partitions: Dict[str, EditStats]
    utterances: Tuple[ScoredUtterance, ...]
    undefined_wer: Tuple[Tuple[str, int], ...]
    skipped: Tuple[Tuple[str, str], ...]
    missing_hypotheses: Tuple[str, ...] = ()
    unmatched_hypotheses: Tuple[str, ...] = ()

    @property
    def wer(self) -> float | None:
        return self.overall.wer

    def to_dict(self) -> dict:
        def stats_dict(stats: EditStats) -> dict:
            return {
                "wer": stats.wer,
                "errors": stats.errors,
                "substitutions": stats.substitutions,
                "insertions": stats.insertions,
                "deletions": stats.deletions,
                "hits": stats.hits,
                "ref_words": stats.ref_words,
            }

        utterances = []
        for u in self.utterances:
            entry: dict = {"id": u.utterance_id, "partition": u.partition}
            if u.skipped_reason is not None:
                entry["skipped"] = u.skipped_reason
            elif u.stats is not None:
                entry.update(stats_dict(u.stats))
            utterances.append(entry)
        return {
            "overall": stats_dict(self.overall),
            "partitions": {name: stats_dict(s) for name, s in self.partitions.items()},
            "utterances": utterances,
            "undefined_wer": [{"id": i, "insertions": n} for i, n in self.undefined_wer],
            "skipped": [{"id": i, "reason": r} for i, r in self.skipped],
            "missing_hypotheses": list(self.missing_hypotheses),
            "unmatched_hypotheses": list(self.unmatched_hypotheses),
        }

    def render_text(self) -> str:
        def line(name: str, stats: EditStats) -> str:
            wer = stats.wer
            wer_text = f"{100.0 * wer:6.2f}%" if wer is not None else "   n/a"
            return (f"{name:<12} WER {wer_text}  ({stats.errors}/{stats.ref_words} words: "
                    f"{stats.substitutions} sub, {stats.insertions} ins, {stats.deletions} del)")

        lines = [line("overall", self.overall)]
        for name in sorted(self.partitions):
            lines.append(line(name, self.partitions[name]))
        if self.undefined_wer:
            ids = ", ".join(f"{i} ({n} ins)" for i, n in self.undefined_wer)
            lines.append(f"undefined WER (empty reference): {ids}")
        if self.skipped:
            lines.append("skipped: " + ", ".join(f"{i} [{r}]" for i, r in self.skipped))
        if self.missing_hypotheses:
            lines.append("missing hypotheses: " + ", ".join(self.missing_hypotheses))
        if self.unmatched_hypotheses:
            lines.append("unmatched hypotheses: " + ", ".join(self.unmatched_hypotheses))
        return "\n".join(lines) + "\n"


def aggregate_report(results: Iterable[ScoredUtterance],
                     missing_hypotheses: Sequence[str] = (),
                     unmatched_hypotheses: Sequence[str] = ()) -> CorpusReport:
    """Pool per-utterance stats into overall and per-partition totals."""
    results = tuple(results)
    overall = EditStats.zero()
    partitions: Dict[str, EditStats] = {}
    undefined: List[Tuple[str, int]] = []
    skipped: List[Tuple[str, str]] = []
    for res in results:
        if res.skipped_reason is not None:
            skipped.append((res.utterance_id, res.skipped_reason))
            continue
        if res.stats is None:
            continue
        if res.stats.ref_words == 0:
            undefined.append((res.utterance_id, res.stats.insertions))
            continue
        overall = overall + res.stats
        if res.partition is not None:
            partitions[res.partition] = partitions.get(res.partition, EditStats.zero()) + res.stats
    return CorpusReport(
        overall=overall,
        partitions=partitions,
        utterances=results,
        undefined_wer=tuple(undefined),
        skipped=tuple(skipped),
        missing_hypotheses=tuple(missing_hypotheses),
        unmatched_hypotheses=tuple(unmatched_hypotheses),
    )
