"""On-the-fly construction of partially overlapping multi-speaker mixtures.

A mixture is planned first (which utterances, where they start, how loud,
which impulse response) and rendered second. Planning guarantees, by
construction plus rejection sampling, that

* each follower from a different speaker starts strictly inside its
  predecessor (delay uniform in (min_delay_s, len(predecessor))), so
  consecutive distinct-speaker turns always overlap;
* consecutive turns from the same speaker never overlap (the follower
  starts after the predecessor ends, with a gap of up to 1 s), and no
  same-speaker pair overlaps anywhere in the plan;
* at most ``max_simultaneous`` turns are active at any instant;
* the mixture stays within ``max_duration_s`` (impulse-response tails
  included when rendering far field).

Plans violating any bound are resampled wholesale, preserving the
stated delay distributions conditional on acceptance; after
``max_retries`` failures the configuration is reported as
over-constrained.

Reproducibility contract: the random stream of mixture ``k`` is seeded
with the k-th output of a SplitMix64 generator seeded by the master
seed (the constants below are part of the output-format contract), so
any mixture can be regenerated in isolation, in any order, on any
number of workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import fftconvolve

from turnmix.arrange import Turn
from turnmix.corpus import AudioBuffer, ImpulseResponse, Pool, load_audio

__all__ = [
    "EnergyCache",
    "Mixture",
    "MixturePlan",
    "PlanEntry",
    "PRESETS",
    "RetriesExhaustedError",
    "SimulationConfig",
    "convolve",
    "exponential_decay_ir",
    "gain_for_energy_ratio",
    "measure_energy",
    "mixture_seed",
    "plan_turns",
    "preset",
    "render",
    "sample_plan",
    "simulate",
]

# SplitMix64 constants (Steele/Lea/Flood mix). Part of the
# reproducibility contract: change them and previously published seeds
# stop regenerating the same corpora.
_SPLITMIX64_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX64_MUL1 = 0xBF58476D1CE4E5B9
_SPLITMIX64_MUL2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1

# Followers by the same speaker start after their predecessor ends,
# within this gap.
SAME_SPEAKER_MAX_GAP_S = 1.0


class RetriesExhaustedError(RuntimeError):
    """No admissible plan was found; the config/pool is over-constrained."""

    def __init__(self, attempts: int, last_reason: str):
        super().__init__(
            f"no admissible mixture plan after {attempts} attempts (last: {last_reason})"
        )
        self.attempts = attempts
        self.last_reason = last_reason


def mixture_seed(master_seed: int, mixture_index: int) -> int:
    """Derive the 64-bit seed of one mixture's random stream.

    Equals output number ``mixture_index + 1`` of a SplitMix64 stream
    seeded with ``master_seed``; random access, no sequential state.
    """
    if mixture_index < 0:
        raise ValueError(f"mixture_index must be >= 0, got {mixture_index}")
    x = (master_seed + (mixture_index + 1) * _SPLITMIX64_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * _SPLITMIX64_MUL1) & _MASK64
    x = ((x ^ (x >> 27)) * _SPLITMIX64_MUL2) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SimulationConfig:
    """Knobs of the mixture generator.

    ``count_mode`` picks the number of utterances per mixture: "fixed"
    always uses ``max_speakers``, "uniform" draws uniformly from
    {1, ..., max_speakers}. ``energy_mode`` "intact" leaves sources
    untouched; "ratio" scales every non-reference source to a
    reference-to-source energy ratio drawn uniformly from
    ``energy_ratio_db``. ``max_duration_s`` and ``max_simultaneous``
    may be None to disable the bound.
    """

    max_speakers: int = 2
    count_mode: str = "fixed"  # "fixed" | "uniform"
    min_delay_s: float = 0.5
    energy_mode: str = "intact"  # "intact" | "ratio"
    energy_ratio_db: Tuple[float, float] = (-5.0, 5.0)
    far_field: bool = False
    max_duration_s: Optional[float] = 30.0
    allow_same_speaker: bool = False
    max_simultaneous: Optional[int] = 2
    sample_rate_hz: int = 16000
    max_retries: int = 100

    def __post_init__(self) -> None:
        if self.max_speakers < 1:
            raise ValueError(f"max_speakers must be >= 1, got {self.max_speakers}")
        if self.count_mode not in ("fixed", "uniform"):
            raise ValueError(f"unknown count_mode {self.count_mode!r}")
        if not self.min_delay_s > 0:
            raise ValueError(f"min_delay_s must be > 0, got {self.min_delay_s}")
        if self.energy_mode not in ("intact", "ratio"):
            raise ValueError(f"unknown energy_mode {self.energy_mode!r}")
        lo, hi = self.energy_ratio_db
        if lo > hi:
            raise ValueError(f"energy_ratio_db range is inverted: ({lo}, {hi})")
        if self.max_duration_s is not None and self.max_duration_s <= 0:
            raise ValueError(f"max_duration_s must be positive or None, got {self.max_duration_s}")
        if self.max_simultaneous is not None and self.max_simultaneous < 1:
            raise ValueError(f"max_simultaneous must be >= 1 or None, got {self.max_simultaneous}")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be >= 1, got {self.max_retries}")
        object.__setattr__(self, "energy_ratio_db", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {
            "max_speakers": self.max_speakers,
            "count_mode": self.count_mode,
            "min_delay_s": self.min_delay_s,
            "energy_mode": self.energy_mode,
            "energy_ratio_db": list(self.energy_ratio_db),
            "far_field": self.far_field,
            "max_duration_s": self.max_duration_s,
            "allow_same_speaker": self.allow_same_speaker,
            "max_simultaneous": self.max_simultaneous,
            "sample_rate_hz": self.sample_rate_hz,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimulationConfig":
        kwargs = dict(data)
        ratio = kwargs.get("energy_ratio_db")
        if ratio is not None:
            kwargs["energy_ratio_db"] = tuple(ratio)
        unknown = set(kwargs) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**kwargs)


# Two ready-made configurations: close-talking fixed two-speaker
# mixtures with untouched energies, and far-field meeting-style
# mixtures with one to five utterances, repeated speakers allowed and
# energy ratios in [-5, +5] dB.
PRESETS: Dict[str, dict] = {
    "librispeechmix2": dict(
        max_speakers=2,
        count_mode="fixed",
        min_delay_s=0.5,
        energy_mode="intact",
        far_field=False,
        max_duration_s=None,
        allow_same_speaker=False,
        max_simultaneous=2,
    ),
    "libricss_style": dict(
        max_speakers=5,
        count_mode="uniform",
        min_delay_s=0.5,
        energy_mode="ratio",
        energy_ratio_db=(-5.0, 5.0),
        far_field=True,
        max_duration_s=30.0,
        allow_same_speaker=True,
        max_simultaneous=2,
    ),
}


def preset(name: str, **overrides) -> SimulationConfig:
    """Build a named preset configuration, with optional overrides."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    params = dict(PRESETS[name])
    params.update(overrides)
    return SimulationConfig(**params)


@dataclass(frozen=True)
class PlanEntry:
    """One source placed in a mixture.

    ``energy_ratio_db`` records the sampled reference-to-this-source
    target ratio (None for the reference entry and in intact mode), so
    rendered mixtures can be audited against their plans.
    """

    utterance_id: str
    speaker_id: str
    start_offset_s: float
    gain_linear: float
    impulse_response_id: Optional[str] = None
    energy_ratio_db: Optional[float] = None

    def __post_init__(self) -> None:
        if self.start_offset_s < 0:
            raise ValueError(f"start offset must be >= 0, got {self.start_offset_s}")
        if not self.gain_linear > 0:
            raise ValueError(f"gain must be > 0, got {self.gain_linear}")


@dataclass(frozen=True)
class MixturePlan:
    """A fully determined recipe for one mixture."""

    mixture_id: str
    entries: Tuple[PlanEntry, ...]
    reference_index: int

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("a plan needs at least one entry")
        if self.entries[0].start_offset_s != 0.0:
            raise ValueError("first entry must start at offset 0")
        for a, b in zip(self.entries, self.entries[1:]):
            if b.start_offset_s < a.start_offset_s:
                raise ValueError("entries must be ordered by start offset")
        if not 0 <= self.reference_index < len(self.entries):
            raise ValueError(f"reference index {self.reference_index} out of range")


@dataclass(frozen=True)
class Mixture:
    """A rendered (or metadata-only) mixture with aligned turns."""

    plan: MixturePlan
    audio: Optional[AudioBuffer]
    turns: Tuple[Turn, ...]
    peak_normalization_gain: float = 1.0


def measure_energy(audio: AudioBuffer) -> float:
    """Mean-square amplitude over the whole buffer."""
    if len(audio) == 0:
        raise ValueError("cannot measure the energy of an empty buffer")
    return float(np.mean(np.square(audio.samples)))


def gain_for_energy_ratio(ref_energy: float, other_energy: float, ratio_db: float) -> float:
    """Linear gain for the other source so that
    10*log10(ref_energy / (gain^2 * other_energy)) == ratio_db.

    >>> gain_for_energy_ratio(0.04, 0.01, 0.0)
    2.0
    """
    if ref_energy <= 0 or other_energy <= 0:
        raise ValueError(
            f"energies must be positive, got ref={ref_energy}, other={other_energy}"
        )
    return math.sqrt(ref_energy / (other_energy * 10.0 ** (ratio_db / 10.0)))


def convolve(source: AudioBuffer, ir: ImpulseResponse) -> AudioBuffer:
    """Full linear convolution; output length len(source) + len(ir) - 1."""
    if source.sample_rate_hz != ir.sample_rate_hz:
        raise ValueError(
            f"sample-rate mismatch: source {source.sample_rate_hz} Hz vs "
            f"impulse response {ir.sample_rate_hz} Hz"
        )
    out = fftconvolve(source.samples, ir.samples, mode="full")
    return AudioBuffer(samples=out, sample_rate_hz=source.sample_rate_hz)


class EnergyCache:
    """Memoized dry-source energies, keyed by utterance id.

    Sharing one cache across many :func:`sample_plan` calls avoids
    re-decoding the same audio; the cached value is a pure function of
    the file so sharing never changes results.
    """

    def __init__(self, pool: Pool, sample_rate_hz: int):
        self._pool = pool
        self._rate = sample_rate_hz
        self._values: Dict[str, float] = {}

    def get(self, utterance_id: str) -> float:
        if utterance_id not in self._values:
            buf = load_audio(self._pool[utterance_id], self._rate)
            self._values[utterance_id] = measure_energy(buf)
        return self._values[utterance_id]


def _pick_utterances(pool: Pool, count: int, allow_same_speaker: bool,
                     rng: np.random.Generator) -> List[str]:
    ordered = pool.ordered_ids
    used_ids: set = set()
    used_speakers: set = set()
    picked: List[str] = []
    for _ in range(count):
        candidates = [
            uid for uid in ordered
            if uid not in used_ids
            and (allow_same_speaker or pool[uid].speaker_id not in used_speakers)
        ]
        if not candidates:
            raise ValueError(
                f"pool cannot supply {count} utterances"
                + ("" if allow_same_speaker else " from distinct speakers")
            )
        uid = candidates[int(rng.integers(len(candidates)))]
        picked.append(uid)
        used_ids.add(uid)
        used_speakers.add(pool[uid].speaker_id)
    return picked


def _max_active(intervals: Sequence[Tuple[float, float]]) -> int:
    """Peak number of simultaneously active half-open intervals."""
    events = []
    for start, end in intervals:
        events.append((start, 1))
        events.append((end, -1))
    # Ends sort before starts at equal time: [a, b) and [b, c) never coexist.
    events.sort(key=lambda e: (e[0], e[1]))
    active = peak = 0
    for _, delta in events:
        active += delta
        peak = max(peak, active)
    return peak


def _plan_violation(entries: Sequence[PlanEntry], durations: Sequence[float],
                    config: SimulationConfig,
                    ir_tails: Mapping[str, float]) -> Optional[str]:
    """Reason the candidate plan is inadmissible, or None if it is fine."""
    intervals = [(e.start_offset_s, e.start_offset_s + d) for e, d in zip(entries, durations)]
    for idx in range(1, len(entries)):
        prev, cur = entries[idx - 1], entries[idx]
        delay = cur.start_offset_s - prev.start_offset_s
        if prev.speaker_id != cur.speaker_id:
            if not (config.min_delay_s < delay < durations[idx - 1]):
                return (
                    f"entry {idx} delay {delay:.3f}s outside "
                    f"({config.min_delay_s}, {durations[idx - 1]:.3f})"
                )
        else:
            if cur.start_offset_s < intervals[idx - 1][1]:
                return f"entry {idx} overlaps same-speaker predecessor"
    by_speaker: Dict[str, List[Tuple[float, float]]] = {}
    for entry, span in zip(entries, intervals):
        by_speaker.setdefault(entry.speaker_id, []).append(span)
    for speaker, spans in by_speaker.items():
        spans.sort()
        for (s0, e0), (s1, _e1) in zip(spans, spans[1:]):
            if s1 < e0:
                return f"speaker {speaker!r} overlaps itself at t={s1:.3f}"
    if config.max_simultaneous is not None:
        peak = _max_active(intervals)
        if peak > config.max_simultaneous:
            return f"{peak} simultaneous turns exceed the bound of {config.max_simultaneous}"
    if config.max_duration_s is not None:
        total = max(
            span[1] + ir_tails.get(entry.impulse_response_id or "", 0.0)
            for entry, span in zip(entries, intervals)
        )
        if total > config.max_duration_s:
            return f"duration {total:.3f}s exceeds {config.max_duration_s}s"
    return None


def sample_plan(pool: Pool, config: SimulationConfig, rng: np.random.Generator,
                irs: Optional[Mapping[str, ImpulseResponse]] = None,
                energy_cache: Optional[EnergyCache] = None,
                mixture_id: str = "mix") -> MixturePlan:
    """Draw one admissible mixture plan from the pool.

    Draw order per attempt (fixed; part of the reproducibility
    contract): utterance count, utterances, start delays, reference
    entry, energy ratios for non-reference entries, impulse responses.
    Inadmissible candidates are rejected and the whole plan is redrawn,
    up to ``config.max_retries`` attempts.
    """
    if config.count_mode == "uniform":
        count = int(rng.integers(1, config.max_speakers + 1))
    else:
        count = config.max_speakers
    if count > len(pool):
        raise ValueError(f"pool has {len(pool)} utterances, need {count}")
    if not config.allow_same_speaker and count > len(pool.speakers):
        raise ValueError(
            f"pool has {len(pool.speakers)} speakers, need {count} distinct ones"
        )
    if count >= 2 and len(pool.speakers) < 2:
        raise ValueError("multi-speaker simulation needs at least 2 speakers in the pool")

    if config.energy_mode == "ratio" and energy_cache is None:
        energy_cache = EnergyCache(pool, config.sample_rate_hz)
    ir_ids = sorted(irs) if (config.far_field and irs) else []
    ir_tails = {
        ir_id: max(len(irs[ir_id]) - 1, 0) / config.sample_rate_hz for ir_id in ir_ids
    } if ir_ids else {}

    last_reason = "no attempt made"
    for _attempt in range(config.max_retries):
        picked = _pick_utterances(pool, count, config.allow_same_speaker, rng)
        durations = [pool[uid].duration_s for uid in picked]
        starts = [0.0]
        feasible = True
        for idx in range(1, count):
            prev_dur = durations[idx - 1]
            same = pool[picked[idx]].speaker_id == pool[picked[idx - 1]].speaker_id
            if same:
                delay = float(rng.uniform(prev_dur, prev_dur + SAME_SPEAKER_MAX_GAP_S))
            else:
                if prev_dur <= config.min_delay_s:
                    last_reason = (
                        f"utterance {picked[idx - 1]!r} is shorter than the minimum "
                        f"delay ({prev_dur:.3f}s <= {config.min_delay_s}s)"
                    )
                    feasible = False
                    break
                delay = float(rng.uniform(config.min_delay_s, prev_dur))
            starts.append(starts[-1] + delay)
        if not feasible:
            continue

        reference_index = int(rng.integers(count))
        gains = [1.0] * count
        ratios: List[Optional[float]] = [None] * count
        if config.energy_mode == "ratio" and count > 1:
            assert energy_cache is not None
            ref_energy = energy_cache.get(picked[reference_index])
            lo, hi = config.energy_ratio_db
            for idx in range(count):
                if idx == reference_index:
                    continue
                ratio = float(rng.uniform(lo, hi))
                ratios[idx] = ratio
                gains[idx] = gain_for_energy_ratio(
                    ref_energy, energy_cache.get(picked[idx]), ratio
                )

        ir_choice: List[Optional[str]] = [None] * count
        if ir_ids:
            ir_choice = [ir_ids[int(rng.integers(len(ir_ids)))] for _ in range(count)]

        entries = tuple(
            PlanEntry(
                utterance_id=picked[idx],
                speaker_id=pool[picked[idx]].speaker_id,
                start_offset_s=starts[idx],
                gain_linear=gains[idx],
                impulse_response_id=ir_choice[idx],
                energy_ratio_db=ratios[idx],
            )
            for idx in range(count)
        )
        reason = _plan_violation(entries, durations, config, ir_tails)
        if reason is None:
            return MixturePlan(
                mixture_id=mixture_id, entries=entries, reference_index=reference_index
            )
        last_reason = reason
    raise RetriesExhaustedError(config.max_retries, last_reason)


def plan_turns(plan: MixturePlan, pool: Pool) -> Tuple[Turn, ...]:
    """Reference turns implied by a plan: dry-source spans and transcripts.

    Turn ends use the dry utterance duration even when rendering far
    field; the reverberation tail carries no new speech.
    """
    return tuple(
        Turn(
            speaker=entry.speaker_id,
            start_s=entry.start_offset_s,
            end_s=entry.start_offset_s + pool[entry.utterance_id].duration_s,
            text=pool[entry.utterance_id].transcript,
        )
        for entry in plan.entries
    )


def render(plan: MixturePlan, pool: Pool,
           irs: Optional[Mapping[str, ImpulseResponse]],
           config: SimulationConfig) -> Mixture:
    """Render a plan to audio: load, scale, convolve, shift, sum.

    Each source is scaled by its gain first and convolved with its
    impulse response second (far field only), then added at its start
    offset. If the summed peak exceeds 1.0 the whole mixture is scaled
    down to peak 1.0 and the applied gain is recorded.
    """
    rate = config.sample_rate_hz
    rendered: List[Tuple[int, np.ndarray]] = []
    for entry in plan.entries:
        buf = load_audio(pool[entry.utterance_id], rate)
        samples = buf.samples * entry.gain_linear
        if config.far_field and entry.impulse_response_id is not None:
            if not irs or entry.impulse_response_id not in irs:
                raise ValueError(f"plan references unknown impulse response {entry.impulse_response_id!r}")
            samples = convolve(AudioBuffer(samples, rate), irs[entry.impulse_response_id]).samples
        offset = int(round(entry.start_offset_s * rate))
        rendered.append((offset, samples))
    total_len = max(offset + len(samples) for offset, samples in rendered)
    mix = np.zeros(total_len, dtype=np.float64)
    for offset, samples in rendered:
        mix[offset:offset + len(samples)] += samples
    peak = float(np.max(np.abs(mix))) if total_len else 0.0
    norm_gain = 1.0
    if peak > 1.0:
        norm_gain = 1.0 / peak
        mix = mix * norm_gain
    if config.max_duration_s is not None:
        rendered_duration = total_len / rate
        # Plans are pre-filtered on manifest durations; allow only the
        # tolerated manifest/file drift on top before giving up.
        if rendered_duration > config.max_duration_s + 0.050:
            raise ValueError(
                f"rendered duration {rendered_duration:.3f}s exceeds the "
                f"{config.max_duration_s}s limit"
            )
    return Mixture(
        plan=plan,
        audio=AudioBuffer(samples=mix, sample_rate_hz=rate),
        turns=plan_turns(plan, pool),
        peak_normalization_gain=norm_gain,
    )


def simulate(pool: Pool, irs: Optional[Mapping[str, ImpulseResponse]],
             config: SimulationConfig, master_seed: int, mixture_index: int, *,
             render_audio: bool = True,
             energy_cache: Optional[EnergyCache] = None,
             mixture_id: Optional[str] = None) -> Mixture:
    """Deterministically generate mixture ``mixture_index`` of a run.

    A pure function of (pool contents, config, master_seed,
    mixture_index): regenerating any index in isolation reproduces it
    bit-exactly. With ``render_audio=False`` only the plan and turns
    are produced (``audio`` is None).
    """
    rng = np.random.default_rng(mixture_seed(master_seed, mixture_index))
    mid = mixture_id if mixture_id is not None else f"mix_{mixture_index:06d}"
    plan = sample_plan(pool, config, rng, irs=irs, energy_cache=energy_cache, mixture_id=mid)
    if not render_audio:
        return Mixture(plan=plan, audio=None, turns=plan_turns(plan, pool))
    return render(plan, pool, irs, config)


def exponential_decay_ir(ir_id: str, sample_rate_hz: int, duration_s: float = 0.1,
                         decay_s: float = 0.03, seed: int = 0) -> ImpulseResponse:
    """Synthesize a toy impulse response: unit direct path plus
    exponentially decaying noise. Test and demo plumbing only; real
    far-field runs should load measured responses.
    """
    n = max(int(round(duration_s * sample_rate_hz)), 1)
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate_hz
    tail = 0.3 * rng.standard_normal(n) * np.exp(-t / decay_s)
    tail[0] = 1.0
    return ImpulseResponse(id=ir_id, samples=tail, sample_rate_hz=sample_rate_hz)
