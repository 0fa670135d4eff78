"""Utterance pools, WAV I/O and impulse-response ingestion.

Manifests are JSON-lines files, one object per line. Utterance records
carry ``id``, ``speaker``, ``audio``, ``duration_s`` and ``text``;
impulse-response records carry ``id`` and ``audio``. Relative ``audio``
paths are resolved against the manifest's directory.

Every run uses a single sample rate and nothing is ever resampled: audio
must be mono RIFF/WAVE, 16-bit PCM or 32-bit float, at the configured
rate. Rate or format mismatches are hard errors so that generated
mixtures stay bit-reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)

__all__ = [
    "AudioBuffer",
    "AudioFormatError",
    "ImpulseResponse",
    "ManifestError",
    "Pool",
    "PoolIssue",
    "Utterance",
    "load_audio",
    "load_impulse_responses",
    "load_manifest",
    "read_wav",
    "save_manifest",
    "validate_pool",
    "write_wav",
]

# Decoding scale for 16-bit PCM; a full-scale positive sample decodes to
# 32767/32768, never to exactly 1.0.
INT16_SCALE = 32768.0

# Mismatch between manifest duration and decoded length: silent up to
# 10 ms, warn up to 50 ms, error beyond.
DURATION_WARN_S = 0.010
DURATION_FAIL_S = 0.050


class ManifestError(ValueError):
    """A manifest line could not be turned into a valid record."""


class AudioFormatError(ValueError):
    """An audio file violates the mono/PCM16-or-float32/rate contract."""


@dataclass(frozen=True)
class Utterance:
    """One single-speaker speech segment in the pool."""

    id: str
    speaker_id: str
    audio_path: Path
    duration_s: float
    transcript: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("utterance id must be non-empty")
        if not self.speaker_id:
            raise ValueError(f"utterance {self.id!r}: speaker must be non-empty")
        if not self.duration_s > 0:
            raise ValueError(f"utterance {self.id!r}: duration_s must be > 0, got {self.duration_s}")
        if not self.transcript.split():
            raise ValueError(f"utterance {self.id!r}: transcript has no tokens")

    @property
    def tokens(self) -> List[str]:
        return self.transcript.split()


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform as float64 samples plus its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class ImpulseResponse:
    """An acoustic impulse response used for far-field rendering."""

    id: str
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"impulse response {self.id!r}: need a non-empty 1-D sample array")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"impulse response {self.id!r}: non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"impulse response {self.id!r}: bad sample rate {self.sample_rate_hz}")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass
class Pool:
    """Utterances keyed by id, with a derived speaker index.

    Treated as immutable after construction; shared freely across
    workers.
    """

    utterances: Dict[str, Utterance]
    speakers: Dict[str, List[str]] = field(init=False)

    def __post_init__(self) -> None:
        speakers: Dict[str, List[str]] = {}
        for utt in self.utterances.values():
            speakers.setdefault(utt.speaker_id, []).append(utt.id)
        self.speakers = speakers

    def __len__(self) -> int:
        return len(self.utterances)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self.utterances

    def __getitem__(self, utterance_id: str) -> Utterance:
        return self.utterances[utterance_id]

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances.values())

    @property
    def ordered_ids(self) -> List[str]:
        """Utterance ids in sorted order; the sampling iteration order."""
        return sorted(self.utterances)


@dataclass(frozen=True)
class PoolIssue:
    """One problem found while validating a pool against its audio."""

    kind: str  # "unreadable" | "format" | "rate_mismatch" | "zero_energy" | "duration_mismatch"
    item_id: str
    detail: str


_UTTERANCE_FIELDS = ("id", "speaker", "audio", "duration_s", "text")


def _resolve_audio(raw: str, base: Path) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else (base / p)


def load_manifest(path: str | Path) -> Pool:
    """Read a JSONL utterance manifest into a :class:`Pool`.

    Raises :class:`ManifestError` (with the offending line number) on
    malformed JSON, missing fields, duplicate ids, non-positive
    durations or empty transcripts. An empty file yields an empty pool.
    """
    path = Path(path)
    base = path.parent
    utterances: Dict[str, Utterance] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object, got {type(rec).__name__}")
            missing = [k for k in _UTTERANCE_FIELDS if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            uid = str(rec["id"])
            if uid in utterances:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
            try:
                utterances[uid] = Utterance(
                    id=uid,
                    speaker_id=str(rec["speaker"]),
                    audio_path=_resolve_audio(str(rec["audio"]), base),
                    duration_s=float(rec["duration_s"]),
                    transcript=str(rec["text"]),
                )
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return Pool(utterances)


def save_manifest(pool: Pool, path: str | Path) -> None:
    """Write a pool back to manifest form (inverse of :func:`load_manifest`)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for utt in pool:
            rec = {
                "id": utt.id,
                "speaker": utt.speaker_id,
                "audio": str(utt.audio_path),
                "duration_s": utt.duration_s,
                "text": utt.transcript,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_wav(path: str | Path) -> AudioBuffer:
    """Decode a mono WAV file to float64 samples in [-1, 1].

    16-bit PCM is scaled by 1/32768; 32-bit float is taken as-is. Other
    encodings (8-bit, 24/32-bit int, 64-bit float) are rejected.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file: {exc}") from exc
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / INT16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(
            f"{path}: unsupported sample format {data.dtype}; use 16-bit PCM or 32-bit float"
        )
    if samples.size and not np.all(np.isfinite(samples)):
        raise AudioFormatError(f"{path}: non-finite samples")
    return AudioBuffer(samples=samples, sample_rate_hz=int(rate))


def load_audio(utterance: Utterance, expected_rate_hz: int) -> AudioBuffer:
    """Load an utterance's audio, enforcing rate and duration consistency.

    The decoded length must match ``duration_s`` within 10 ms; up to
    50 ms logs a warning, beyond that is an error (the manifest is
    lying about the file).
    """
    buf = read_wav(utterance.audio_path)
    if buf.sample_rate_hz != expected_rate_hz:
        raise AudioFormatError(
            f"{utterance.audio_path}: sample rate {buf.sample_rate_hz} Hz, expected "
            f"{expected_rate_hz} Hz (no resampling is performed)"
        )
    drift = abs(buf.duration_s - utterance.duration_s)
    if drift > DURATION_FAIL_S:
        raise AudioFormatError(
            f"{utterance.audio_path}: decoded duration {buf.duration_s:.3f}s differs from "
            f"manifest duration {utterance.duration_s:.3f}s by more than {DURATION_FAIL_S * 1000:.0f} ms"
        )
    if drift > DURATION_WARN_S:
        logger.warning(
            "utterance %s: decoded duration %.3fs vs manifest %.3fs (%.1f ms drift)",
            utterance.id, buf.duration_s, utterance.duration_s, drift * 1000,
        )
    return buf


def load_impulse_responses(path: str | Path, expected_rate_hz: int) -> Dict[str, ImpulseResponse]:
    """Read an impulse-response manifest and decode every referenced file."""
    path = Path(path)
    base = path.parent
    irs: Dict[str, ImpulseResponse] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "id" not in rec or "audio" not in rec:
                raise ManifestError(f"{path}:{lineno}: impulse-response records need id and audio")
            ir_id = str(rec["id"])
            if ir_id in irs:
                raise ManifestError(f"{path}:{lineno}: duplicate impulse-response id {ir_id!r}")
            buf = read_wav(_resolve_audio(str(rec["audio"]), base))
            if buf.sample_rate_hz != expected_rate_hz:
                raise AudioFormatError(
                    f"{path}:{lineno}: impulse response {ir_id!r} has rate "
                    f"{buf.sample_rate_hz} Hz, expected {expected_rate_hz} Hz"
                )
            irs[ir_id] = ImpulseResponse(id=ir_id, samples=buf.samples, sample_rate_hz=buf.sample_rate_hz)
    return irs


def write_wav(path: str | Path, audio: AudioBuffer, bit_depth: int = 16) -> None:
    """Write a buffer as WAV; 16-bit PCM (default) or 32-bit float.

    The PCM conversion (scale by 32768, round to nearest, clip to the
    int16 range) is fixed so that repeated runs are byte-identical.
    """
    path = Path(path)
    if bit_depth == 16:
        scaled = np.clip(np.rint(audio.samples * INT16_SCALE), -32768, 32767)
        wavfile.write(path, audio.sample_rate_hz, scaled.astype("<i2"))
    elif bit_depth == 32:
        wavfile.write(path, audio.sample_rate_hz, audio.samples.astype("<f4"))
    else:
        raise ValueError(f"bit_depth must be 16 or 32, got {bit_depth}")


def validate_pool(pool: Pool, rate_hz: int) -> List[PoolIssue]:
    """Check every pool entry against its audio file; never raises.

    Reports unreadable files, format violations, rate mismatches,
    all-zero (zero-energy) audio and manifest/file duration drift
    beyond the hard limit. The pool itself is left untouched.
    """
    issues: List[PoolIssue] = []
    for utt in pool:
        try:
            buf = read_wav(utt.audio_path)
        except OSError as exc:
            issues.append(PoolIssue("unreadable", utt.id, str(exc)))
            continue
        except AudioFormatError as exc:
            issues.append(PoolIssue("format", utt.id, str(exc)))
            continue
        if buf.sample_rate_hz != rate_hz:
            issues.append(PoolIssue(
                "rate_mismatch", utt.id,
                f"{buf.sample_rate_hz} Hz, expected {rate_hz} Hz",
            ))
            continue
        if not np.any(buf.samples):
            issues.append(PoolIssue("zero_energy", utt.id, "audio is all zeros"))
        drift = abs(buf.duration_s - utt.duration_s)
        if drift > DURATION_FAIL_S:
            issues.append(PoolIssue(
                "duration_mismatch", utt.id,
                f"decoded {buf.duration_s:.3f}s vs manifest {utt.duration_s:.3f}s",
            ))
    return issues
