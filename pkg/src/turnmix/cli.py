"""Command-line entry point for batch simulation, scoring and validation.

Sub-commands: ``simulate``, ``score orc``, ``score oed``, ``turns``,
``validate``. Exit codes: 0 success, 2 usage or config error, 3 I/O
error, 4 simulation infeasibility (plan retries exhausted).

All runs taking ``--seed`` are byte-reproducible at any ``--jobs``
value: work items are independent and outputs are ordered by mixture
index / utterance id, never by completion order. Reports are written
atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from turnmix import arrange, corpus, metrics
from turnmix import simulate as sim

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4


def _fail(message: str) -> None:
    print(f"turnmix: error: {message}", file=sys.stderr)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_jsonl(path: Path) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise corpus.ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "id" not in rec:
                raise corpus.ManifestError(f"{path}:{lineno}: expected an object with an 'id' field")
            records.append(rec)
    return records


def _turns_from_record(rec: dict) -> List[arrange.Turn]:
    return [
        arrange.Turn(
            speaker=str(t["speaker"]),
            start_s=float(t["start_s"]),
            end_s=float(t["end_s"]),
            text=str(t["text"]),
        )
        for t in rec.get("turns", [])
    ]


# ---------------------------------------------------------------------------
# simulate

@dataclass(frozen=True)
class _SimulateParams:
    master_seed: int
    out_dir: Optional[str]  # None: metadata-only run
    emit_cot: bool
    arrangement: str  # "overlap" | "speaker" | "both"
    n_channels: int


_WORKER: dict = {}


def _init_worker(pool: corpus.Pool, irs, config: sim.SimulationConfig,
                 params: _SimulateParams) -> None:
    _WORKER["pool"] = pool
    _WORKER["irs"] = irs
    _WORKER["config"] = config
    _WORKER["params"] = params
    _WORKER["energy_cache"] = sim.EnergyCache(pool, config.sample_rate_hz)


def _arrangement_fields(turns: Sequence[arrange.Turn], params: _SimulateParams) -> dict:
    index_of = {id(t): i for i, t in enumerate(turns)}

    def fields(targets: arrange.ChannelTargets) -> Tuple[list, list]:
        channels = [[index_of[id(t)] for t in ch] for ch in targets.channels]
        texts = arrange.serialize_targets(targets, with_cot=params.emit_cot)
        return channels, texts

    out: dict = {"arrangement": params.arrangement}
    if params.arrangement in ("overlap", "both"):
        channels, texts = fields(arrange.arrange_overlap_based(turns, params.n_channels))
        out["channels"] = channels
        out["channel_texts"] = texts
    if params.arrangement in ("speaker", "both"):
        n = max(params.n_channels, len({t.speaker for t in turns}))
        channels, texts = fields(arrange.arrange_speaker_based(turns, n))
        if params.arrangement == "speaker":
            out["channels"] = channels
            out["channel_texts"] = texts
        else:
            out["speaker_channels"] = channels
            out["speaker_channel_texts"] = texts
    return out


def _make_mixture(index: int) -> dict:
    pool = _WORKER["pool"]
    config: sim.SimulationConfig = _WORKER["config"]
    params: _SimulateParams = _WORKER["params"]
    mixture = sim.simulate(
        pool, _WORKER["irs"], config, params.master_seed, index,
        render_audio=params.out_dir is not None,
        energy_cache=_WORKER["energy_cache"],
    )
    if mixture.audio is not None:
        duration = mixture.audio.duration_s
        wav_path = Path(params.out_dir) / "mixtures" / f"{mixture.plan.mixture_id}.wav"
        corpus.write_wav(wav_path, mixture.audio)
    else:
        duration = max(t.end_s for t in mixture.turns)
    record = {
        "id": mixture.plan.mixture_id,
        "duration_s": duration,
        "peak_gain": mixture.peak_normalization_gain,
        "turns": [
            {"speaker": t.speaker, "start_s": t.start_s, "end_s": t.end_s, "text": t.text}
            for t in mixture.turns
        ],
    }
    record.update(_arrangement_fields(mixture.turns, params))
    return record


def _build_sim_config(args: argparse.Namespace) -> sim.SimulationConfig:
    params: dict = {}
    if args.preset:
        if args.preset not in sim.PRESETS:
            raise ValueError(
                f"unknown preset {args.preset!r}; available: {', '.join(sorted(sim.PRESETS))}"
            )
        params.update(sim.PRESETS[args.preset])
    if args.config:
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        preset_name = loaded.pop("preset", None)
        if preset_name:
            if preset_name not in sim.PRESETS:
                raise ValueError(f"{args.config}: unknown preset {preset_name!r}")
            base = dict(sim.PRESETS[preset_name])
            base.update(params)
            params = base
        params.update(loaded)
    overrides = {
        "max_speakers": args.max_speakers,
        "count_mode": args.count_mode,
        "min_delay_s": args.min_delay,
        "energy_mode": args.energy_mode,
        "far_field": args.far_field,
        "allow_same_speaker": args.allow_same_speaker,
        "sample_rate_hz": args.sample_rate,
        "max_retries": args.max_retries,
    }
    for key, value in overrides.items():
        if value is not None:
            params[key] = value
    if args.ratio_lo is not None or args.ratio_hi is not None:
        lo, hi = params.get("energy_ratio_db", (-5.0, 5.0))
        params["energy_ratio_db"] = (
            args.ratio_lo if args.ratio_lo is not None else lo,
            args.ratio_hi if args.ratio_hi is not None else hi,
        )
    if args.max_duration is not None:
        params["max_duration_s"] = args.max_duration if args.max_duration > 0 else None
    if args.max_simultaneous is not None:
        params["max_simultaneous"] = args.max_simultaneous if args.max_simultaneous > 0 else None
    return sim.SimulationConfig.from_dict(params)


def _overlap_ratio(turns: Sequence[dict]) -> float:
    """Fraction of the mixture span during which 2+ turns are active."""
    events: List[Tuple[float, int]] = []
    span = 0.0
    for t in turns:
        events.append((t["start_s"], 1))
        events.append((t["end_s"], -1))
        span = max(span, t["end_s"])
    if span <= 0:
        return 0.0
    events.sort(key=lambda e: (e[0], e[1]))
    active = 0
    overlapped = 0.0
    prev_time = 0.0
    for time, delta in events:
        if active >= 2:
            overlapped += time - prev_time
        prev_time = time
        active += delta
    return overlapped / span


def _print_simulate_summary(records: Sequence[dict], out_dir: Path) -> None:
    total_h = sum(r["duration_s"] for r in records) / 3600.0
    print(f"wrote {len(records)} mixtures to {out_dir} ({total_h:.2f} h total)")
    bins = [0] * 11  # exact 0%, then ten 10%-wide buckets
    for rec in records:
        ratio = _overlap_ratio(rec["turns"])
        if ratio <= 0.0:
            bins[0] += 1
        else:
            bins[min(int(ratio * 10) + 1, 10)] += 1
    print("overlap-ratio histogram:")
    labels = ["0%"] + [f"{10 * i}-{10 * (i + 1)}%" for i in range(10)]
    for label, count in zip(labels, bins):
        if count:
            print(f"  {label:>8}: {count}")


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _build_sim_config(args)
    pool = corpus.load_manifest(args.pool)
    irs = None
    if args.irs:
        irs = corpus.load_impulse_responses(args.irs, config.sample_rate_hz)
    if config.far_field and not irs:
        raise ValueError("far_field is enabled but no impulse responses were given (--irs)")
    out_dir = Path(args.out)
    audio_dir = None if args.no_audio else str(out_dir)
    if audio_dir is not None:
        (out_dir / "mixtures").mkdir(parents=True, exist_ok=True)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = _SimulateParams(
        master_seed=args.seed,
        out_dir=audio_dir,
        emit_cot=args.emit_cot,
        arrangement=args.arrangement,
        n_channels=args.channels,
    )
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)
    indices = range(args.num)
    if jobs <= 1:
        _init_worker(pool, irs, config, params)
        records = [_make_mixture(i) for i in indices]
    else:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_init_worker,
            initargs=(pool, irs, config, params),
        ) as executor:
            records = list(executor.map(_make_mixture, indices, chunksize=4))
    lines = "".join(json.dumps(rec, ensure_ascii=False) + "\n" for rec in records)
    _atomic_write(out_dir / "targets.jsonl", lines)
    _print_simulate_summary(records, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# score

def _load_scoring_inputs(args: argparse.Namespace) -> Tuple[List[dict], Dict[str, dict], List[str]]:
    refs = _read_jsonl(Path(args.refs))
    hyp_records = _read_jsonl(Path(args.hyps))
    hyps = {rec["id"]: rec for rec in hyp_records}
    ref_ids = {rec["id"] for rec in refs}
    unmatched = [rid for rid in hyps if rid not in ref_ids]
    return refs, hyps, unmatched


def _hyp_channels(rec: Optional[dict], n: int = 2) -> List[str]:
    if rec is None:
        return [""] * n
    channels = [str(c) for c in rec.get("channels", [])]
    if len(channels) < n:
        channels += [""] * (n - len(channels))
    return channels


def _write_report(args: argparse.Namespace, report: metrics.CorpusReport, extra: dict) -> None:
    print(report.render_text(), end="")
    if args.out:
        payload = {**extra, **report.to_dict()}
        _atomic_write(Path(args.out), json.dumps(payload, indent=2) + "\n")


def cmd_score_orc(args: argparse.Namespace) -> int:
    refs, hyps, unmatched = _load_scoring_inputs(args)
    results = []
    missing = []
    for rec in refs:
        rid = rec["id"]
        turns = _turns_from_record(rec)
        hyp_rec = hyps.get(rid)
        if hyp_rec is None:
            missing.append(rid)
        channels = _hyp_channels(hyp_rec, 2)
        partition = rec.get("partition")
        try:
            if args.fast:
                result = metrics.orc_wer_fast(
                    turns, channels, cot_token=args.cot_token, normalize=args.normalize)
            else:
                result = metrics.orc_wer(
                    turns, channels, args.max_exhaustive_turns,
                    cot_token=args.cot_token, normalize=args.normalize)
        except metrics.TooManyTurnsError as exc:
            results.append(metrics.ScoredUtterance(
                rid, None, partition, skipped_reason=f"{exc.turn_count} turns > cap {exc.cap}"))
            continue
        results.append(metrics.ScoredUtterance(rid, result.stats, partition))
    report = metrics.aggregate_report(results, missing_hypotheses=missing,
                                      unmatched_hypotheses=unmatched)
    _write_report(args, report, {"metric": "orc"})
    return EXIT_OK


def cmd_score_oed(args: argparse.Namespace) -> int:
    refs, hyps, unmatched = _load_scoring_inputs(args)
    results = []
    missing = []
    for rec in refs:
        rid = rec["id"]
        turns = _turns_from_record(rec)
        # Per-speaker references, ordered by each speaker's first start.
        speaker_turns: Dict[str, List[arrange.Turn]] = {}
        for k in arrange.turn_order(turns):
            speaker_turns.setdefault(turns[k].speaker, []).append(turns[k])
        speaker_refs = [" ".join(" ".join(t.tokens) for t in ts) for ts in speaker_turns.values()]
        hyp_rec = hyps.get(rid)
        if hyp_rec is None:
            missing.append(rid)
        channels = _hyp_channels(hyp_rec, max(2, len(speaker_refs)))
        result = metrics.oed_wer(speaker_refs, channels, normalize=args.normalize)
        results.append(metrics.ScoredUtterance(rid, result.stats, rec.get("partition")))
    report = metrics.aggregate_report(results, missing_hypotheses=missing,
                                      unmatched_hypotheses=unmatched)
    _write_report(args, report, {"metric": "oed"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# turns

def cmd_turns(args: argparse.Namespace) -> int:
    refs = _read_jsonl(Path(args.refs))
    hyp_records = _read_jsonl(Path(args.hyps))
    hyps = {rec["id"]: rec for rec in hyp_records}
    if not hyp_records:
        print(metrics.TurnConfusion(counts={}).render(), end="")
        return EXIT_OK
    pairs = []
    for rec in refs:
        actual = len(rec.get("turns", []))
        if actual < 1:
            continue
        channels = _hyp_channels(hyps.get(rec["id"]), 2)
        pairs.append((actual, metrics.count_estimated_turns(channels, args.cot_token)))
    confusion = metrics.turn_confusion(pairs)
    print(confusion.render(), end="")
    if args.out:
        payload = {
            "counts": [
                {"actual": a, "estimated": e, "count": c}
                for (a, e), c in confusion.counts.items()
            ],
            "accuracy": confusion.accuracy(),
        }
        _atomic_write(Path(args.out), json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate

def cmd_validate(args: argparse.Namespace) -> int:
    pool = corpus.load_manifest(args.pool)
    issues = corpus.validate_pool(pool, args.rate)
    if args.irs:
        try:
            corpus.load_impulse_responses(args.irs, args.rate)
        except (corpus.ManifestError, corpus.AudioFormatError, OSError) as exc:
            issues.append(corpus.PoolIssue("impulse_responses", "-", str(exc)))
    for issue in issues:
        print(f"{issue.kind}: {issue.item_id}: {issue.detail}")
    if not issues:
        print(f"pool OK ({len(pool)} utterances, {len(pool.speakers)} speakers)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="turnmix",
        description="Simulate overlapping multi-speaker mixtures and score multi-channel ASR output.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default: all cores)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file (simulation fields, optional 'preset')")

    sub = parser.add_subparsers(dest="command")

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="generate mixtures and aligned targets")
    p_sim.add_argument("--pool", type=Path, required=True, help="utterance manifest (JSONL)")
    p_sim.add_argument("--irs", type=Path, default=None, help="impulse-response manifest (JSONL)")
    p_sim.add_argument("--num", type=int, required=True, help="number of mixtures")
    p_sim.add_argument("--out", type=Path, required=True, help="output directory")
    p_sim.add_argument("--preset", choices=sorted(sim.PRESETS), default=None)
    p_sim.add_argument("--no-audio", action="store_true", help="metadata-only run (no WAV files)")
    p_sim.add_argument("--emit-cot", action="store_true",
                       help="insert the change-of-turn token into channel texts")
    p_sim.add_argument("--arrangement", choices=("overlap", "speaker", "both"), default="overlap")
    p_sim.add_argument("--channels", type=int, default=2, help="output channels (default 2)")
    p_sim.add_argument("--max-speakers", type=int, default=None)
    p_sim.add_argument("--count-mode", choices=("fixed", "uniform"), default=None)
    p_sim.add_argument("--min-delay", type=float, default=None)
    p_sim.add_argument("--energy-mode", choices=("intact", "ratio"), default=None)
    p_sim.add_argument("--ratio-lo", type=float, default=None, help="energy ratio range low (dB)")
    p_sim.add_argument("--ratio-hi", type=float, default=None, help="energy ratio range high (dB)")
    p_sim.add_argument("--far-field", action=argparse.BooleanOptionalAction, default=None)
    p_sim.add_argument("--allow-same-speaker", action=argparse.BooleanOptionalAction, default=None)
    p_sim.add_argument("--max-duration", type=float, default=None,
                       help="max mixture seconds (0 or less: unbounded)")
    p_sim.add_argument("--max-simultaneous", type=int, default=None,
                       help="max concurrently active turns (0: unbounded)")
    p_sim.add_argument("--sample-rate", type=int, default=None)
    p_sim.add_argument("--max-retries", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_score = sub.add_parser("score", help="score hypotheses against references")
    score_sub = p_score.add_subparsers(dest="metric")

    p_orc = score_sub.add_parser("orc", parents=[common],
                                 help="optimal reference combination WER (2 channels)")
    p_orc.add_argument("--refs", type=Path, required=True, help="targets JSONL")
    p_orc.add_argument("--hyps", type=Path, required=True, help="hypothesis JSONL")
    p_orc.add_argument("--out", type=Path, default=None, help="JSON report path")
    p_orc.add_argument("--max-exhaustive-turns", type=int,
                       default=metrics.DEFAULT_MAX_EXHAUSTIVE_TURNS,
                       help="skip utterances with more turns unless --fast")
    p_orc.add_argument("--fast", action="store_true",
                       help="use the joint dynamic program (no turn cap)")
    p_orc.add_argument("--normalize", action="store_true",
                       help="lowercase and strip token-edge punctuation before scoring")
    p_orc.add_argument("--cot-token", default=arrange.COT_TOKEN)
    p_orc.set_defaults(func=cmd_score_orc)

    p_oed = score_sub.add_parser("oed", parents=[common],
                                 help="optimal edit distance WER over channel permutations")
    p_oed.add_argument("--refs", type=Path, required=True)
    p_oed.add_argument("--hyps", type=Path, required=True)
    p_oed.add_argument("--out", type=Path, default=None)
    p_oed.add_argument("--normalize", action="store_true")
    p_oed.set_defaults(func=cmd_score_oed)

    p_turns = sub.add_parser("turns", parents=[common],
                             help="turn-count confusion matrix from change-of-turn tokens")
    p_turns.add_argument("--refs", type=Path, required=True)
    p_turns.add_argument("--hyps", type=Path, required=True)
    p_turns.add_argument("--out", type=Path, default=None)
    p_turns.add_argument("--cot-token", default=arrange.COT_TOKEN)
    p_turns.set_defaults(func=cmd_turns)

    p_val = sub.add_parser("validate", parents=[common],
                           help="check a pool manifest against its audio files")
    p_val.add_argument("--pool", type=Path, required=True)
    p_val.add_argument("--rate", type=int, default=16000)
    p_val.add_argument("--irs", type=Path, default=None)
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except sim.RetriesExhaustedError as exc:
        _fail(str(exc))
        return EXIT_INFEASIBLE
    except corpus.ManifestError as exc:
        _fail(str(exc))
        return EXIT_CONFIG
    except corpus.AudioFormatError as exc:
        _fail(str(exc))
        return EXIT_IO
    except OSError as exc:
        _fail(str(exc))
        return EXIT_IO
    except (ValueError, metrics.StateLimitError) as exc:
        _fail(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
