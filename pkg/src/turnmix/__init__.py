"""Overlapping multi-speaker mixture simulation and multi-channel ASR scoring.

The package splits into four layers: :mod:`turnmix.corpus` (pools,
manifests, WAV I/O), :mod:`turnmix.simulate` (mixture planning and
rendering), :mod:`turnmix.arrange` (speaker-based and overlap-based
channel targets, change-of-turn serialization, assignment primitives)
and :mod:`turnmix.metrics` (edit distance, OED WER, ORC WER, turn
counting). :mod:`turnmix.cli` ties them into batch workflows.
"""

from turnmix.arrange import (
    COT_TOKEN,
    ArrangementError,
    ChannelTargets,
    Turn,
    arrange_overlap_based,
    arrange_speaker_based,
    dat_assignment,
    pit_best_permutation,
    serialize_channel,
    serialize_targets,
)
from turnmix.corpus import (
    AudioBuffer,
    AudioFormatError,
    ImpulseResponse,
    ManifestError,
    Pool,
    Utterance,
    load_audio,
    load_impulse_responses,
    load_manifest,
    save_manifest,
    validate_pool,
    write_wav,
)
from turnmix.metrics import (
    EditStats,
    OedResult,
    OrcResult,
    TurnConfusion,
    aggregate_report,
    count_estimated_turns,
    oed_wer,
    orc_wer,
    orc_wer_fast,
    turn_confusion,
    word_edit_distance,
)
# The end-to-end generator lives at turnmix.simulate.simulate; re-exporting
# the function here would shadow the submodule.
from turnmix.simulate import (
    EnergyCache,
    Mixture,
    MixturePlan,
    PlanEntry,
    RetriesExhaustedError,
    SimulationConfig,
    convolve,
    gain_for_energy_ratio,
    measure_energy,
    mixture_seed,
    preset,
    render,
    sample_plan,
)

__version__ = "0.1.0"
