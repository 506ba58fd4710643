"""Deterministic synthetic audio-caption corpus, vocabulary, and JSONL I/O.

Each clip renders 1-3 sound events (tones, noise bursts, chirps, click
trains) at 8 kHz and pairs them with five paraphrase captions generated
from an unambiguous template grammar, so the event sequence can be parsed
back out of any caption.  Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 8000
MIN_CLIP_SECONDS = 1.0
MAX_CLIP_SECONDS = 2.0

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

KINDS = ("tone", "noise_burst", "chirp", "click_train")
PITCHES = ("low", "mid", "high")
COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}
WORD_COUNTS = {w: c for c, w in COUNT_WORDS.items()}

TONE_HZ = {"low": 220.0, "mid": 440.0, "high": 880.0}
NOISE_BAND_HZ = {"low": (100.0, 400.0), "mid": (500.0, 1200.0), "high": (1500.0, 3000.0)}
CHIRP_SWEEP_HZ = {"low": (100.0, 300.0), "mid": (400.0, 900.0), "high": (1000.0, 2400.0)}
CLICK_RATE_HZ = {"low": 20.0, "mid": 40.0, "high": 80.0}

# per-kind (unit_ms, gap_ms): one unit per repetition
UNIT_MS = {"tone": (130, 70), "noise_burst": (120, 70),
           "chirp": (160, 60), "click_train": (150, 70)}
EVENT_GAP_MS = 90
LEAD_IN_MS = 60


class DataError(ValueError):
    """Malformed dataset input or generator misuse."""


@dataclass(frozen=True)
class SoundEvent:
    kind: str
    pitch: str
    count: int
    duration_ms: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown event kind {self.kind!r}")
        if self.pitch not in PITCHES:
            raise DataError(f"unknown pitch class {self.pitch!r}")
        if not 1 <= self.count <= 4:
            raise DataError("repetition count must be in 1..4")


@dataclass
class DatasetRecord:
    clip_id: str
    samples: np.ndarray
    captions: list[str]
    events: list[SoundEvent] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not self.captions:
            raise DataError(f"record {self.clip_id!r} has no captions")


# -- rendering ---------------------------------------------------------------


def _fade(segment: np.ndarray, ms: float = 5.0) -> np.ndarray:
    n = min(int(SAMPLE_RATE * ms / 1000.0), segment.size // 2)
    if n > 0:
        ramp = np.linspace(0.0, 1.0, n)
        segment[:n] *= ramp
        segment[-n:] *= ramp[::-1]
    return segment


def _render_unit(event: SoundEvent, rng: np.random.Generator) -> np.ndarray:
    n = int(SAMPLE_RATE * UNIT_MS[event.kind][0] / 1000.0)
    t = np.arange(n) / SAMPLE_RATE
    amp = 0.45 + 0.1 * rng.random()
    if event.kind == "tone":
        unit = amp * np.sin(2 * np.pi * TONE_HZ[event.pitch] * t + rng.uniform(0, 2 * np.pi))
        return _fade(unit)
    if event.kind == "noise_burst":
        lo, hi = NOISE_BAND_HZ[event.pitch]
        freqs = rng.uniform(lo, hi, size=30)
        phases = rng.uniform(0, 2 * np.pi, size=30)
        unit = np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]).sum(axis=0)
        return _fade(amp * unit / np.abs(unit).max())
    if event.kind == "chirp":
        f0, f1 = CHIRP_SWEEP_HZ[event.pitch]
        dur = n / SAMPLE_RATE
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * dur))
        return _fade(amp * np.sin(phase + rng.uniform(0, 2 * np.pi)))
    # click_train: short decaying bursts at a pitch-dependent rate
    unit = np.zeros(n)
    period = int(SAMPLE_RATE / CLICK_RATE_HZ[event.pitch])
    click_len = int(SAMPLE_RATE * 0.003)
    decay = np.exp(-np.arange(click_len) / (SAMPLE_RATE * 0.001))
    for start in range(0, n - click_len, period):
        unit[start:start + click_len] += amp * decay * np.cos(
            2 * np.pi * 2000.0 * np.arange(click_len) / SAMPLE_RATE)
    return unit


def render_event(event: SoundEvent, rng: np.random.Generator) -> np.ndarray:
    unit_ms, gap_ms = UNIT_MS[event.kind]
    gap = np.zeros(int(SAMPLE_RATE * gap_ms / 1000.0))
    parts = []
    for rep in range(event.count):
        parts.append(_render_unit(event, rng))
        if rep + 1 < event.count:
            parts.append(gap)
    return np.concatenate(parts)


def event_duration_ms(kind: str, count: int) -> int:
    unit_ms, gap_ms = UNIT_MS[kind]
    return count * unit_ms + (count - 1) * gap_ms


def render_clip(events: list[SoundEvent], rng: np.random.Generator) -> np.ndarray:
    parts = [np.zeros(int(SAMPLE_RATE * LEAD_IN_MS / 1000.0))]
    gap = np.zeros(int(SAMPLE_RATE * EVENT_GAP_MS / 1000.0))
    for i, event in enumerate(events):
        parts.append(render_event(event, rng))
        if i + 1 < len(events):
            parts.append(gap)
    clip = np.concatenate(parts)
    min_len = int(SAMPLE_RATE * MIN_CLIP_SECONDS)
    if clip.size < min_len:
        clip = np.concatenate([clip, np.zeros(min_len - clip.size)])
    return clip


# -- caption templates ----------------------------------------------------------

_CONNECTOR = "then"


def _tone_phrases(p, c):
    cw = COUNT_WORDS[c]
    if c == 1:
        return [f"a {p} tone beeps one time", f"one {p} beep sounds",
                f"the {p} tone sounds one time", f"one beep of a {p} tone",
                f"a {p} tone beeping one time"]
    return [f"a {p} tone beeps {cw} times", f"{cw} {p} beeps sound",
            f"the {p} tone sounds {cw} times", f"{cw} beeps of a {p} tone",
            f"a {p} tone beeping {cw} times"]


def _noise_phrases(p, c):
    cw = COUNT_WORDS[c]
    if c == 1:
        return [f"a {p} noise bursts one time", f"one burst of {p} noise",
                f"the {p} noise hisses one time", f"one {p} noise burst occurs",
                f"a {p} noise bursting one time"]
    return [f"a {p} noise bursts {cw} times", f"{cw} bursts of {p} noise",
            f"the {p} noise hisses {cw} times", f"{cw} {p} noise bursts occur",
            f"a {p} noise bursting {cw} times"]


def _chirp_phrases(p, c):
    cw = COUNT_WORDS[c]
    if c == 1:
        return [f"a {p} chirp sweeps one time", f"one {p} chirp rises",
                f"the {p} chirp glides one time", f"one sweep of a {p} chirp",
                f"a {p} chirp sweeping one time"]
    return [f"a {p} chirp sweeps {cw} times", f"{cw} {p} chirps rise",
            f"the {p} chirp glides {cw} times", f"{cw} sweeps of a {p} chirp",
            f"a {p} chirp sweeping {cw} times"]


def _click_phrases(p, c):
    cw = COUNT_WORDS[c]
    if c == 1:
        return [f"a {p} click train ticks one time", f"one {p} click train ticks",
                f"the {p} clicks tick one time", f"one run of {p} clicks",
                f"a {p} click train ticking one time"]
    return [f"a {p} click train ticks {cw} times", f"{cw} {p} click trains tick",
            f"the {p} clicks tick {cw} times", f"{cw} runs of {p} clicks",
            f"a {p} click train ticking {cw} times"]


_PHRASES = {"tone": _tone_phrases, "noise_burst": _noise_phrases,
            "chirp": _chirp_phrases, "click_train": _click_phrases}

_KIND_KEYWORDS = {"tone": "tone", "beep": "tone", "beeps": "tone",
                  "noise": "noise_burst",
                  "chirp": "chirp", "chirps": "chirp",
                  "click": "click_train", "clicks": "click_train"}


def render_caption(events: list[SoundEvent], template_index: int) -> str:
    phrases = [_PHRASES[e.kind](e.pitch, e.count)[template_index] for e in events]
    return f" {_CONNECTOR} ".join(phrases)


def parse_caption(caption: str) -> list[tuple[str, str, int]]:
    """Invert the template grammar: caption -> ordered (kind, pitch, count) triples."""
    words = normalize(caption)
    phrases: list[list[str]] = [[]]
    for w in words:
        if w == _CONNECTOR:
            phrases.append([])
        else:
            phrases[-1].append(w)
    out = []
    for phrase in phrases:
        kind = next((_KIND_KEYWORDS[w] for w in phrase if w in _KIND_KEYWORDS), None)
        pitch = next((w for w in phrase if w in PITCHES), None)
        count = next((WORD_COUNTS[w] for w in phrase if w in WORD_COUNTS), None)
        if kind is None or pitch is None or count is None:
            raise DataError(f"caption phrase {' '.join(phrase)!r} does not parse")
        out.append((kind, pitch, count))
    return out


# -- generation ---------------------------------------------------------------------


def _sample_events(rng: np.random.Generator, seen: set) -> list[SoundEvent]:
    budget_ms = 1000.0 * (MAX_CLIP_SECONDS - 0.15) - LEAD_IN_MS
    for _ in range(200):
        n = int(rng.integers(1, 4))
        events = []
        for _ in range(n):
            kind = KINDS[rng.integers(len(KINDS))]
            pitch = PITCHES[rng.integers(len(PITCHES))]
            count = int(rng.integers(1, 5))
            events.append(SoundEvent(kind, pitch, count,
                                     event_duration_ms(kind, count)))
        total = sum(e.duration_ms for e in events) + EVENT_GAP_MS * (n - 1)
        key = tuple((e.kind, e.pitch, e.count) for e in events)
        if total <= budget_ms and key not in seen:
            seen.add(key)
            return events
    raise DataError("could not sample a fresh event sequence; corpus too large")


def generate(seed: int, n_clips: int, n_captions_per_clip: int = 5) -> list[DatasetRecord]:
    """Render a deterministic corpus of clips with paraphrase captions."""
    if n_clips < 2:
        raise DataError("need at least 2 clips")
    if not 1 <= n_captions_per_clip <= 5:
        raise DataError("n_captions_per_clip must be in 1..5")
    seeds = np.random.SeedSequence(seed).spawn(n_clips)
    seen: set = set()
    records = []
    for i, child in enumerate(seeds):
        rng = np.random.default_rng(child)
        events = _sample_events(rng, seen)
        samples = render_clip(events, rng)
        captions = [render_caption(events, k) for k in range(n_captions_per_clip)]
        records.append(DatasetRecord(f"clip_{i:04d}", samples, captions, events))
    return records


def split_records(records: list[DatasetRecord], test_fraction: float = 0.2,
                  seed: int = 0) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Seeded clip-level partition preserving corpus order within each side."""
    n_test = int(round(test_fraction * len(records)))
    order = np.random.default_rng(seed).permutation(len(records))
    test_idx = set(order[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# -- tokenization ---------------------------------------------------------------------

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def normalize(text: str) -> list[str]:
    """Lowercase, strip punctuation to whitespace, split."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Token/id bijection with fixed reserved ids pad=0, start=1, end=2, unk=3."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        ids = [self.token_to_id.get(w, UNK_ID) for w in normalize(text)]
        return [START_ID] + ids + [END_ID]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids
                        if i >= len(RESERVED_TOKENS))


def build_vocab(records: list[DatasetRecord]) -> Vocabulary:
    """Frequency-descending (ties lexicographic) vocabulary over all captions."""
    if not records:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for record in records:
        for caption in record.captions:
            for word in normalize(caption):
                counts[word] = counts.get(word, 0) + 1
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


# -- JSONL interchange -------------------------------------------------------------


def save_jsonl(records: list[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps({"id": record.clip_id,
                                 "samples": record.samples.tolist(),
                                 "captions": list(record.captions)}) + "\n")


def load_jsonl(path) -> list[DatasetRecord]:
    """Parse and validate one record per line; errors carry the line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"line {lineno}: invalid JSON ({err.msg})") from err
            for key in ("id", "samples", "captions"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key!r}")
            if not isinstance(obj["captions"], list) or not obj["captions"]:
                raise DataError(f"line {lineno}: captions must be a non-empty list")
            if not all(isinstance(c, str) and c.strip() for c in obj["captions"]):
                raise DataError(f"line {lineno}: captions must be non-empty strings")
            samples = np.asarray(obj["samples"], dtype=np.float64)
            if samples.ndim != 1 or samples.size == 0:
                raise DataError(f"line {lineno}: samples must be a flat non-empty list")
            if not np.all(np.isfinite(samples)):
                raise DataError(f"line {lineno}: samples contain NaN/Inf")
            records.append(DatasetRecord(str(obj["id"]), samples,
                                         [str(c) for c in obj["captions"]]))
    return records
