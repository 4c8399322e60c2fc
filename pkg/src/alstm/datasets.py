"""Utterance manifests, speaker-disjoint splits and synthetic sequence tasks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audiofeat import N_FEATURES, read_alsf, write_alsf
from .emonet import EMOTIONS, GENDERS
from .errors import DataError

SPLITS = ("train", "test")
REQUIRED_FIELDS = ("id", "emotion", "speaker", "gender")
OPTIONAL_FIELDS = ("split", "features", "frames")


@dataclass
class UtteranceRecord:
    id: str
    emotion: str
    speaker: str
    gender: str
    split: str = "train"
    features_path: Path | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.emotion not in EMOTIONS:
            raise DataError(f"utterance {self.id!r}: unknown emotion {self.emotion!r}")
        if self.gender not in GENDERS:
            raise DataError(f"utterance {self.id!r}: unknown gender {self.gender!r}")
        if self.split not in SPLITS:
            raise DataError(f"utterance {self.id!r}: unknown split {self.split!r}")
        if (self.features is None) == (self.features_path is None):
            raise DataError(f"utterance {self.id!r}: give exactly one of a feature file or inline frames")

    def load_features(self) -> np.ndarray:
        """Raw feature matrix (frames x 36); files are only read, never modified."""
        feats = self.features if self.features is not None else read_alsf(self.features_path)
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != N_FEATURES or feats.shape[0] < 1:
            raise DataError(f"utterance {self.id!r}: features have shape {feats.shape}")
        return feats

    def to_json(self, base: Path | None = None) -> dict:
        d = {"id": self.id, "emotion": self.emotion, "speaker": self.speaker,
             "gender": self.gender, "split": self.split}
        if self.features_path is not None:
            p = Path(self.features_path)
            d["features"] = str(p.relative_to(base) if base and p.is_relative_to(base) else p)
        else:
            d["frames"] = np.asarray(self.features).tolist()
        return d


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse a JSON-lines manifest; feature paths resolve relative to the manifest."""
    path = Path(path)
    base = path.parent
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in REQUIRED_FIELDS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {missing}")
            unknown = sorted(set(obj) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS))
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown field(s) {unknown}")
            if obj["id"] in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            feat_path = None
            if "features" in obj:
                feat_path = base / obj["features"]
                if not feat_path.is_file():
                    raise DataError(f"{path}:{lineno}: feature file {feat_path} does not exist")
            frames = np.asarray(obj["frames"], dtype=np.float64) if "frames" in obj else None
            try:
                rec = UtteranceRecord(str(obj["id"]), obj["emotion"], str(obj["speaker"]),
                                      obj["gender"], obj.get("split", "train"), feat_path, frames)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return records


def write_manifest(records: list[UtteranceRecord], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(path.parent), sort_keys=True) + "\n")


def split_speakers(records: list[UtteranceRecord], test_speakers: tuple[str, str], seed: int,
                   val_fraction: float = 0.10):
    """Hold out one male and one female speaker; carve validation from the rest.

    ``test_speakers`` is ``(male_id, female_id)``.  Returns (train, validation, test).
    """
    genders: dict[str, set[str]] = {}
    for r in records:
        genders.setdefault(r.speaker, set()).add(r.gender)
    for spk, want in zip(test_speakers, GENDERS):
        if spk not in genders:
            raise DataError(f"test speaker {spk!r} has no utterances")
        if genders[spk] != {want}:
            raise DataError(f"test speaker {spk!r} is labelled {sorted(genders[spk])}, expected {want}")
    held = set(test_speakers)
    test = [r for r in records if r.speaker in held]
    rest = [r for r in records if r.speaker not in held]
    train, val = split_validation(rest, val_fraction, seed)
    return train, val, test


def split_validation(items: list, fraction: float, seed: int) -> tuple[list, list]:
    """Uniform random hold-out of ``round(fraction * n)`` items."""
    n_val = int(round(fraction * len(items)))
    order = np.random.default_rng(seed).permutation(len(items))
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


# --------------------------------------------------------------------------
# synthetic delayed-recall task


@dataclass(frozen=True)
class SynthTaskConfig:
    """Noise sequences whose class is stamped on one early frame.

    ``marker_range`` is 1-based and inclusive; every utterance is at least
    ``length_range[0]`` frames long, so the evidence sits well before the end.
    """

    n_utterances: int = 2000
    length_range: tuple[int, int] = (40, 40)
    feature_dim: int = N_FEATURES
    marker_range: tuple[int, int] = (1, 5)
    n_classes: int = 4
    n_pseudo_speakers: int = 8
    n_test: int = 0
    amplitude: float = 4.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise DataError(f"invalid length range {self.length_range}")
        if not 1 <= self.marker_range[0] <= self.marker_range[1] < lo:
            raise DataError(f"marker range {self.marker_range} must lie before the minimum length {lo}")
        if self.feature_dim != N_FEATURES:
            raise DataError(f"feature dim must be {N_FEATURES}")
        if not 2 <= self.n_classes <= len(EMOTIONS):
            raise DataError(f"n_classes must be in [2, {len(EMOTIONS)}]")
        if self.n_pseudo_speakers < 2 or self.n_pseudo_speakers % 2:
            raise DataError("n_pseudo_speakers must be even and at least 2")
        if not 0 <= self.n_test < self.n_utterances:
            raise DataError("n_test must be smaller than n_utterances")


def marker_pattern(label: int, amplitude: float = 4.0) -> np.ndarray:
    """Class signature written into the first four dims of the marker frame."""
    return amplitude * (2.0 * np.eye(4)[label] - 1.0)


def gen_delayed_recall(config: SynthTaskConfig) -> list[UtteranceRecord]:
    rng = np.random.default_rng(config.seed)
    records = []
    n_train = config.n_utterances - config.n_test
    for u in range(config.n_utterances):
        length = int(rng.integers(config.length_range[0], config.length_range[1] + 1))
        marker = int(rng.integers(config.marker_range[0], config.marker_range[1] + 1))
        label = int(rng.integers(config.n_classes))
        spk = int(rng.integers(config.n_pseudo_speakers))
        frames = rng.standard_normal((length, config.feature_dim))
        frames[marker - 1, :4] = marker_pattern(label, config.amplitude)
        records.append(UtteranceRecord(
            id=f"synth{u:05d}", emotion=EMOTIONS[label], speaker=f"spk{spk}",
            gender=GENDERS[spk % 2], split="train" if u < n_train else "test", features=frames))
    return records


def write_dataset(records: list[UtteranceRecord], out_dir) -> Path:
    """Write each record's features as ALSF plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        fpath = out / "features" / f"{r.id}.alsf"
        write_alsf(fpath, r.load_features())
        written.append(UtteranceRecord(r.id, r.emotion, r.speaker, r.gender, r.split, fpath))
    manifest = out / "manifest.jsonl"
    write_manifest(written, manifest)
    return manifest
