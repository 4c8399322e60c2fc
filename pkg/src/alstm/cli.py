"""Command-line entry point.

    alstm gen-synth --out data/synth --seed 0
    alstm train --config run.json --arch alstm --steps 5,3,1 --out model.alsm
    alstm eval --config run.json --checkpoint model.alsm --out report.json --dump-attention
    alstm compare --config run.json --seed 0 --out table.txt
    alstm extract --wav-dir wavs/ --manifest utts.jsonl --out features/
    alstm gradcheck --seed 7

Exit status: 0 on success, 1 on invalid input or configuration, 2 on any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import audiofeat, datasets, gradsuite
from .cells import CellKind, StepSet, parse_stepset
from .datasets import SynthTaskConfig, UtteranceRecord
from .emonet import EMOTIONS, GENDERS, ModelConfig, TaskHead, build, load_checkpoint, save_checkpoint
from .errors import ALSTMError, ConfigurationError, DataError
from .metrics import EvalReport, format_table
from .trainer import TrainConfig, encode, evaluate, predict, train, write_epoch_csv

log = logging.getLogger("alstm")

ARCHS = {"lstm": "conventional", "mean": "mean", "alstm": "advanced"}
SYSTEM_NAMES = {"lstm": "conventional LSTM", "mean": "mean LSTM", "alstm": "advanced LSTM"}


class UsageError(ALSTMError):
    pass


@dataclass
class RunConfig:
    """Flat dotted-key run configuration (JSON file + flag overrides)."""

    data_manifest: str | None = None
    data_test_speakers: list[str] | None = None
    model_arch: str = "alstm"
    model_steps: str = "5,3,1"
    model_dense: int = 256
    model_hidden: int = 128
    model_branch: int = 256
    model_dropout: float = 0.5
    task_emotion: float = 1.0
    task_speaker: float = 0.3
    task_gender: float = 0.6
    train_batch_size: int = 32
    train_lr: float = 1e-3
    train_beta1: float = 0.9
    train_beta2: float = 0.999
    train_eps: float = 1e-8
    train_max_epochs: int = 50
    train_patience: int = 3
    train_val_fraction: float = 0.10
    train_seed: int = 0
    synth_n_utterances: int = 2400  # including the test tail
    synth_n_test: int = 400
    synth_min_length: int = 40
    synth_max_length: int = 40
    synth_marker_min: int = 1
    synth_marker_max: int = 5
    synth_n_pseudo_speakers: int = 8

    @staticmethod
    def key_of(field_name: str) -> str:
        section, rest = field_name.split("_", 1)
        return f"{section}.{rest}"

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        fields = {cls.key_of(f.name): f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in values.items():
            f = fields[key]
            kwargs[f.name] = _coerce(key, value, f.type)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        values = {}
        if path:
            try:
                values = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigurationError(f"config {path} must hold a JSON object")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    def validate(self) -> None:
        if self.model_arch not in ARCHS:
            raise ConfigurationError(f"model.arch must be one of {sorted(ARCHS)}, got {self.model_arch!r}")
        parse_stepset(self.model_steps)
        if self.data_test_speakers is not None and len(self.data_test_speakers) != 2:
            raise ConfigurationError("data.test_speakers must list one male and one female speaker")
        for name in ("model_dense", "model_hidden", "model_branch", "train_batch_size",
                     "train_max_epochs", "train_patience", "synth_n_utterances"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{self.key_of(name)} must be positive")
        if not 0 <= self.model_dropout < 1:
            raise ConfigurationError("model.dropout must lie in [0, 1)")
        if not 0 < self.train_val_fraction < 1:
            raise ConfigurationError("train.val_fraction must lie in (0, 1)")
        if min(self.task_emotion, self.task_speaker, self.task_gender) < 0:
            raise ConfigurationError("task weights must be nonnegative")

    def cell(self, arch: str | None = None) -> CellKind:
        arch = arch or self.model_arch
        if arch == "lstm":
            return CellKind.conventional()
        return CellKind(ARCHS[arch], parse_stepset(self.model_steps))

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train_batch_size, self.train_lr, self.train_beta1, self.train_beta2,
                           self.train_eps, self.train_max_epochs, self.train_patience,
                           self.train_val_fraction, self.train_seed)

    def model_config(self, speakers: tuple[str, ...], arch: str | None = None) -> ModelConfig:
        b = self.model_branch
        heads = [TaskHead("emotion", EMOTIONS, b, self.task_emotion)]
        if len(speakers) >= 2:
            heads.append(TaskHead("speaker", speakers, b, self.task_speaker))
        heads.append(TaskHead("gender", GENDERS, b, self.task_gender))
        return ModelConfig(audiofeat.N_FEATURES, self.model_dense, self.model_hidden,
                           self.cell(arch), tuple(heads), self.model_dropout)

    def synth_config(self) -> SynthTaskConfig:
        return SynthTaskConfig(
            n_utterances=self.synth_n_utterances,
            length_range=(self.synth_min_length, self.synth_max_length),
            marker_range=(self.synth_marker_min, self.synth_marker_max),
            n_pseudo_speakers=self.synth_n_pseudo_speakers, n_test=self.synth_n_test,
            seed=self.train_seed)


def _coerce(key: str, value, annotation: str):
    ann = str(annotation)
    try:
        if ann.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if ann.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if ann.startswith("list"):
            if value is None:
                return None
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ValueError
            return value
        if ann.startswith("str"):
            if value is None and "None" in ann:
                return None
            if isinstance(value, list):
                return ",".join(str(v) for v in value)
            if not isinstance(value, (str, int)):
                raise ValueError
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigurationError(f"config key {key!r}: invalid value {value!r}")


# --------------------------------------------------------------------------
# data plumbing


def partitions(cfg: RunConfig):
    """(train, validation or None, test) record lists for the configured manifest."""
    if not cfg.data_manifest:
        raise ConfigurationError("data.manifest is required")
    records = datasets.load_manifest(cfg.data_manifest)
    if cfg.data_test_speakers:
        train, val, test = datasets.split_speakers(records, tuple(cfg.data_test_speakers),
                                                   cfg.train_seed, cfg.train_val_fraction)
        return train, val, test
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    return train, None, test


def training_speakers(train: list[UtteranceRecord], val) -> tuple[str, ...]:
    return tuple(sorted({r.speaker for r in train + (val or [])}))


def run_training(cfg: RunConfig, arch: str | None = None):
    train_r, val_r, test_r = partitions(cfg)
    if not train_r:
        raise DataError("manifest has no training utterances")
    mcfg = cfg.model_config(training_speakers(train_r, val_r), arch)
    model = build(mcfg, cfg.train_seed)
    tr = encode(train_r, model)
    val = encode(val_r, model) if val_r else None
    result = train(model, tr, cfg.train_config(), val)
    return result, test_r


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    if not args.out:
        raise UsageError("gen-synth needs --out DIR")
    records = datasets.gen_delayed_recall(cfg.synth_config())
    manifest = datasets.write_dataset(records, args.out)
    print(f"wrote {len(records)} utterances to {manifest}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    if not (args.wav_dir and args.manifest and args.out):
        raise UsageError("extract needs --wav-dir, --manifest and --out")
    wav_dir = Path(args.wav_dir)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    written = []
    with open(args.manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                wav = wav_dir / obj.pop("wav", f"{obj['id']}.wav")
                rec_fields = {k: obj[k] for k in ("id", "emotion", "speaker", "gender")}
                split = obj.get("split", "train")
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{args.manifest}:{lineno}: bad entry ({exc})") from None
            feats = audiofeat.extract_file(wav)
            fpath = out / "features" / f"{rec_fields['id']}.alsf"
            audiofeat.write_alsf(fpath, feats)
            written.append(UtteranceRecord(**rec_fields, split=split, features_path=fpath))
    datasets.write_manifest(written, out / "manifest.jsonl")
    print(f"extracted {len(written)} utterances to {out / 'manifest.jsonl'}")
    return 0


def _log_path(out: Path) -> Path:
    return out.with_name(out.stem + ".epochs.csv")


def cmd_train(args, cfg: RunConfig) -> int:
    if not args.out:
        raise UsageError("train needs --out CHECKPOINT")
    result, _ = run_training(cfg)
    out = Path(args.out)
    save_checkpoint(result.model, out)
    write_epoch_csv(result.log, _log_path(out))
    print(f"best epoch {result.best_epoch}; checkpoint {out}; log {_log_path(out)}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    model = load_checkpoint(args.checkpoint)
    train_r, val_r, test_r = partitions(cfg)
    records = {"test": test_r, "train": train_r, "validation": val_r or []}[args.split]
    if not records:
        raise DataError(f"no utterances in the {args.split} partition")
    examples = encode(records, model)
    report = evaluate(model, examples)
    name = SYSTEM_NAMES.get({v: k for k, v in ARCHS.items()}[model.config.cell.name], "model")
    table = format_table({name: report})
    print(table, end="")
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.dump_attention:
        base = Path(args.out) if args.out else Path("report.json")
        adir = base.with_name(base.stem + "_attention")
        adir.mkdir(parents=True, exist_ok=True)
        _, attn = predict(model, examples, attention=True)
        for ex, weights in zip(examples, attn):
            with open(adir / f"{ex.id}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "weight"])
                for i, a in enumerate(weights):
                    w.writerow([i, repr(float(a))])
        print(f"attention weights written to {adir}")
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    rows: dict[str, EvalReport] = {}
    for arch in ("lstm", "mean", "alstm"):
        result, test_r = run_training(cfg, arch)
        if not test_r:
            raise DataError("comparison needs test utterances")
        rows[SYSTEM_NAMES[arch]] = evaluate(result.model, encode(test_r, result.model))
        log.info("%s: best epoch %d", arch, result.best_epoch)
    table = format_table(rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.write_text(table, encoding="utf-8")
        payload = {name: r.to_dict() for name, r in rows.items()}
        out.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradsuite.run_all(seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<22} max rel err {r.max_rel_err:.3e}  (< {r.tolerance:g})  {status}")
    worst = max(r.max_rel_err for r in results)
    print(f"max rel err {worst:.3e}")
    return 0 if worst < gradsuite.MODEL_TOLERANCE and all(r.passed for r in results) else 2


COMMANDS = {
    "extract": cmd_extract,
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alstm", description="A-LSTM weighted-pooling emotion recognition toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--arch", choices=sorted(ARCHS))
        p.add_argument("--steps", metavar="LIST")
        p.add_argument("--out", metavar="PATH")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH")
            p.add_argument("--split", choices=["test", "train", "validation"], default="test")
            p.add_argument("--dump-attention", action="store_true")
        if name == "extract":
            p.add_argument("--wav-dir", metavar="DIR")
            p.add_argument("--manifest", metavar="PATH")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.steps is not None:
            parse_stepset(args.steps)
        cfg = RunConfig.load(args.config, {"train.seed": args.seed, "model.arch": args.arch,
                                           "model.steps": args.steps})
        return COMMANDS[args.command](args, cfg)
    except ALSTMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
