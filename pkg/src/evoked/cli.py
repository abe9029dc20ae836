"""Command-line entry point.

    evoked synth    --seed 7 --outdir runs
    evoked ingest   --manifest runs/<id>/corpus/manifest.json
    evoked folds    --protocol table1
    evoked train    --manifest ... --model mt --fold F1 --outdir runs
    evoked eval     --manifest ... --checkpoint runs/<id>/model.ckpt --outdir runs
    evoked crossval --config run.json
    evoked analyze  --manifest ... --outdir runs

Options come from an optional JSON ``--config`` document; flags override it.
Every command that writes files puts them in ``<outdir>/<run-id>/`` where
run-id is a prefix of the hash of the resolved configuration.
Exit status: 0 ok, 1 invalid configuration or input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .annotations import DataError, build_dataset, dataset_stats, load_manifest, movie_samples
from .evaluation import (EvalReport, builtin_folds, config_hash, correlation_analysis, cross_validate,
                         encode_for_model, evaluate_model, reference_reports, table_csv, train_fold_model)
from .model import MODALITIES, load_checkpoint, save_checkpoint
from .synth import SynthConfig, synth_generate
from .training import TrainConfig

COMMANDS = ("synth", "ingest", "folds", "train", "eval", "crossval", "analyze")
log = logging.getLogger("evoked")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    manifest: str | None = None
    protocol: str = "table1"
    model: str = "mt"
    modalities: str = "both"
    train: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    outdir: str = "runs"
    seed: int = 0
    workers: int = 1
    fold: str | None = None
    folds: list | None = None
    target: str = "Vavg"
    checkpoint: str | None = None
    binary: bool = False

    def resolved(self) -> dict:
        """Everything that determines the outputs (the hash input)."""
        d = asdict(self)
        d["train"] = self.train_config().to_dict()
        d["synth"] = asdict(self.synth_config()) if self.command == "synth" else {}
        del d["workers"], d["outdir"]  # neither changes the results
        return d

    def hash(self) -> str:
        return config_hash(self.resolved())

    def run_dir(self) -> Path:
        return Path(self.outdir) / self.hash()[:12]

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        return TrainConfig.from_dict(d)

    def synth_config(self) -> SynthConfig:
        d = dict(self.synth)
        d.setdefault("seed", self.seed)
        return SynthConfig(**d)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.protocol not in ("table1", "baseline"):
            raise ConfigError(f"--protocol must be table1 or baseline, got {self.protocol!r}")
        if self.model not in ("st", "mt"):
            raise ConfigError(f"--model must be st or mt, got {self.model!r}")
        if self.modalities not in MODALITIES:
            raise ConfigError(f"--modality must be one of {MODALITIES}, got {self.modalities!r}")
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")
        try:
            self.train_config()
            if self.command == "synth":
                self.synth_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if self.command in ("ingest", "train", "eval", "crossval", "analyze"):
            if not self.manifest:
                raise ConfigError(f"{self.command} needs --manifest")
            manifest = load_manifest(self.manifest)
            if self.command == "train" and self.model == "st":
                _target_index(self.target, manifest.viewer_count)
        if self.command == "eval":
            if not self.checkpoint or not Path(self.checkpoint).is_file():
                raise ConfigError("eval needs an existing --checkpoint")
        if self.command in ("train", "crossval"):
            ids = [f.fold_id for f in builtin_folds(self.protocol)]
            wanted = ([self.fold] if self.fold else []) + list(self.folds or [])
            bad = [f for f in wanted if f not in ids]
            if bad:
                raise ConfigError(f"unknown fold(s) {bad} for protocol {self.protocol} (have {ids})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evoked", description="ST/MT evoked-valence models: data, training, evaluation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=("table1", "baseline"))
    p.add_argument("--model", choices=("st", "mt"))
    p.add_argument("--modality", dest="modalities", choices=MODALITIES)
    p.add_argument("--outdir")
    p.add_argument("--workers", type=int)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--fold", help="fold id for train/eval (default: first fold of the protocol)")
    p.add_argument("--target", help="ST target name, e.g. V3 or Vavg")
    p.add_argument("--binary", action="store_true", default=None, help="analyze: correlate binary labels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    doc.pop("command", None)
    for key in ("seed", "protocol", "model", "modalities", "outdir", "workers", "manifest",
                "checkpoint", "fold", "target", "binary"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    try:
        cfg = RunConfig(command=args.command, **doc)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from None
    cfg.validate()
    return cfg


# -- commands ------------------------------------------------------------------------------

def _prepare_dir(cfg: RunConfig) -> Path:
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg.resolved(), "config_hash": cfg.hash(), "seed": cfg.seed}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _target_index(name: str, viewer_count: int) -> int:
    names = [f"V{i + 1}" for i in range(viewer_count)] + ["Vavg"]
    if name not in names:
        raise ConfigError(f"unknown target {name!r}; expected one of {names}")
    return names.index(name)


def _pick_fold(cfg: RunConfig, fold_id: str | None = None):
    folds = builtin_folds(cfg.protocol)
    want = fold_id or cfg.fold or folds[0].fold_id
    return next(f for f in folds if f.fold_id == want)


def cmd_synth(cfg, out):
    manifest, _ = synth_generate(cfg.synth_config(), out / "corpus")
    print(manifest)


def cmd_ingest(cfg, out):
    samples = build_dataset(cfg.manifest)
    print(json.dumps(dataset_stats(samples), indent=2, sort_keys=True))


def cmd_folds(cfg, out):
    for f in builtin_folds(cfg.protocol):
        print(f.line())


def cmd_train(cfg, out):
    samples = build_dataset(cfg.manifest)
    fold = _pick_fold(cfg)
    target = _target_index(cfg.target, samples[0].viewer_count) if cfg.model == "st" else None
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as logf:
        model, res, _ = train_fold_model(samples, fold, cfg.model, cfg.train_config(), cfg.modalities,
                                         cfg.seed, cfg.backbone, target, log_stream=logf)
    save_checkpoint(model, out / "model.ckpt", res.optimizer, extra=_stamp(cfg))
    print(out / "model.ckpt")


def cmd_eval(cfg, out):
    samples = build_dataset(cfg.manifest)
    model = load_checkpoint(cfg.checkpoint)
    fold = _pick_fold(cfg, model.meta.get("fold") if cfg.fold is None else None)
    test = movie_samples(samples, fold.test)
    if not test:
        raise DataError(f"no samples for test movies {fold.test}")
    acc = evaluate_model(model, encode_for_model(model, test), cfg.train_config().threshold)
    names = [f"V{i + 1}" for i in range(samples[0].viewer_count)] + ["Vavg"]
    report = EvalReport(f"{model.kind.upper()}-{model.modalities}", names, [fold.fold_id], acc[None, :],
                        dict(_stamp(cfg), checkpoint=str(cfg.checkpoint)))
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json(), end="")


def cmd_crossval(cfg, out):
    samples = build_dataset(cfg.manifest)
    folds = builtin_folds(cfg.protocol)
    if cfg.folds:
        folds = [f for f in folds if f.fold_id in cfg.folds]
    report, logs = cross_validate(samples, folds, cfg.model, cfg.train_config(), cfg.modalities, cfg.seed,
                                  cfg.backbone, workers=cfg.workers, ckpt_dir=out / "checkpoints")
    report.metadata.update(_stamp(cfg))
    refs = reference_reports(samples, folds, cfg.seed)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(table_csv([*refs, report]), encoding="utf-8")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as f:
        for entry in logs:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    print(table_csv([*refs, report]), end="")


def cmd_analyze(cfg, out):
    samples = build_dataset(cfg.manifest)
    res = correlation_analysis(samples, binary=cfg.binary)
    (out / "correlation_average.csv").write_text(res.matrix_csv(), encoding="utf-8")
    for movie, m in res.per_movie.items():
        (out / f"correlation_{movie}.csv").write_text(res.matrix_csv(m), encoding="utf-8")
    (out / "histograms.csv").write_text(res.histogram_csv(), encoding="utf-8")
    summary = dict(_stamp(cfg), mean_viewer_correlation=res.mean_viewer_offdiag(),
                   viewer_vs_average=[float(x) for x in res.average[-1, :-1]])
    (out / "analysis.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(res.matrix_csv(), end="")


HANDLERS = {"synth": cmd_synth, "ingest": cmd_ingest, "folds": cmd_folds, "train": cmd_train,
            "eval": cmd_eval, "crossval": cmd_crossval, "analyze": cmd_analyze}
WRITES = {"synth", "train", "eval", "crossval", "analyze"}


def run(cfg: RunConfig) -> int:
    out = _prepare_dir(cfg) if cfg.command in WRITES else None
    HANDLERS[cfg.command](cfg, out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, DataError, ValueError) as e:
        print(f"evoked: invalid configuration: {e}", file=sys.stderr)
        return 1
    try:
        return run(cfg)
    except ConfigError as e:
        print(f"evoked {cfg.command}: invalid configuration: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - reported and mapped to exit code 2
        log.debug("failure", exc_info=True)
        print(f"evoked {cfg.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
