"""Experiment entry point: ``siamlab <subcommand> --config FILE [flags]``.

Subcommands are ``pretrain``, ``linear-eval``, ``knn-eval``,
``variance-probe`` and ``plot``. A run's artifacts live in
``<output_dir>/<digest[:12]>/`` where the digest covers every resolved
config value except ``output_dir`` itself, so the same config file always
maps to the same directory and different configs never collide.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

import yaml

from siamlab.checkpoint import digest_of, load_checkpoint, model_digest
from siamlab.errors import ConfigurationError, SiamLabError
from siamlab.model import EncoderSpec, PredictorSpec, build_model
from siamlab.trainer import TrainConfig

log = logging.getLogger("siamlab")

SUBCOMMANDS = ("pretrain", "linear-eval", "knn-eval", "variance-probe", "plot")
DATASETS = ("synthetic", "cifar10", "cifar100", "stl10", "tiny_imagenet", "imagefolder")


@dataclass(frozen=True)
class DataSection:
    n_classes: int = 10
    n_per_class: int = 500
    image_size: int = 32
    seed: int = 0
    root: Optional[str] = None


@dataclass(frozen=True)
class EvalSection:
    knn_k: Optional[int] = None
    knn_temperature: float = 0.1
    knn_every: int = 0
    linear_epochs: int = 30
    linear_lr: float = 0.1
    linear_batch_size: int = 256
    linear_augment: bool = True


@dataclass(frozen=True)
class ProbeSection:
    methods: tuple = ("simsiam_kaug", "ensiam")
    K: int = 4
    n_draws: int = 200
    n_images: int = 8
    ci_level: float = 0.95
    augmentation: str = "default"


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description.

    ``train``, ``encoder`` and ``predictor`` reuse the library's own config
    records, so their validation rules apply unchanged.
    """

    train: TrainConfig
    encoder: EncoderSpec
    predictor: PredictorSpec
    dataset: str = "synthetic"
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    checkpoint_every: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        out = {k: v for k, v in dataclasses.asdict(self.train).items()}
        out.update(
            dataset=self.dataset,
            encoder=dataclasses.asdict(self.encoder),
            predictor=dataclasses.asdict(self.predictor),
            data=dataclasses.asdict(self.data),
            eval=dataclasses.asdict(self.eval),
            probe={**dataclasses.asdict(self.probe), "methods": list(self.probe.methods)},
            checkpoint_every=self.checkpoint_every,
            output_dir=self.output_dir,
        )
        return out

    @property
    def config_digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return digest_of(d)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.config_digest[:12]


# --- parsing -----------------------------------------------------------------

_TOP_LEVEL = {"dataset": str, "checkpoint_every": int, "output_dir": str}
_SECTIONS = {"encoder": EncoderSpec, "predictor": PredictorSpec, "data": DataSection, "eval": EvalSection, "probe": ProbeSection}


def _coerce(value, hint, path: str):
    if get_origin(hint) is Union:
        inner = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, inner[0], path)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is tuple:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            return tuple(value)
    name = getattr(hint, "__name__", str(hint))
    raise ConfigurationError(f"{path}: expected {name}, got {type(value).__name__} ({value!r})")


def _build(cls, values: dict, prefix: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except SiamLabError as exc:
        where = prefix.rstrip(".") or "config"
        raise ConfigurationError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a nested mapping and fill in every default."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config: top level must be a mapping")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    allowed = train_keys | set(_TOP_LEVEL) | set(_SECTIONS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"{unknown[0]}: unknown key")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.get(name) or {}
        if not isinstance(sub, dict):
            raise ConfigurationError(f"{name}: expected a mapping")
        sections[name] = _build(cls, sub, name + ".")
    train = _build(TrainConfig, {k: v for k, v in raw.items() if k in train_keys}, "")
    top = {k: _coerce(raw[k], t, k) for k, t in _TOP_LEVEL.items() if k in raw}
    if top.get("dataset", "synthetic") not in DATASETS:
        raise ConfigurationError(f"dataset: must be one of {DATASETS}, got {top['dataset']!r}")
    if top.get("checkpoint_every", 0) < 0:
        raise ConfigurationError("checkpoint_every: must be >= 0")
    if sections["encoder"].projector_out_dim != sections["predictor"].in_out_dim:
        raise ConfigurationError("predictor.in_out_dim: must equal encoder.projector_out_dim")
    return ExperimentConfig(train=train, **sections, **top)


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{key}: {p} is not a section")
    node[parts[-1]] = value


def parse_config(file, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a YAML config file, apply ``{"dotted.key": value}`` overrides, validate."""
    path = Path(file)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({str(exc).splitlines()[0]})") from None
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    return config_from_dict(raw)


# --- run helpers -------------------------------------------------------------


@contextmanager
def run_lock(directory: Path):
    """Exclusive lock file guarding a run directory against concurrent reuse."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"{directory} is locked by another run (remove {lock.name} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def load_datasets(cfg: ExperimentConfig):
    from siamlab.data import load_image_dataset, synthetic_dataset

    if cfg.dataset == "synthetic":
        d = cfg.data
        return synthetic_dataset(d.n_classes, d.n_per_class, d.image_size, d.seed)
    if cfg.data.root is None:
        raise ConfigurationError(f"data.root: required for dataset {cfg.dataset!r}")
    return load_image_dataset(cfg.data.root, cfg.dataset)


def _write_resolved(cfg: ExperimentConfig, directory: Path) -> None:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True)
    (directory / "config.yaml").write_text(text)


def _load_for_eval(cfg: ExperimentConfig, checkpoint):
    path = Path(checkpoint) if checkpoint else cfg.run_dir / "final.ckpt"
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} not found (run pretrain first or pass --checkpoint)")
    expected = model_digest(build_model(cfg.encoder, cfg.predictor, seed=0))
    return load_checkpoint(path, expected_model_digest=expected).model


def _pretrain(cfg: ExperimentConfig, args) -> dict:
    from siamlab.evaluation import knn_eval
    from siamlab.trainer import pretrain

    train, test = load_datasets(cfg)
    run_dir = cfg.run_dir
    _write_resolved(cfg, run_dir)
    callback = None
    if cfg.eval.knn_every:

        def callback(state, record):
            if (record["epoch"] + 1) % cfg.eval.knn_every:
                return None
            res = knn_eval(state.model, train, test, cfg.eval.knn_k, cfg.eval.knn_temperature, cfg.train.crop_size)
            state.model.train()
            return {"knn_accuracy": res.top1_accuracy}

    result = pretrain(
        cfg.train,
        train,
        cfg.encoder,
        cfg.predictor,
        out_dir=run_dir,
        config_digest=cfg.config_digest,
        checkpoint_every=cfg.checkpoint_every,
        epoch_callback=callback,
    )
    return {"checkpoint": str(result.checkpoint.path), "steps": result.state.global_step}


def _evaluate(cfg: ExperimentConfig, args, protocol: str) -> dict:
    from siamlab.evaluation import append_result, knn_eval, linear_eval

    train, test = load_datasets(cfg)
    model = _load_for_eval(cfg, args.checkpoint)
    e = cfg.eval
    if protocol == "knn":
        res = knn_eval(model, train, test, e.knn_k, e.knn_temperature, cfg.train.crop_size, cfg.config_digest)
    else:
        res = linear_eval(
            model,
            train,
            test,
            epochs=e.linear_epochs,
            base_lr=e.linear_lr,
            batch_size=e.linear_batch_size,
            augment=e.linear_augment,
            crop_size=cfg.train.crop_size,
            seed=cfg.train.seed,
            config_digest=cfg.config_digest,
        )
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    append_result(cfg.run_dir / "eval.jsonl", res)
    return {"protocol": res.protocol, "top1_accuracy": res.top1_accuracy}


def _variance_probe(cfg: ExperimentConfig, args) -> dict:
    import torch

    from siamlab.augment import preset
    from siamlab.plots import plot_variance_report
    from siamlab.variance_probe import compare_methods

    p = cfg.probe
    _, test = load_datasets(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.run_dir / "final.ckpt"
    if ckpt.is_file():
        model = _load_for_eval(cfg, ckpt)
    else:
        log.info("no checkpoint at %s, probing the freshly initialized model", ckpt)
        model = build_model(cfg.encoder, cfg.predictor, cfg.train.seed)
    images = test.images[: p.n_images]
    with torch.random.fork_rng(devices=[]):
        report = compare_methods(
            model,
            images,
            p.K,
            p.n_draws,
            preset(p.augmentation, cfg.train.crop_size),
            seed=cfg.train.seed,
            ci_level=p.ci_level,
            methods=tuple(p.methods),
            normalize=test.normalize,
        )
    out = cfg.run_dir / "variance"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "variance_report.json")
    plot_variance_report(report, out / "variance_report.png")
    return {"passes": sum(report.passes), "n_images": len(report.passes)}


def _plot(cfg: ExperimentConfig, args) -> dict:
    from siamlab.plots import plot_metric_curves

    runs = [Path(r) for r in (args.runs or [cfg.run_dir])]
    target = Path(args.out) if args.out else cfg.run_dir / "plots" / f"{args.metric}.png"
    plot_metric_curves(runs, args.metric, target)
    return {"figure": str(target)}


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set {item!r}: expected key=value")
        key, text = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(text)
    if getattr(args, "methods", None):
        out["probe.methods"] = args.methods
    if getattr(args, "K", None) is not None:
        key = "probe.K" if args.command == "variance-probe" else "K"
        out[key] = args.K
    if getattr(args, "output_dir", None):
        out["output_dir"] = args.output_dir
    return out


def run(subcommand: str, config, overrides: Optional[dict] = None, args=None) -> int:
    """Execute one subcommand; returns the process exit status.

    ``config`` is a path or an :class:`ExperimentConfig`. Library errors are
    reported as one line on stderr with a nonzero status.
    """
    args = args or argparse.Namespace(checkpoint=None, runs=None, out=None, metric="knn_accuracy")
    try:
        if subcommand not in SUBCOMMANDS:
            raise ConfigurationError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
        cfg = config if isinstance(config, ExperimentConfig) else parse_config(config, overrides)
        if overrides and isinstance(config, ExperimentConfig):
            raw = cfg.to_dict()
            for k, v in overrides.items():
                _set_dotted(raw, k, v)
            cfg = config_from_dict(raw)
        handler = {
            "pretrain": _pretrain,
            "linear-eval": lambda c, a: _evaluate(c, a, "linear"),
            "knn-eval": lambda c, a: _evaluate(c, a, "knn"),
            "variance-probe": _variance_probe,
            "plot": _plot,
        }[subcommand]
        with run_lock(cfg.run_dir):
            summary = handler(cfg, args)
    except (SiamLabError, OSError) as exc:
        print(f"siamlab {subcommand}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    print(json.dumps({"command": subcommand, "run_dir": str(cfg.run_dir), **summary}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--output-dir", dest="output_dir")
        if name in ("linear-eval", "knn-eval", "variance-probe"):
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: the run's final.ckpt)")
        if name in ("pretrain", "variance-probe"):
            p.add_argument("--K", type=int)
        if name == "variance-probe":
            p.add_argument("--methods", help="comma-separated pair, e.g. simsiam_kaug,ensiam")
        if name == "plot":
            p.add_argument("--metric", default="knn_accuracy")
            p.add_argument("--runs", nargs="+", help="run directories to overlay")
            p.add_argument("--out", help="figure path (default: <run_dir>/plots/<metric>.png)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for name in ("checkpoint", "runs", "out", "metric"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        overrides = _overrides(args)
    except ConfigurationError as exc:
        print(f"siamlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return run(args.command, args.config, overrides, args)


if __name__ == "__main__":
    sys.exit(main())
