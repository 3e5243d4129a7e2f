"""Command-line front end: synth, prepare, train, detect, eval.

Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O error,
4 training aborted on a non-finite loss. Every failure writes exactly one
JSON line to stderr, e.g. ``{"error": "config", "key": "model.lambda", ...}``.
"""
from __future__ import annotations

import argparse
import configparser
import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataprep import Tile, assemble_unpaired, fit_image, tile, write_manifest
from .detector import DetectConfig, detect
from .images import from_unit, load_mask, load_png, save_pgm16, save_png, to_unit
from .models import DiscriminatorSpec, GeneratorSpec
from .synthcorpus import CorpusConfig, LabeledTile, eval_detection, gen_corpus
from .synthcorpus import read_manifest as read_corpus_manifest
from .trainer import (CheckpointError, TrainConfig, TrainingAborted, load_checkpoint, save_checkpoint,
                      smooth_log, train, write_loss_csv, write_smoothed_csv)

log = logging.getLogger("reverse_aging")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, key: str | None = None):
        super().__init__(message)
        self.code, self.kind, self.key = code, kind, key

    def line(self) -> str:
        body = {"error": self.kind, "exit": self.code, "message": str(self)}
        if self.key:
            body["key"] = self.key
        return json.dumps(body, sort_keys=True)


class ConfigError(CliError):
    def __init__(self, key: str, message: str):
        super().__init__(EXIT_CONFIG, "config", f"{key}: {message}", key)


class DataError(CliError):
    def __init__(self, message: str):
        super().__init__(EXIT_DATA, "data", message)


# -- configuration --------------------------------------------------------------

def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_interval(v):
    return 0 <= v <= 1


def _beta(v):
    return 0 <= v < 1


# section -> key -> (default, constraint or None, description)
SCHEMA = {
    "data": {
        "unit": (256, _positive, "tile side in pixels used by prepare"),
        "input": ("", None, "image directory for prepare (subdirectories D/ and H/ label domains)"),
        "corpus": ("", None, "dataset directory with trainD/, trainH/ (train) or a synth corpus (eval)"),
        "seed": (0, _non_negative, "seed for balancing the two domains"),
    },
    "model": {
        "image_size": (64, _positive, "tile side seen by the networks"),
        "base_channels": (64, _positive, "generator width"),
        "n_residual_blocks": (6, _positive, "generator depth"),
        "disc_base_channels": (64, _positive, "discriminator width"),
        "disc_layers": (3, _positive, "stride-2 discriminator layers"),
        "lambda": (10.0, _non_negative, "cycle-consistency weight"),
    },
    "train": {
        "iterations": (2000, _non_negative, "total iterations"),
        "lr": (2e-4, _positive, "Adam learning rate"),
        "beta1": (0.5, _beta, "Adam first-moment decay"),
        "beta2": (0.999, _beta, "Adam second-moment decay"),
        "seed": (0, _non_negative, "training seed"),
        "checkpoint_every": (500, _non_negative, "checkpoint cadence, 0 for final only"),
        "pool_size": (50, _non_negative, "image pool capacity"),
        "smooth_window": (300, _positive, "moving-average window"),
        "smooth_stride": (10, _positive, "moving-average emission stride"),
    },
    "detect": {
        "eps_mode": ("absolute", lambda v: v in ("absolute", "peak_fraction"), "absolute | peak_fraction"),
        "eps": (0.15, _positive, "noise threshold"),
        "min_area": (2, _non_negative, "area-open threshold in pixels (30 suits 256-px tiles)"),
        "octagon_r": (3, _non_negative, "dilation radius"),
        "clear_border": (True, None, "drop border-connected components"),
    },
    "synth": {
        "tile_size": (64, lambda v: v >= 16, "corpus tile side"),
        "train_d": (200, _non_negative, "damaged training tiles"),
        "train_h": (200, _non_negative, "healthy training tiles"),
        "test_d": (50, _non_negative, "damaged test tiles"),
        "test_h": (50, _non_negative, "healthy test tiles"),
        "damage_contrast": (0.3, _unit_interval, "damage intensity shift"),
        "seed": (0, _non_negative, "corpus master seed"),
    },
}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"expected {type(default).__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: v[0] for k, v in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    def set(self, dotted: str, value):
        section, key = dotted.split(".")
        self.values[section][key] = value
        validate(self)

    def normalized(self) -> dict:
        return {s: dict(sorted(keys.items())) for s, keys in sorted(self.values.items())}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.normalized(), sort_keys=True).encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            generator=GeneratorSpec(3, v["model"]["base_channels"], v["model"]["n_residual_blocks"],
                                    v["model"]["image_size"]),
            discriminator=DiscriminatorSpec(3, v["model"]["disc_base_channels"], v["model"]["disc_layers"]),
            lam=v["model"]["lambda"], lr=v["train"]["lr"], beta1=v["train"]["beta1"],
            beta2=v["train"]["beta2"], pool_size=v["train"]["pool_size"],
            iterations=v["train"]["iterations"], seed=v["train"]["seed"],
            checkpoint_every=v["train"]["checkpoint_every"], smooth_window=v["train"]["smooth_window"],
            smooth_stride=v["train"]["smooth_stride"])

    def detect_config(self) -> DetectConfig:
        d = self.values["detect"]
        return DetectConfig(d["eps_mode"], d["eps"], d["min_area"], d["octagon_r"], d["clear_border"])

    def corpus_config(self) -> CorpusConfig:
        s = self.values["synth"]
        return CorpusConfig(tile_size=s["tile_size"], train_D=s["train_d"], train_H=s["train_h"],
                            test_D=s["test_d"], test_H=s["test_h"], damage_contrast=s["damage_contrast"],
                            seed=s["seed"])


def validate(cfg: RunConfig) -> None:
    for section, keys in SCHEMA.items():
        for key, (_, check, _) in keys.items():
            value = cfg.values[section][key]
            if check is not None and not check(value):
                raise ConfigError(f"{section}.{key}", f"value {value!r} violates its constraint")
    size = cfg["model.image_size"]
    if size % 4 or size < 8:
        raise ConfigError("model.image_size", "must be a multiple of 4 and at least 8")
    try:
        cfg.corpus_config().validate()
    except ValueError as exc:
        raise ConfigError("synth", str(exc)) from None


def parse_config(path=None) -> RunConfig:
    """Read an INI file; missing keys take defaults, unknown keys are rejected."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed file: {exc.message}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            cfg.values[section][key] = _coerce(f"{section}.{key}", raw, SCHEMA[section][key][0])
    validate(cfg)
    return cfg


# -- output directory handling --------------------------------------------------

@contextmanager
def staged_output(out: Path):
    """Yield a staging directory that replaces ``out`` only if the body succeeds."""
    out = out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = out.with_name(f".{out.name}.lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_DATA, "locked", f"{out} is in use (lock file {lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    stage = out.with_name(f".{out.name}.staging-{os.getpid()}")
    shutil.rmtree(stage, ignore_errors=True)
    stage.mkdir()
    try:
        yield stage
        if out.exists():
            old = out.with_name(f".{out.name}.old-{os.getpid()}")
            os.replace(out, old)
            os.replace(stage, out)
            shutil.rmtree(old)
        else:
            os.replace(stage, out)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
        lock.unlink(missing_ok=True)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_digest(paths, root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(Path(p).relative_to(root)).encode())
        h.update(_file_digest(Path(p)).encode())
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(stage: Path, command: str, cfg: RunConfig, inputs: dict, started: str) -> None:
    outputs = sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())
    body = {"command": command, "config_digest": cfg.digest(), "config": cfg.normalized(),
            "input_digests": inputs, "tool_version": __version__, "started": started,
            "finished": _now(), "outputs": outputs}
    tmp = stage / ".run.json.tmp"
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, stage / "run.json")


# -- commands -----------------------------------------------------------------------

def _pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.png") if p.is_file())


def cmd_synth(args, cfg: RunConfig, stage: Path) -> dict:
    gen_corpus(cfg.corpus_config(), stage)
    return {}


def cmd_prepare(args, cfg: RunConfig, stage: Path) -> dict:
    src = Path(args.input or cfg["data.input"] or "")
    if not str(src) or not src.is_dir():
        raise DataError(f"input directory {str(src)!r} does not exist")
    labeled = {dom: _pngs(src / dom) for dom in ("D", "H") if (src / dom).is_dir()}
    groups = labeled or {"": _pngs(src)}
    files = [p for ps in groups.values() for p in ps]
    if not files:
        raise DataError(f"no PNG images under {src}")
    unit = cfg["data.unit"]
    (stage / "tiles").mkdir()
    records, by_domain = [], {dom: [] for dom in groups}
    for dom, paths in groups.items():
        for path in paths:
            img = load_png(path)
            try:
                fitted, grid = fit_image(img, unit)
            except ValueError as exc:
                raise DataError(f"{path.name}: {exc}") from None
            for t in tile(fitted, grid, path.stem):
                save_png(stage / "tiles" / f"{t.name}.png", t.image)
                records.append({"file": f"tiles/{t.name}.png", "source": t.source, "row": t.row,
                                "col": t.col, "domain": dom or None})
                by_domain[dom].append(Tile(np.empty(0), t.source, t.row, t.col))
    write_manifest(records, stage / "manifest.jsonl")
    if set(by_domain) == {"D", "H"}:
        try:
            ds = assemble_unpaired(by_domain["D"], by_domain["H"], cfg["data.seed"])
        except ValueError as exc:
            raise DataError(str(exc)) from None
        for split, tiles in (("trainD", ds.domain_D), ("trainH", ds.domain_H)):
            (stage / split).mkdir()
            for t in tiles:
                shutil.copyfile(stage / "tiles" / f"{t.name}.png", stage / split / f"{t.name}.png")
        write_manifest(ds.manifest, stage / "dataset.jsonl")
    return {"images": _tree_digest(files, src)}


def _load_domain(directory: Path, size: int) -> list[np.ndarray]:
    tiles = []
    for p in _pngs(directory):
        img = load_png(p)
        if img.shape[:2] != (size, size):
            raise DataError(f"{p}: tile is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
        tiles.append(to_unit(img))
    if not tiles:
        raise DataError(f"no tiles in {directory}")
    return tiles


def cmd_train(args, cfg: RunConfig, stage: Path) -> dict:
    corpus = Path(args.corpus or cfg["data.corpus"] or "")
    if not str(corpus) or not corpus.is_dir():
        raise DataError(f"corpus directory {str(corpus)!r} does not exist")
    tcfg = cfg.train_config()
    size = tcfg.generator.image_size
    dom_d, dom_h = _load_domain(corpus / "trainD", size), _load_domain(corpus / "trainH", size)
    inputs = {"trainD": _tree_digest(_pngs(corpus / "trainD"), corpus),
              "trainH": _tree_digest(_pngs(corpus / "trainH"), corpus)}
    state = None
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot resume: {exc}") from None
        saved = state.config
        if (saved.generator, saved.discriminator) != (tcfg.generator, tcfg.discriminator):
            raise ConfigError("model", "model specs differ from the checkpoint being resumed")
        state.config = tcfg
        inputs["resume"] = _file_digest(Path(args.resume))
    ckpt_dir = stage / "checkpoints"
    ckpt_dir.mkdir()
    try:
        _, losses = train(tcfg, dom_d, dom_h, state=state, checkpoint_dir=ckpt_dir)
    except TrainingAborted as exc:
        raise CliError(EXIT_ABORT, "training_aborted", str(exc)) from None
    write_loss_csv(losses, stage / "loss.csv")
    for key, name in (("loss_g", "smoothed.csv"), ("loss_cyc", "smoothed_cyc.csv"),
                      ("loss_d_h", "smoothed_d_h.csv"), ("loss_d_d", "smoothed_d_d.csv")):
        write_smoothed_csv(smooth_log(losses, tcfg.smooth_window, tcfg.smooth_stride, key), stage / name)
    return inputs


def _load_generator(path):
    if not path:
        raise ConfigError("checkpoint", "--checkpoint is required")
    try:
        state = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from None
    return state.params["R"], state.config.generator.image_size


def _panel(real_u8, fake_u8, mask):
    h = real_u8.shape[0]
    gap = np.full((h, 4, 3), 255, np.uint8)
    mask_rgb = np.repeat(mask[:, :, None].astype(np.uint8) * 255, 3, axis=2)
    return np.concatenate([real_u8, gap, fake_u8, gap, mask_rgb], axis=1)


def cmd_detect(args, cfg: RunConfig, stage: Path) -> dict:
    gen, size = _load_generator(args.checkpoint)
    src = Path(args.input or "")
    files = [src] if src.is_file() else _pngs(src) if src.is_dir() else []
    if not files:
        raise DataError(f"no PNG tiles at {str(src)!r}")
    dcfg = cfg.detect_config()
    for path in files:
        img = load_png(path)
        if img.shape[:2] != (size, size):
            raise DataError(f"{path.name}: tile is {img.shape[1]}x{img.shape[0]}, generator expects {size}x{size}")
        res = detect(gen, to_unit(img), dcfg)
        fake = from_unit(res.fake)
        stem = path.stem
        save_png(stage / f"{stem}_fake.png", fake)
        save_pgm16(stage / f"{stem}_diff.pgm", res.diff)
        save_png(stage / f"{stem}_mask.png", res.mask)
        (stage / f"{stem}_blobs.json").write_text(json.dumps([b.to_dict() for b in res.blobs], indent=1) + "\n")
        save_png(stage / f"{stem}_panel.png", _panel(img, fake, res.mask))
    return {"checkpoint": _file_digest(Path(args.checkpoint)),
            "tiles": _tree_digest(files, files[0].parent)}


def cmd_eval(args, cfg: RunConfig, stage: Path) -> dict:
    gen, size = _load_generator(args.checkpoint)
    corpus = Path(args.corpus or cfg["data.corpus"] or "")
    if not (corpus / "manifest.jsonl").is_file():
        raise DataError(f"{str(corpus)!r} is not a synthetic corpus (manifest.jsonl missing)")
    head, records = read_corpus_manifest(corpus)
    tiles, files = [], []
    for r in records:
        if r["split"] not in ("testD", "testH"):
            continue
        img = load_png(corpus / r["file"])
        if img.shape[:2] != (size, size):
            raise DataError(f"{r['file']}: tile is {img.shape[1]}x{img.shape[0]}, generator expects {size}x{size}")
        truth = load_mask(corpus / r["truth"]) if r["truth"] else np.zeros(img.shape[:2], bool)
        tiles.append(LabeledTile(img, truth, r["kind"]))
        files.append(corpus / r["file"])
    if not tiles:
        raise DataError("corpus has an empty test split")
    m = eval_detection(tiles, gen, cfg.detect_config())
    metrics = {"mean_iou_damaged": m["mean_iou_damaged"], "healthy_fp_rate": m["healthy_fp_rate"],
               "n_tiles": m["n_tiles"], "n_damaged": m["n_damaged"], "n_healthy": m["n_healthy"],
               "config_digest": cfg.digest(), "corpus_digest": head["digest"], "per_tile": m["per_tile"]}
    (stage / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return {"checkpoint": _file_digest(Path(args.checkpoint)), "test_tiles": _tree_digest(files, corpus)}


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train,
            "detect": cmd_detect, "eval": cmd_eval}


# -- argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reverse-aging", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI run configuration")
        s.add_argument("--out", required=True, help="output directory (replaced atomically)")
        s.add_argument("--seed", type=int, help="override the seed this command uses")
        s.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
        if name == "prepare":
            s.add_argument("--input", help="image directory (overrides data.input)")
        if name in ("train", "eval"):
            s.add_argument("--corpus", help="dataset directory (overrides data.corpus)")
        if name == "train":
            s.add_argument("--resume", help="checkpoint to continue from")
            s.add_argument("--iterations", type=int, help="override train.iterations")
        if name in ("detect", "eval"):
            s.add_argument("--checkpoint", help="trained checkpoint (.agln)")
            s.add_argument("--eps-mode", choices=["absolute", "peak_fraction"])
            s.add_argument("--eps", type=float)
            s.add_argument("--min-area", type=int)
            s.add_argument("--octagon-r", type=int)
        if name == "detect":
            s.add_argument("--input", help="PNG tile or directory of tiles")
    return p


_SEED_KEY = {"synth": "synth.seed", "prepare": "data.seed", "train": "train.seed",
             "detect": None, "eval": None}


def apply_overrides(args, cfg: RunConfig) -> None:
    if args.seed is not None:
        key = _SEED_KEY[args.command]
        if key is None:
            raise ConfigError("seed", f"--seed has no effect on {args.command}")
        cfg.set(key, args.seed)
    for flag, key in (("iterations", "train.iterations"), ("eps_mode", "detect.eps_mode"),
                      ("eps", "detect.eps"), ("min_area", "detect.min_area"),
                      ("octagon_r", "detect.octagon_r")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, value)


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        cfg = parse_config(args.config)
        apply_overrides(args, cfg)
        started = _now()
        with staged_output(Path(args.out)) as stage:
            inputs = COMMANDS[args.command](args, cfg, stage)
            if args.config:
                inputs["config_file"] = _file_digest(Path(args.config))
            write_run_manifest(stage, args.command, cfg, inputs, started)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(DataError(f"{exc.filename or ''}: {exc.strerror or exc}").line(), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
