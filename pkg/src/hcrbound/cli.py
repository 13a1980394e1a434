"""Command-line entry point: ``hcrbound {train,eval,bound,crbound,viz}``.

Settings come from a ``key = value`` config file (``--config``) overridden by
flags.  Every command is a pure function of its settings and input files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import Normalization, load_images, load_labels
from .dct import lowpass_mask
from .hcr import GaussianIid, BoundReport, cramer_rao_bounds, per_mode_bounds
from .nn import Model, load_weights, mnist_mlp, save_weights
from .report import histogram, rademacher_visualize, write_image
from .tensor import stream_for
from .train import TrainConfig, evaluate_accuracy, train

log = logging.getLogger("hcrbound")

PURPOSE_VIZ = 3

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    normalization: str = "mnist"
    mnist_mean: float = 0.1037
    mnist_std: float = 0.3081
    sigma: float = 1.0
    size: float = 1 / 200
    trials: int = 25
    repetitions: int = 10
    seed: int = 0
    out: str = "out"
    weights: str = ""
    range: str = "0..0"
    lowpass: int = 8
    jobs: int = 1
    bins: int = 50
    index: int = 0
    coords: str = "all"
    viz_sizes: str = "0.001,0.005"
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.normalization not in ("mnist", "signed"):
            raise UsageError(f"normalization must be 'mnist' or 'signed', not {self.normalization!r}")
        for name in ("sigma", "size"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        for name in ("trials", "repetitions", "lowpass", "jobs", "bins", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be a positive integer")

    def path(self, key: str) -> Path:
        explicit = getattr(self, key)
        return Path(explicit) if explicit else Path(self.data_dir) / MNIST_FILES[key]

    @property
    def weights_path(self) -> Path:
        return Path(self.weights) if self.weights else Path(self.out) / "weights.hcrw"

    @property
    def norm(self) -> Normalization:
        return Normalization(self.normalization, self.mnist_mean, self.mnist_std)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def example_range(self, count: int) -> range:
        try:
            a, b = (int(part) for part in self.range.split(".."))
        except ValueError:
            raise UsageError(f"range must look like A..B, got {self.range!r}") from None
        if not 0 <= a <= b < count:
            raise UsageError(f"range {a}..{b} outside the {count} available examples")
        return range(a, b + 1)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_config(file_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    kwargs = {}
    for key, raw in {**file_values, **overrides}.items():
        if key not in types:
            raise UsageError(f"unknown setting {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = _parse_float(raw)
            else:
                kwargs[key] = str(raw)
        except ValueError:
            raise UsageError(f"bad value for {key}: {raw!r}") from None
    return RunConfig(**kwargs)


def _parse_float(raw) -> float:
    if isinstance(raw, str) and "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


# --------------------------------------------------------------------------
# commands


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _test_set(cfg: RunConfig, labels: bool = True):
    images = load_images(_require(cfg.path("test_images"), "test images"), cfg.norm)
    if not labels:
        return images, None
    return images, load_labels(_require(cfg.path("test_labels"), "test labels"))


def _load_model(cfg: RunConfig) -> Model:
    return load_weights(_require(cfg.weights_path, "weight file"))


def _accuracies(cfg: RunConfig, model: Model, images, labels) -> dict[str, float]:
    return {
        "undithered": evaluate_accuracy(model, images, labels),
        "dithered": evaluate_accuracy(model, images, labels, GaussianIid(cfg.sigma), seed=cfg.seed),
    }


def cmd_train(cfg: RunConfig) -> dict[str, float]:
    train_images = load_images(_require(cfg.path("train_images"), "training images"), cfg.norm)
    train_labels = load_labels(_require(cfg.path("train_labels"), "training labels"))
    test_images, test_labels = _test_set(cfg)
    model = mnist_mlp(stream_for(cfg.seed, 0, purpose=5))
    history = train(model, train_images, train_labels, cfg.train_config)
    cfg.weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, cfg.weights_path)
    acc = _accuracies(cfg, model, test_images, test_labels)
    print(f"wrote {cfg.weights_path}")
    print(f"final epoch loss: {history[-1]:.6f}")
    print(f"test accuracy without dithering: {acc['undithered']:.4f}")
    print(f"test accuracy with dithering (sigma={cfg.sigma:g}): {acc['dithered']:.4f}")
    return acc


def cmd_eval(cfg: RunConfig) -> dict[str, float]:
    model = _load_model(cfg)
    images, labels = _test_set(cfg)
    acc = _accuracies(cfg, model, images, labels)
    print(f"test accuracy without dithering: {acc['undithered']:.4f}")
    print(f"test accuracy with dithering (sigma={cfg.sigma:g}): {acc['dithered']:.4f}")
    return acc


_WORKER: dict = {}


def _init_worker(weights: str):
    _WORKER["model"] = load_weights(weights)


def _bound_task(args) -> BoundReport:
    theta, cfg, example = args
    model = _WORKER.get("model") or load_weights(cfg.weights_path)
    return example_bounds(model, theta, cfg, example)


def example_bounds(model: Model, theta: np.ndarray, cfg: RunConfig, example: int) -> BoundReport:
    return per_mode_bounds(
        model.features,
        theta,
        sigma=cfg.sigma,
        size=cfg.size,
        trials=cfg.trials,
        repetitions=cfg.repetitions,
        seed=cfg.seed,
        example=example,
        basis="dct",
    )


def _map_examples(cfg: RunConfig, model: Model, images, examples):
    tasks = [(images[e], cfg, e) for e in examples]
    if cfg.jobs == 1 or len(tasks) == 1:
        return [example_bounds(model, images[e], cfg, e) for e in examples]
    with ProcessPoolExecutor(
        cfg.jobs, initializer=_init_worker, initargs=(str(cfg.weights_path),)
    ) as pool:
        return list(pool.map(_bound_task, tasks, chunksize=1))


BOUND_HEADER = ("example",) + BoundReport.CSV_HEADER


def cmd_bound(cfg: RunConfig) -> dict[str, object]:
    """Per-mode DCT bounds for a range of test examples, plus histograms."""
    model = _load_model(cfg)
    images, _ = _test_set(cfg, labels=False)
    examples = cfg.example_range(len(images))
    reports = _map_examples(cfg, model, images, examples)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = reports[0].std_lower_bounds.shape
    keep = np.broadcast_to(lowpass_mask(shape[-2], shape[-1], cfg.lowpass), shape).ravel()
    full_rows, low_rows, full_vals, low_vals = [], [], [], []
    saturated = 0
    for example, report in zip(examples, reports):
        saturated += report.saturated
        flat = report.std_lower_bounds.ravel()
        rows = report.csv_rows()
        full_rows += [(example,) + row for row in rows]
        low_rows += [(example,) + row for row, k in zip(rows, keep) if k]
        full_vals.append(flat)
        low_vals.append(flat[keep])

    paths = {
        "bounds": out / "bounds.csv",
        "bounds_lowpass": out / f"bounds_lowpass{cfg.lowpass}.csv",
        "hist_full": out / "hist_full.csv",
        "hist_lowpass": out / f"hist_lowpass{cfg.lowpass}.csv",
    }
    for key, rows in (("bounds", full_rows), ("bounds_lowpass", low_rows)):
        with open(paths[key], "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(BOUND_HEADER)
            writer.writerows(rows)
    full_vals, low_vals = np.concatenate(full_vals), np.concatenate(low_vals)
    histogram(full_vals, cfg.bins).to_csv(paths["hist_full"])
    histogram(low_vals, cfg.bins).to_csv(paths["hist_lowpass"])

    medians = {"full": float(np.median(full_vals)), "lowpass": float(np.median(low_vals))}
    print(f"examples {examples.start}..{examples.stop - 1}, s={cfg.size:g}, sigma={cfg.sigma:g}")
    print(f"median bound, all modes: {medians['full']:.6g}")
    print(f"median bound, {cfg.lowpass}x{cfg.lowpass} lowest modes: {medians['lowpass']:.6g}")
    if saturated:
        print(f"{saturated} saturated trials excluded")
    return {"paths": paths, "reports": reports, "medians": medians}


def _coordinates(cfg: RunConfig, p: int) -> list[int]:
    if cfg.coords.strip() == "all":
        return list(range(p))
    try:
        coords = [int(c) for c in cfg.coords.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"coords must be 'all' or a comma list, got {cfg.coords!r}") from None
    bad = [c for c in coords if not 0 <= c < p]
    if bad:
        raise UsageError(f"coordinates {bad} outside [0, {p})")
    return coords


def _example(images, index: int):
    if not 0 <= index < len(images):
        raise UsageError(f"example index {index} outside the {len(images)} available")
    return images[index]


def cmd_crbound(cfg: RunConfig) -> Path:
    model = _load_model(cfg)
    images, _ = _test_set(cfg, labels=False)
    theta = _example(images, cfg.index)
    coords = _coordinates(cfg, model.input_size)
    bounds = cramer_rao_bounds(model.features, theta, cfg.sigma, coords)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"crbound_{cfg.index}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("example", "index", "variance_bound", "sigma"))
        for k, b in zip(coords, bounds):
            writer.writerow((cfg.index, k, repr(float(b)), repr(cfg.sigma)))
    print(f"wrote {path}")
    return path


def cmd_viz(cfg: RunConfig) -> list[Path]:
    model = _load_model(cfg)
    images, _ = _test_set(cfg, labels=False)
    theta = _example(images, cfg.index)
    sizes = [_parse_float(s) for s in cfg.viz_sizes.split(",") if s.strip()]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if theta.shape[0] == 1 else "ppm"
    paths = [out / f"example{cfg.index}_unperturbed.{ext}"]
    write_image(np.clip(cfg.norm.to_unit(theta), 0.0, 1.0), paths[0])
    signs = stream_for(cfg.seed, cfg.index, purpose=PURPOSE_VIZ)
    for size in sizes:
        report = example_bounds(model, theta, dataclasses.replace(cfg, size=size), cfg.index)
        image = rademacher_visualize(theta, report.std_lower_bounds, signs, cfg.norm.to_unit)
        paths.append(out / f"example{cfg.index}_s{size:g}.{ext}")
        write_image(image, paths[-1])
    for path in paths:
        print(f"wrote {path}")
    return paths


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bound": cmd_bound,
    "crbound": cmd_crbound,
    "viz": cmd_viz,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcrbound", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("--weights")
    parser.add_argument("--sigma", type=float, help="std of the dithering noise")
    parser.add_argument("--size", help="perturbation size s, e.g. 0.005 or 1/200")
    parser.add_argument("--trials", type=int)
    parser.add_argument("--reps", dest="repetitions", type=int, help="LSQR repetitions i")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--range", help="inclusive example range A..B")
    parser.add_argument("--lowpass", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--out")
    parser.add_argument("--data-dir", dest="data_dir")
    parser.add_argument("--index", type=int, help="example index for crbound/viz")
    parser.add_argument("--coords", help="'all' or comma-separated input coordinates")
    parser.add_argument("--bins", type=int)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        file_values = parse_config_text(_require(Path(args.config), "config file").read_text())
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    skip = {"command", "config", "set", "verbose"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            overrides[key] = value
    return build_config(file_values, overrides)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except (UsageError, ValueError, OSError) as exc:
        print(f"hcrbound {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
