"""The ``mtlpose`` command line: generate, train, evaluate, matrix, report, prune, predict.

Each subcommand is an :class:`Action`; :class:`ActionSequence` composes them,
the way ``src/trend.py`` chains a matrix run with its report.
"""
from __future__ import annotations

import argparse
from dataclasses import replace
import logging
import logging.config
from pathlib import Path
import sys
import time
from typing import Any, Literal

if sys.version_info[:2] <= (3, 10):
    import tomli as toml
else:
    import tomllib as toml

from . import __version__
from .balancer import STRATEGIES, BalancerConfig
from .dataset import SynthConfig, generate_dataset, load_dataset
from .errors import Error
from .harness import (
    ExperimentSpec, Hyperparameters, MatrixConfig, evaluate, predict, report, run_matrix, train, write_json,
)
from .network import TaskSet, load_checkpoint, save_checkpoint, strip_auxiliary_heads


class Action:
    """An action performed by mtlpose."""
    start: float
    options: argparse.Namespace

    def __init__(self, name: str) -> None:
        self.name = name
        self.logger = logging.getLogger(self.__class__.__qualname__)

    def __str__(self) -> str:
        return self.name

    def __call__(self, options: argparse.Namespace) -> None:
        self.logger.info("Starting %s", self.name)
        self.options = options
        self.start = time.process_time()

    def duration(self) -> float:
        return (self.start and time.process_time() - self.start) or 0

    def summary(self) -> str:
        return f"{self.name!s} in {self.duration():0.3f} sec."


class ActionSequence(Action):
    """An action composed of a sequence of other actions."""
    def __init__(self, name: str, opSequence: list[Action] | None = None) -> None:
        super().__init__(name)
        self.opSequence = opSequence or []

    def __str__(self) -> str:
        return "; ".join(str(x) for x in self.opSequence)

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        for o in self.opSequence:
            o(self.options)

    def summary(self) -> str:
        return ", ".join(o.summary() for o in self.opSequence)


class GenerateAction(Action):
    """Render a synthetic dataset."""
    def __init__(self) -> None:
        super().__init__("Generate")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        config = SynthConfig(
            n=options.n, seed=options.seed, size=options.size, d_min=options.d_min, d_max=options.d_max,
            fov_deg=options.fov_deg, sigma_px=options.sigma_px, workers=options.workers,
        )
        try:
            self.options.manifest = generate_dataset(config, options.out)
        except Error:
            self.logger.error("Problems generating %r, no dataset written.", str(options.out))
            raise

    def summary(self) -> str:
        manifest = getattr(self.options, "manifest", None)
        if manifest is None:
            return f"did not {self.name}"
        return f"{self.name} {manifest.n} samples {manifest.counts} in {self.duration():0.3f} sec."


def _hyper(options: argparse.Namespace) -> Hyperparameters:
    return Hyperparameters(epochs=options.epochs, batch_size=options.batch_size, lr=options.lr, tau=options.tau)


def _balancer(options: argparse.Namespace) -> BalancerConfig:
    return BalancerConfig(temperature=options.temperature, alpha=options.alpha, lr_w=options.lr_w)


class TrainAction(Action):
    """Train one task set with one weighting strategy."""
    def __init__(self) -> None:
        super().__init__("Train")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        try:
            spec = ExperimentSpec(
                TaskSet.parse(options.tasks), options.strategy, options.seed, options.dataset,
                _hyper(options), _balancer(options),
            )
            self.options.checkpoint, self.options.result = train(spec, options.out)
        except Error:
            self.logger.error("Problems training %s on %r.", options.tasks, str(options.dataset))
            raise

    def summary(self) -> str:
        result = getattr(self.options, "result", None)
        if result is None:
            return f"did not {self.name}"
        scores = ", ".join(f"{p} {r.median:.4f}" for p in ("direct", "indirect") if (r := result.path(p)) is not None)
        return f"{self.name} {result.cell} ({scores or 'no test split'}) in {self.duration():0.3f} sec."


class EvaluateAction(Action):
    """Score a checkpoint on a dataset split."""
    def __init__(self) -> None:
        super().__init__("Evaluate")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        try:
            checkpoint = load_checkpoint(options.ckpt)
            dataset = load_dataset(options.dataset)
            self.options.result = evaluate(checkpoint, dataset, options.split, options.paths, options.tau)
            write_json(options.out, self.options.result.as_dict())
        except Error:
            self.logger.error("Problems evaluating %r on %r.", str(options.ckpt), str(options.dataset))
            raise


class MatrixAction(Action):
    """Run every cell of an experiment matrix."""
    def __init__(self) -> None:
        super().__init__("Matrix")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        config = MatrixConfig.from_toml(options.config)
        if getattr(options, "matrix_workers", None) is not None:
            config = replace(config, workers=options.matrix_workers)
        self.options.matrix = run_matrix(config, options.out)
        self.options.results = options.out

    def summary(self) -> str:
        matrix = getattr(self.options, "matrix", None)
        if matrix is None:
            return f"did not {self.name}"
        return f"{self.name} {len(matrix.results)} runs, {len(matrix.failures)} failures in {self.duration():0.3f} sec."


class ReportAction(Action):
    """Tabulate percent change against the baseline cells."""
    def __init__(self) -> None:
        super().__init__("Report")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        target = getattr(options, "report_out", None) or options.results
        try:
            self.options.report = report(
                Path(options.results), target, options.baseline, options.indirect_baseline, options.markup,
            )
        except Error:
            self.logger.error("Problems reporting on %r.", str(options.results))
            raise


class PruneAction(Action):
    """Drop auxiliary heads from a checkpoint."""
    def __init__(self) -> None:
        super().__init__("Prune")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        pruned = strip_auxiliary_heads(load_checkpoint(options.ckpt), TaskSet.parse(options.keep))
        save_checkpoint(options.out, pruned)


class PredictAction(Action):
    """Write every head's prediction for one sample."""
    def __init__(self) -> None:
        super().__init__("Predict")

    def __call__(self, options: argparse.Namespace) -> None:
        super().__call__(options)
        self.options.prediction = predict(
            load_checkpoint(options.ckpt), load_dataset(options.dataset), options.index, options.out,
            options.split, options.tau,
        )


class Application:
    def __init__(self, base_config: dict[str, Any] | None = None) -> None:
        self.logger = logging.getLogger(self.__class__.__qualname__)
        synth, hyper, balance = SynthConfig(), Hyperparameters(), BalancerConfig()
        self.defaults = argparse.Namespace(
            verbosity=logging.INFO,
            n=synth.n, seed=synth.seed, size=synth.size, d_min=synth.d_min, d_max=synth.d_max,
            fov_deg=synth.fov_deg, sigma_px=synth.sigma_px, workers=synth.workers,
            tasks="PHBS", strategy="ew",
            epochs=hyper.epochs, batch_size=hyper.batch_size, lr=hyper.lr, tau=hyper.tau,
            temperature=balance.temperature, alpha=balance.alpha, lr_w=balance.lr_w,
            split="test", paths=None, markup="rst", baseline="P-ew", indirect_baseline="H-ew",
        )
        for key, value in (base_config or {}).items():
            if not hasattr(self.defaults, key):
                self.logger.warning("Ignoring unknown [mtlpose] setting %r", key)
                continue
            setattr(self.defaults, key, value)

        self.generateOp = GenerateAction()
        self.trainOp = TrainAction()
        self.evaluateOp = EvaluateAction()
        self.matrixOp = MatrixAction()
        self.reportOp = ReportAction()
        self.pruneOp = PruneAction()
        self.predictOp = PredictAction()
        self.actions: dict[str, Action] = {
            "generate": self.generateOp, "train": self.trainOp, "evaluate": self.evaluateOp,
            "matrix": self.matrixOp, "report": self.reportOp, "prune": self.pruneOp, "predict": self.predictOp,
        }

    def parseArgs(self, argv: list[str]) -> argparse.Namespace:
        p = argparse.ArgumentParser(prog="mtlpose")
        p.add_argument("-v", "--verbose", dest="verbosity", action="store_const", const=logging.INFO)
        p.add_argument("-s", "--silent", dest="verbosity", action="store_const", const=logging.WARN)
        p.add_argument("-d", "--debug", dest="verbosity", action="store_const", const=logging.DEBUG)
        p.add_argument("-V", "--Version", action="version", version=f"mtl-pose-bench {__version__}")
        commands = p.add_subparsers(dest="command", required=True)

        g = commands.add_parser("generate", help="render a synthetic dataset")
        g.add_argument("--out", type=Path, required=True)
        g.add_argument("--n", type=int)
        g.add_argument("--seed", type=int)
        g.add_argument("--size", type=int)
        g.add_argument("--d-min", dest="d_min", type=float)
        g.add_argument("--d-max", dest="d_max", type=float)
        g.add_argument("--fov", dest="fov_deg", type=float)
        g.add_argument("--sigma", dest="sigma_px", type=float)
        g.add_argument("--workers", type=int)

        t = commands.add_parser("train", help="train one task set")
        t.add_argument("--dataset", type=Path, required=True)
        t.add_argument("--out", type=Path, required=True)
        t.add_argument("--tasks")
        t.add_argument("--strategy", choices=STRATEGIES, type=str.lower)
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--bs", dest="batch_size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--tau", type=float)

        e = commands.add_parser("evaluate", help="score a checkpoint")
        e.add_argument("--ckpt", type=Path, required=True)
        e.add_argument("--dataset", type=Path, required=True)
        e.add_argument("--out", type=Path, required=True)
        e.add_argument("--split", choices=("train", "val", "test"))
        e.add_argument("--path", dest="paths", action="append", choices=("direct", "indirect"))
        e.add_argument("--tau", type=float)

        m = commands.add_parser("matrix", help="run an experiment matrix")
        m.add_argument("--config", type=Path, required=True)
        m.add_argument("--out", type=Path, required=True)
        m.add_argument("--workers", dest="matrix_workers", type=int)

        r = commands.add_parser("report", help="tabulate a matrix directory")
        r.add_argument("--results", type=Path, required=True)
        r.add_argument("--out", dest="report_out", type=Path)
        r.add_argument("--baseline")
        r.add_argument("--indirect-baseline", dest="indirect_baseline")
        r.add_argument("--markup", choices=("rst", "html"))

        pr = commands.add_parser("prune", help="drop auxiliary heads from a checkpoint")
        pr.add_argument("--ckpt", type=Path, required=True)
        pr.add_argument("--keep", required=True)
        pr.add_argument("--out", type=Path, required=True)

        pd = commands.add_parser("predict", help="predict one sample with every head")
        pd.add_argument("--ckpt", type=Path, required=True)
        pd.add_argument("--dataset", type=Path, required=True)
        pd.add_argument("--index", type=int, required=True)
        pd.add_argument("--out", type=Path, required=True)
        pd.add_argument("--split", choices=("train", "val", "test"))
        pd.add_argument("--tau", type=float)

        config = p.parse_args(argv)
        # Options a subcommand leaves unset fall back to the defaults.
        for key, value in vars(self.defaults).items():
            if getattr(config, key, None) is None:
                setattr(config, key, value)
        return config

    def process(self, config: argparse.Namespace) -> None:
        root = logging.getLogger()
        root.setLevel(config.verbosity)
        self.logger.debug("Setting root log level to %r", logging.getLevelName(root.getEffectiveLevel()))
        action = self.actions[config.command]
        self.logger.info("%s %s", action.name, __version__)
        action(config)
        self.logger.info(action.summary())


class Logger:
    def __init__(self, dict_config: dict[str, Any] | None = None, **kw_config: Any) -> None:
        self.dict_config = dict_config
        self.kw_config = kw_config

    def __enter__(self) -> "Logger":
        if self.dict_config:
            logging.config.dictConfig(self.dict_config)
        else:
            logging.basicConfig(**self.kw_config)
        return self

    def __exit__(self, *args: Any) -> Literal[False]:
        logging.shutdown()
        return False


default_logging_config = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
            "formatter": "basic",
        },
    },
    "formatters": {
        "basic": {
            "format": "{levelname}:{name}:{message}",
            "style": "{",
        }
    },
    "root": {"handlers": ["console"], "level": logging.INFO},
    "loggers": {
        "Scene": {"level": logging.INFO},
        "Dataset": {"level": logging.INFO},
        "PnP": {"level": logging.INFO},
        "Balancer": {"level": logging.INFO},
        "Harness": {"level": logging.INFO},
        "Network": {"level": logging.INFO},
        "Autodiff": {"level": logging.INFO},
        "Application": {"level": logging.INFO},
    },
}


def load_config(paths: tuple[Path, ...] = (Path("mtlpose.toml"), Path.home() / "mtlpose.toml")) -> dict[str, Any]:
    """The first ``mtlpose.toml`` found, or an empty config."""
    for cp in paths:
        if cp.exists():
            with cp.open("rb") as config_file:
                return toml.load(config_file)
    return {}


def main(argv: list[str] = sys.argv[1:], base_config: dict[str, Any] | None = None) -> None:
    a = Application(base_config)
    config = a.parseArgs(argv)
    a.process(config)


def cli() -> None:
    base_config = load_config()
    log_config = base_config.get("logging", default_logging_config)
    with Logger(log_config):
        try:
            main(sys.argv[1:], base_config=base_config.get("mtlpose", {}))
        except Error as ex:
            logging.getLogger("Application").error("%s: %s", ex.__class__.__name__, ex)
            raise SystemExit(1) from ex
