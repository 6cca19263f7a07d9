#!/usr/bin/env python3
"""Sample trend.py script: P, H, PH and PS under EW, three seeds each, then the percent-change report."""
import argparse
import logging
from pathlib import Path
from textwrap import dedent

from mtlpose import app


def main(work: Path, n: int = 200, epochs: int = 10) -> None:
    with app.Logger(app.default_logging_config):
        logger = logging.getLogger(__file__)
        work.mkdir(parents=True, exist_ok=True)
        dataset = work / "dataset"
        config = work / "trend.toml"
        config.write_text(dedent(f"""\
            [matrix]
            dataset = "{dataset.resolve().as_posix()}"
            tasks = ["P", "H", "PH", "PS"]
            strategies = ["ew"]
            seeds = [0, 1, 2]
            workers = 1

            [matrix.hyper]
            epochs = {epochs}
            """))

        options = argparse.Namespace(
            verbosity=logging.INFO,
            out=dataset, n=n, seed=1, size=64, d_min=1.0, d_max=25.0, fov_deg=35.0, sigma_px=None, workers=1,
            config=config, results=work / "matrix",
            baseline="P-ew", indirect_baseline="H-ew", markup="rst",
        )
        generate = app.GenerateAction()
        generate(options)
        logger.info(generate.summary())

        options.out = work / "matrix"
        trend = app.ActionSequence("matrix and report", [app.MatrixAction(), app.ReportAction()])
        trend(options)
        logger.info(trend.summary())


if __name__ == "__main__":
    main(Path("trend"))
