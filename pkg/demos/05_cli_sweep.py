"""
Scaling sweeps from the command line
====================================

Write a JSON config, run a constant-local-batch sweep over 1, 2 and 4
workers through the CLI entry point, then print the metrics table.
"""

import tempfile
from pathlib import Path

from ablab import cli
from ablab.config import AbHyperparams, OptimizerConfig, RunConfig, RunMode

work = Path(tempfile.mkdtemp(prefix="ablab_demo_"))
cfg = RunConfig(
    mode=RunMode.AB_GROUPS,
    world_size=2,
    num_groups=2,
    local_batch_size=32,
    optimizer=OptimizerConfig(lr=3e-3, weight_decay=0.5),
    ab=AbHyperparams(total_training_steps=800, sigma_cutoff=0.1),
    eval_interval=50,
)
config_path = work / "config.json"
config_path.write_text(cfg.to_json())

# Equivalent shell: ablab sweep --config config.json --nodes 2,4 --scaling local --out sweep
code = cli.main(["sweep", "--config", str(config_path), "--nodes", "2,4", "--scaling", "local",
                 "--out", str(work / "sweep")])
print("exit code", code)
print(sorted(p.name for p in (work / "sweep").iterdir()))

# A single run with CLI overrides, then the report subcommand
cli.main(["run", "--config", str(config_path), "--mode", "TradDDP", "--num-groups", "1",
          "--out", str(work / "ddp")])
cli.main(["report", "--in", str(work / "ddp")])
print("outputs under", work)
