"""
Desk-scale benchmark
====================

Runs BCL against rehearsal and plain sequential training on the synthetic
class-incremental stream described in ``desk.cfg``, then prints the table.
Every run leaves its trace, accuracy and config snapshot under ``results/``.

Same as ``saddle-cl run demos/desk.cfg``.
"""
import sys
from pathlib import Path

from saddle_cl.bench import load_config, run_experiment

here = Path(__file__).parent
cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else here / "desk.cfg")
table = run_experiment(cfg)
for entry in table.entries:
    print(f"{entry.method:16s} RA {entry.mean:.3f} +- {entry.std:.3f} over seeds {entry.seeds}")
print("artifacts in", Path(cfg.output_dir).resolve())
