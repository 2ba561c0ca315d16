"""
The whole pipeline from a config
================================

``run_experiment`` does what ``python -m xairefine run`` does: data,
baseline, reference, refinement, attack sweep, corruption grid, bounds, and
a lambda=0 control. Everything hangs off one master seed.
"""

import json

from xairefine import harness
from xairefine.config import config_from_dict

cfg = config_from_dict({"seed": 0, "certifier": {"n_points": 20}})
report = harness.run_experiment(cfg)
print(json.dumps(report["claims"], indent=2))
print("wall clock:", round(report["wall_clock"], 1), "s")
paths = harness.emit_report(report, "/tmp/xairefine_demo/report.json", "/tmp/xairefine_demo")
print(paths)
