from .compare import ShapeMismatch, compare, pct_delta
from .report import dumps, load_report, write_report
from .runner import run
from .scenario import Scenario, ScenarioError, bundled, from_dict, load
