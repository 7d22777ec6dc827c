from .workload import WorkloadSpec, gen_workload, zipfian_pmf  # noqa: F401
from .experiment import (  # noqa: F401
    ExperimentConfig, ExperimentResult, emit_csv, parse_csv, run_experiment,
)
