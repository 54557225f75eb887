"""Desk-scale predictive VM provisioning lab: a co-simulated digital twin,
an imitation-learned provisioner, and comparator policies.
"""

from .domain import (DemandVector, Host, ProvisionDelay, VmCatalog, VmType,
                     Workload, default_catalog, load_catalog, load_traces)
from .sched import ProvisioningDecision, Schedule, schedule
from .cosim import QoSReport, SimConfig, SimState, new_state, step, what_if
from .model import ActionFeature, CilpModel, ModelConfig, ScheduleGraph
from .provision import (CilpProvisioner, OracleProvisioner, Provisioner,
                        ReactiveProvisioner, cilp_decide, oracle_decide,
                        reactive_threshold_decide)
from .train import TrainConfig, TrainingRow, fit, generate_dataset

__version__ = "0.1.0"
