"""Run configuration: scenario, algorithm hyperparameters and campaign size.

Config files are YAML with three optional sections::

    scenario:    # any ScenarioConfig field
      sigma_v2_dbm: -106
    algorithms:  # any AlgorithmConfig field
      damping: 0.7
    campaign:    # any CampaignConfig field
      setups: 10

Unknown keys are rejected.  `DEFAULT_CONFIG_TEXT` lists every key with
its default.
"""

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from gfcf.exceptions import ContractViolation
from gfcf.scenario import ScenarioConfig

ALGORITHMS = ("pp-vb-ep", "vlep-only", "pilot-mmse", "pilot-mmse-genie")


@dataclass(frozen=True)
class AlgorithmConfig:
    activity_max_passes: int = 20
    vlep_max_iter: int = 50
    vlep_tol: float = 1e-4
    vlep_damping: float = 1.0
    vbep_max_sweeps: int = 30
    vbep_tol: float = 1e-4
    vbep_damping: float = 0.7
    vbep_keep_best: bool = True
    genie_activity: bool = False

    def __post_init__(self):
        if not 0.0 < self.vbep_damping <= 1.0 or not 0.0 < self.vlep_damping <= 1.0:
            raise ContractViolation("damping must lie in (0, 1]")
        if min(self.activity_max_passes, self.vlep_max_iter, self.vbep_max_sweeps) < 1:
            raise ContractViolation("iteration caps must be positive")


@dataclass(frozen=True)
class CampaignConfig:
    seed: int = 0
    setups: int = 50
    trials: int = 50
    algos: tuple = ("pp-vb-ep",)
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "algos", tuple(self.algos))
        bad = [a for a in self.algos if a not in ALGORITHMS]
        if bad:
            raise ContractViolation(f"unknown algorithm(s) {bad}; choose from {ALGORITHMS}")
        if self.setups < 1 or self.trials < 1 or self.threads < 1:
            raise ContractViolation("setups, trials and threads must be positive")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algorithms: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)

    def to_dict(self):
        out = asdict(self)
        out["campaign"]["algos"] = list(self.campaign.algos)
        return out

    def with_overrides(self, **campaign):
        changes = {k: v for k, v in campaign.items() if v is not None}
        return replace(self, campaign=replace(self.campaign, **changes))


def _build(cls, data, section):
    data = data or {}
    if not isinstance(data, dict):
        raise ContractViolation(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data):
    data = data or {}
    unknown = set(data) - {"scenario", "algorithms", "campaign"}
    if unknown:
        raise ContractViolation(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(
        scenario=_build(ScenarioConfig, data.get("scenario"), "scenario"),
        algorithms=_build(AlgorithmConfig, data.get("algorithms"), "algorithms"),
        campaign=_build(CampaignConfig, data.get("campaign"), "campaign"),
    )


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh))


DEFAULT_CONFIG_TEXT = """\
scenario:
  area_side: 400.0        # side of the square deployment area, m
  n_aps: 16               # access points on a square grid, corners included
  n_antennas: 2           # antennas per AP
  n_users: 16             # potential users
  pilot_length: 8         # pilot symbols per frame
  data_length: 20         # data symbols per frame
  sigma_x2_dbm: 14.0      # transmit power per symbol, dBm
  sigma_v2_dbm: -96.0     # receiver noise power, dBm (-.inf for noiseless)
  ap_height: 10.0         # AP height above the user plane, m
  pathloss_const: -30.5   # large-scale gain at 1 m, dB
  pathloss_slope: 36.7    # dB per decade of distance
  modulation: 4qam        # bpsk | 4qam | qpsk | 16qam
  activity_prob: 0.5      # probability a user is active in a frame
  users_per_pilot: 2      # users sharing each pilot sequence
  rng_seed: 0             # unused by campaigns (see campaign.seed)
algorithms:
  activity_max_passes: 20 # coordinate-ascent passes over the users
  vlep_max_iter: 50       # VL-EP iteration cap
  vlep_tol: 1.0e-4        # VL-EP relative channel-mean change to stop
  vlep_damping: 1.0       # VL-EP damping (1 = none)
  vbep_max_sweeps: 30     # VB-EP sweep cap
  vbep_tol: 1.0e-4        # VB-EP belief movement (channel means, decision probabilities) to stop
  vbep_damping: 0.7       # weight of new messages (1 = undamped)
  vbep_keep_best: true    # keep the sweep with the smallest data residual, stop on divergence
  genie_activity: false   # feed true activity to pp-vb-ep and vlep-only
campaign:
  seed: 0                 # master seed
  setups: 50              # user position setups
  trials: 50              # channel/noise/activity/data draws per setup
  algos: [pp-vb-ep]       # any of pp-vb-ep, vlep-only, pilot-mmse, pilot-mmse-genie
  threads: 1              # worker threads
"""
