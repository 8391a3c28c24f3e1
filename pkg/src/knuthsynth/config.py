"""Run configuration with JSON round-trip and named presets."""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .dpll import SUBSOLVER_ENV, SubsolverHandle
from .errors import ContractViolation

MODELS = ("uniform", "jw", "table")


@dataclass
class RunConfig:
    ell: int = 4
    k: int = 1000
    c_puct: float = 0.5
    commit_mix: float = 0.5
    t: float = 0.5
    subsolver: dict = field(default_factory=lambda: {"kind": "internal_policy", "policy": "jw"})
    model: str = "uniform"
    model_path: Optional[str] = None
    seed: int = 0
    dag: bool = True
    pure_literals: bool = True
    use_value_model: bool = True
    requery_prior: bool = True
    calibration_decay: Optional[float] = None
    output_dir: str = "runs"
    examples_path: Optional[str] = None
    trace_path: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.ell < 0:
            raise ContractViolation("ell must be >= 0")
        if self.k < 1:
            raise ContractViolation("k must be >= 1")
        if self.c_puct < 0:
            raise ContractViolation("c_puct must be >= 0")
        if not 0 <= self.commit_mix <= 1:
            raise ContractViolation("commit_mix must lie in [0, 1]")
        if self.t <= 0:
            raise ContractViolation("t must be > 0")
        if self.model not in MODELS:
            raise ContractViolation("model must be one of %s" % (MODELS,))
        if self.calibration_decay is not None and not 0 <= self.calibration_decay < 1:
            raise ContractViolation("calibration_decay must lie in [0, 1)")

    def subsolver_handle(self, env=None) -> SubsolverHandle:
        """Handle for the configured subsolver; the environment variable overrides the executable."""
        env = os.environ if env is None else env
        d = dict(self.subsolver)
        override = env.get(SUBSOLVER_ENV)
        if override:
            d["kind"] = "external_process"
            d["executable"] = override
        return SubsolverHandle.from_dict(d)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation("unknown config keys: %s" % sorted(unknown))
        return cls(**data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)


PRESETS = {
    "desk": RunConfig(),
    # rollout budget and depths used for the full-scale runs
    "paper-ell5": RunConfig(ell=5, k=100000),
    "paper-ell6": RunConfig(ell=6, k=100000),
    "paper-ell8": RunConfig(ell=8, k=100000),
}


def preset(name) -> RunConfig:
    try:
        return PRESETS[name].replace()
    except KeyError:
        raise ContractViolation("unknown preset %r (have %s)" % (name, sorted(PRESETS))) from None
