from functools import lru_cache

from core import GaussianBelief
from .base_rule import RuleKind, RuleSpec, SigmaRule, WeightedPointSet
from .unscented_rule import UnscentedRule
from .cubature3_rule import ThirdDegreeCubatureRule
from .cubature5_rule import FifthDegreeCubatureRule


@lru_cache(maxsize=256)
def create_rule(spec: RuleSpec) -> SigmaRule:
    """Creates and returns the point-set rule for a spec. Rules are immutable, so instances are shared."""
    rules = {
        RuleKind.UT: lambda: UnscentedRule(spec),
        RuleKind.CKF3: lambda: ThirdDegreeCubatureRule(spec),
        RuleKind.CKF5: lambda: FifthDegreeCubatureRule(spec),
    }
    if spec.kind not in rules:
        raise ValueError(f"Invalid rule kind: {spec.kind}")
    return rules[spec.kind]()


def generate(spec: RuleSpec, belief: GaussianBelief) -> WeightedPointSet:
    return create_rule(spec).generate(belief)


def stability_measure(spec: RuleSpec) -> float:
    return create_rule(spec).stability_measure()
