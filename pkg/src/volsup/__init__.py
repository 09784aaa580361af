"""Pricing and superhedging under volatility uncertainty on finite scenario trees."""

from .claims import Claim, ClaimSpec, build_claim, eval_claim, shift_claim
from .dp_engine import (
    PdeGrid,
    ValueSurface,
    barenblatt_fd,
    brute_force_price,
    check_tower,
    esssup_form,
    lattice_price,
    node_sup,
    sublinear_expectation,
    supermartingale_check,
)
from .path_lattice import (
    DiscretePath,
    ScenarioTree,
    StoppingRule,
    TimeGrid,
    concat,
    hitting_rule,
    is_stopping_rule,
)
from .superhedge import (
    DoobMeyerParts,
    DualityReport,
    Hedge,
    admissibility_check,
    covariation_hedge,
    doob_meyer,
    duality_report,
    minimal_superhedge,
    verify_superhedge,
)
from .uncertainty import (
    ConstantRule,
    Family,
    Kernel,
    KernelFamily,
    LevelScaledRule,
    Policy,
    PolicyCapExceeded,
    ScenarioSet,
    VolBand,
    check_closure,
    condition_policy,
    enumerate_policies,
    measure_of,
    membership,
    paste,
    support_points,
)

__all__ = [name for name in dir() if not name.startswith("_")]
