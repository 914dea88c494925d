"""Risk categories shared by every layer."""
from __future__ import annotations

from enum import Enum


class RiskType(str, Enum):
    MARKET_CRASH = "market_crash"
    LIQUIDITY = "liquidity"
    OPERATIONAL = "operational"
    # not one of the reported categories; keeps the multi-label head non-trivial
    VOLATILITY = "volatility"


RISK_TYPES: tuple[RiskType, ...] = tuple(RiskType)
N_RISK_TYPES = len(RISK_TYPES)


def parse_risk_type(name: str) -> RiskType:
    try:
        return RiskType(name)
    except ValueError:
        valid = ", ".join(r.value for r in RISK_TYPES)
        raise ValueError(f"unknown risk type {name!r} (expected one of {valid})") from None
