"""Shipped parameter profiles and network configs.

Two fidelity profiles sized for the full networks (lenet5, resnet19) and a
small fast profile (test) that property suites and CI use.  The fidelity
profiles pin ring degree, slot count, multiplicative depth, and scaling
factor; the remaining modulus widths are implementation choices.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .ckks import CkksParams
from .errors import ValidationError
from .model_io import NetworkSpec, parse_network

PROFILES: dict[str, CkksParams] = {
    "test": CkksParams(n=4096, depth=9, scale_bits=40, q0_bits=50,
                       special_bits=59),
    "lenet5": CkksParams(n=16384, depth=12, scale_bits=56, q0_bits=58,
                         special_bits=59),
    "resnet19": CkksParams(n=32768, depth=12, scale_bits=56, q0_bits=58,
                           special_bits=59),
}

# short names for the shipped network configs
NETWORK_ALIASES = {
    "lenet5": "lenet5-mnist",
    "resnet19": "resnet19-cifar10",
}

SHIPPED_NETWORKS = (
    "lenet5-mnist",
    "lenet5-nmnist",
    "resnet19-cifar10",
    "resnet19-dvs",
)


def get_profile(name: str) -> CkksParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValidationError(
            f"unknown profile {name!r}; available: {sorted(PROFILES)}"
        ) from None


def load_network(name_or_path: str) -> NetworkSpec:
    """A shipped config by name (aliases allowed) or a JSON file by path."""
    name = NETWORK_ALIASES.get(name_or_path, name_or_path)
    if name in SHIPPED_NETWORKS:
        text = (resources.files("cipherspike") / "netconfigs" /
                f"{name}.json").read_text()
        return parse_network(text)
    p = Path(name_or_path)
    if p.exists():
        return parse_network(p.read_text())
    raise ValidationError(
        f"unknown network {name_or_path!r}; shipped: {list(SHIPPED_NETWORKS)}"
    )
