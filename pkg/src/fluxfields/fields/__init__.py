"""Vector-field families: interface, analytic baselines, trainable models."""

from .base import (
    DifferenceField,
    LinearField,
    ScoreField,
    VectorField,
    ZeroField,
)
from .io import load_field, register_family, save_field
from .kinetic import KineticField, integrate_kinetic
from .rbf import RbfField
from .toy import (
    ATTRIBUTE_KINDS,
    ToyAttribute,
    ToyPerturbationField,
    attribute_scales_quadrature,
    estimate_attribute_scales,
    make_psi_skew,
    make_psi_tri,
)

register_family("rbf", RbfField)
register_family("kinetic", KineticField)
register_family("toy", ToyPerturbationField)

__all__ = [
    "ATTRIBUTE_KINDS",
    "DifferenceField",
    "KineticField",
    "LinearField",
    "RbfField",
    "ScoreField",
    "ToyAttribute",
    "ToyPerturbationField",
    "VectorField",
    "ZeroField",
    "attribute_scales_quadrature",
    "estimate_attribute_scales",
    "integrate_kinetic",
    "load_field",
    "make_psi_skew",
    "make_psi_tri",
    "register_family",
    "save_field",
]
