"""Bundled micro fixtures used by the test suite and CLI walkthroughs.

``triangle3``: 3 buses in an equal-susceptance triangle, 2 generators.
``micro5``: 5-bus ring, 3 generators, 5 lines.

Costs are $/p.u. on a 100 MVA base, so objective values land in the
hundreds-to-thousands range that the trainer's objective scaling expects.
"""

from __future__ import annotations

from .errors import DataError
from .grid import GridCase


def triangle3() -> GridCase:
    return GridCase(
        n_bus=3,
        gen_bus=[0, 1],
        glb=[0.0, 0.0],
        gub0=[2.0, 2.0],
        c0=[1000.0, 2000.0],
        gamma=[0.5, 0.5],
        line_from=[0, 0, 1],
        line_to=[1, 2, 2],
        susceptance=[1.0, 1.0, 1.0],
        flb=[-0.9, -0.9, -0.9],
        fub=[0.9, 0.9, 0.9],
        load_bus=[1, 2],
        d0=[0.35, 0.65],
        slack_bus=0,
        Pi=1500.0,
        name="triangle3",
    )


def micro5() -> GridCase:
    """5-bus ring sized so that the scaled learning experiment is well posed:
    narrow cost spread, moderate dispatch boxes, full droop on the two larger
    units and reduced droop on the reserve unit, whose response limit makes
    security genuinely dispatch-dependent on high-demand instances."""
    return GridCase(
        n_bus=5,
        gen_bus=[0, 2, 3],
        glb=[0.25, 0.10, 0.10],
        gub0=[1.55, 1.20, 1.10],
        c0=[3600.0, 4000.0, 4400.0],
        gamma=[1.0, 1.0, 0.65],
        line_from=[0, 1, 2, 3, 4],
        line_to=[1, 2, 3, 4, 0],
        susceptance=[10.0, 8.0, 6.0, 8.0, 10.0],
        flb=[-0.8, -0.8, -0.8, -0.8, -0.9],
        fub=[0.8, 0.8, 0.8, 0.8, 0.9],
        load_bus=[1, 3, 4],
        d0=[0.48, 0.48, 0.64],
        slack_bus=0,
        Pi=1500.0,
        name="micro5",
    )


BUILTIN_CASES = {"triangle3": triangle3, "micro5": micro5}


def get_case(name: str) -> GridCase:
    try:
        return BUILTIN_CASES[name]()
    except KeyError:
        raise DataError(f"unknown builtin case {name!r}; have {sorted(BUILTIN_CASES)}") from None
