import numpy as np
import pytest

from gridsurf.field import Bounds, OccupancyField, RadianceGrid
from gridsurf.sensor import Primitive, PrimitiveScene, RigSpec, generate_dataset


@pytest.fixture
def unit_bounds():
    return Bounds(np.zeros(3), np.ones(3))


@pytest.fixture
def sym_bounds():
    return Bounds(-np.ones(3), np.ones(3))


def three_sphere_scene():
    return PrimitiveScene(
        primitives=[
            Primitive("sphere", (-0.45, -0.3, 0.0), [0.42], albedo=(0.85, 0.15, 0.1)),
            Primitive("sphere", (0.45, -0.25, 0.1), [0.38], albedo=(0.1, 0.6, 0.85)),
            Primitive("sphere", (0.0, 0.45, -0.1), [0.4], albedo=(0.9, 0.75, 0.1)),
        ],
        environment_color=(0.35, 0.35, 0.4),
    )


def tiny_dataset(n_cams=6, wh=32, radius=2.6, scene=None, fov_deg=45.0,
                 held_out_every=0):
    scene = scene if scene is not None else three_sphere_scene()
    rig = RigSpec(count=n_cams, radius=radius, kind="sphere", width=wh,
                  height=wh, fov_y=np.deg2rad(fov_deg),
                  held_out_every=held_out_every or n_cams + 1)
    return generate_dataset(scene, rig), scene


def random_field_pair(rng, res=8, bounds=None, sh_degree=0, logit_scale=2.0):
    bounds = bounds if bounds is not None else Bounds(-np.ones(3), np.ones(3))
    occ = OccupancyField(res, bounds)
    occ.logits = rng.normal(0.0, logit_scale, occ.n_vertices)
    rad = RadianceGrid(res, bounds, sh_degree=sh_degree)
    rad.coeffs = rng.uniform(0.1, 0.9, rad.coeffs.shape)
    return occ, rad
