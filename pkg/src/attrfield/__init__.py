"""Compositional attribute fields: factored 4-D geometry/appearance volumes
with capsule-template skinning, SDF-style volume rendering, and a scene
container plus CLI/HTTP tooling around them."""

__version__ = "0.1.0"
