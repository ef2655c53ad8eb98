"""Small family specs for testing."""

import json

# Two overlapping capsules; the right one slides along y (axis 0) and
# stretches along y (axis 1). Curved surfaces keep every 1-ring non-planar.
CAPSULE_PAIR = json.dumps({
    "version": 1,
    "name": "capsule_pair",
    "q": 2,
    "blend_radius": 0.0,
    "parts": [
        {"name": "left", "kind": "capsule", "half_extents": [0.2, 0.3, 0.2], "translation": [-0.15, 0.0, 0.0]},
        {"name": "right", "kind": "capsule", "half_extents": [0.18, 0.25, 0.18], "translation": [0.15, 0.0, 0.0]},
    ],
    "latent_axes": [
        {"part": "right", "axis": 0, "coefficients": [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0.3, 0]},
        {"part": "right", "axis": 1, "coefficients": [0, 0, 0, 0, 0.4, 0, 0, 0, 0, 0, 0, 0]},
    ],
    "instances": [
        {"id": "pair_00", "latent": [0.0, 0.0]},
        {"id": "pair_01", "latent": [0.4, 0.0]},
        {"id": "pair_02", "latent": [-0.4, 0.2]},
        {"id": "pair_03", "latent": [0.2, -0.3]},
    ],
}, indent=2)

# Two near-spherical blobs joined by a smooth blend. The right blob stretches
# along x and drifts right (axis 0), the left stretches along y (axis 1).
BLOB_PAIR = json.dumps({
    "version": 1,
    "name": "blob_pair",
    "q": 2,
    "blend_radius": 0.03,
    "parts": [
        {"name": "left", "kind": "capsule", "half_extents": [0.25, 0.02, 0.25], "translation": [-0.2, 0.0, 0.0]},
        {"name": "right", "kind": "capsule", "half_extents": [0.2, 0.02, 0.2], "translation": [0.2, 0.0, 0.0]},
    ],
    "latent_axes": [
        {"part": "right", "axis": 0, "coefficients": [0.5, 0, 0, 0, 0, 0, 0, 0, 0, 0.1, 0, 0]},
        {"part": "left", "axis": 1, "coefficients": [0, 0, 0, 0, 0.4, 0, 0, 0, 0, 0, 0, 0]},
    ],
    "instances": [
        {"id": "blob_00", "latent": [0.0, 0.0]},
        {"id": "blob_01", "latent": [0.8, 0.8]},
        {"id": "blob_02", "latent": [0.4, -0.5]},
    ],
}, indent=2)

# A capsule body with a knob on its tip that shrinks and sinks into the body
# as z0 -> 1.
KNOB = json.dumps({
    "version": 1,
    "name": "knob",
    "q": 1,
    "blend_radius": 0.0,
    "parts": [
        {"name": "body", "kind": "capsule", "half_extents": [0.25, 0.3, 0.25]},
        {"name": "knob", "kind": "capsule", "half_extents": [0.12, 0.12, 0.12], "translation": [0.0, 0.55, 0.0]},
    ],
    "latent_axes": [
        {"part": "knob", "axis": 0, "coefficients": [-0.9, 0, 0, 0, -0.9, 0, 0, 0, -0.9, 0, -0.5, 0]},
    ],
    "instances": [
        {"id": "knob_full", "latent": [0.0]},
        {"id": "knob_gone", "latent": [1.0]},
    ],
}, indent=2)

SAMPLED = json.dumps({
    "version": 1,
    "name": "sampled",
    "q": 2,
    "parts": [{"name": "body", "kind": "box", "half_extents": [0.3, 0.3, 0.3]}],
    "latent_axes": [{"part": "body", "axis": 0, "coefficients": [0.2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}],
    "sampling": {"count": 5, "seed": 7, "ranges": [[-1.0, 1.0], [0.0, 0.5]]},
}, indent=2)

# (document, substring of the error message)
BAD_SPECS = [
    ('{"version": 1, "name": "x", "q": 1,\n "parts": [}', "line 2"),
    (json.dumps({"version": 2, "name": "x", "q": 1,
                 "parts": [{"name": "a", "kind": "box", "half_extents": [1, 1, 1]}],
                 "instances": [{"id": "a", "latent": [0]}]}), "unsupported spec version"),
    (json.dumps({"version": 1, "name": "x", "q": 1,
                 "parts": [{"name": "a", "kind": "torus", "half_extents": [1, 1, 1]}],
                 "instances": [{"id": "a", "latent": [0]}]}), "unknown primitive kind"),
    (json.dumps({"version": 1, "name": "x", "q": 2,
                 "parts": [{"name": "a", "kind": "box", "half_extents": [1, 1, 1]}],
                 "instances": [{"id": "a", "latent": [0]}]}), "latent has length 1"),
    (json.dumps({"version": 1, "name": "x", "q": 1,
                 "parts": [{"name": "a", "kind": "box", "half_extents": [1, 1, 1]}]}), "instances or a sampling block"),
]
