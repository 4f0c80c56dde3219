"""Versioned JSON schemas for every config file; unknown fields are rejected."""
from __future__ import annotations

import jsonschema

SCHEMA_VERSION = 1

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_color = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
          "minItems": 3, "maxItems": 3}

_texture = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["solid", "checker", "noise", "image"]},
        "colors": {"type": "array", "items": _color, "minItems": 1},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "path": {"type": "string"},
    },
}

_object = {
    "oneOf": [
        {"type": "object", "additionalProperties": False,
         "required": ["type", "min", "max", "texture"],
         "properties": {"type": {"const": "box"}, "min": _vec3, "max": _vec3, "texture": _texture}},
        {"type": "object", "additionalProperties": False,
         "required": ["type", "center", "radius", "texture"],
         "properties": {"type": {"const": "sphere"}, "center": _vec3,
                        "radius": {"type": "number", "exclusiveMinimum": 0}, "texture": _texture}},
    ]
}

SCHEMAS = {
    "scene": {
        "type": "object",
        "additionalProperties": False,
        "required": ["version", "camera", "room", "objects", "totems"],
        "properties": {
            "version": {"const": SCHEMA_VERSION},
            "seed": {"type": "integer"},
            "camera": {
                "type": "object", "additionalProperties": False,
                "required": ["fx", "fy", "cx", "cy", "width", "height"],
                "properties": {
                    "fx": {"type": "number", "exclusiveMinimum": 0},
                    "fy": {"type": "number", "exclusiveMinimum": 0},
                    "cx": {"type": "number"}, "cy": {"type": "number"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                },
            },
            "room": {
                "type": "object", "additionalProperties": False,
                "required": ["width", "height", "depth", "textures"],
                "properties": {
                    "width": {"type": "number", "exclusiveMinimum": 0},
                    "height": {"type": "number", "exclusiveMinimum": 0},
                    "depth": {"type": "number", "exclusiveMinimum": 0},
                    "textures": {
                        "type": "object", "additionalProperties": False,
                        "required": ["back", "left", "right", "floor", "ceiling"],
                        "properties": {k: _texture for k in
                                       ("back", "left", "right", "floor", "ceiling")},
                    },
                },
            },
            "objects": {"type": "array", "items": _object},
            "totems": {
                "type": "array",
                "items": {"type": "object", "additionalProperties": False,
                          "required": ["center", "radius"],
                          "properties": {"center": _vec3,
                                         "radius": {"type": "number", "exclusiveMinimum": 0},
                                         "ior": {"type": "number", "exclusiveMinimum": 1}}},
            },
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "required": ["version"],
        "properties": {
            "version": {"const": SCHEMA_VERSION},
            "pose_mode": {"enum": ["init", "joint", "oracle"]},
            "lam": {"type": "number", "minimum": 0},
            "iou_weight": {"type": "number", "minimum": 0},
            "samples_per_ray": {"type": "integer", "minimum": 2},
            "near": {"type": ["number", "null"]},
            "far": {"type": ["number", "null"]},
            "warmup_epochs": {"type": "integer", "minimum": 0},
            "total_epochs": {"type": "integer", "minimum": 1},
            "lr_field": {"type": "number", "exclusiveMinimum": 0},
            "lr_totem": {"type": "number", "exclusiveMinimum": 0},
            "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "decay_every": {"type": "integer", "minimum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "cube_overflow_threshold": {"type": "number", "minimum": 0},
            "grid_resolution": {"type": "integer", "minimum": 2},
            "grid_start": {"type": ["integer", "null"], "minimum": 2},
            "upsample_epochs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "tv_weight": {"type": "number", "minimum": 0},
            "sigma_init": {"type": "number"},
            "bbox_samples": {"type": "integer", "minimum": 4},
            "fd_step": {"type": "number", "exclusiveMinimum": 0},
            "seed": {"type": "integer"},
        },
    },
    "manipulation": {
        "type": "object",
        "additionalProperties": False,
        "required": ["version", "kind", "region"],
        "properties": {
            "version": {"const": SCHEMA_VERSION},
            "kind": {"enum": ["color_patch", "splice"]},
            "region": {"type": "array", "items": {"type": "integer", "minimum": 0},
                       "minItems": 4, "maxItems": 4},
            "color": _color,
            "seed": {"type": "integer"},
            "source": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "add_objects": {"type": "array", "items": _object},
                    "remove_objects": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                },
            },
        },
    },
}


class SchemaError(ValueError):
    pass


def validate(obj, name: str, source: str = "<config>"):
    """Validate ``obj`` against a named schema; errors name the offending field path."""
    try:
        jsonschema.validate(obj, SCHEMAS[name])
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"{source}: field '{where}': {e.message}") from None
