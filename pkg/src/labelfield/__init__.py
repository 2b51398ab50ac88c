"""labelfield: interactive neural-field scene labelling.

A scene-specific MLP field trained online from posed RGB-D keyframes jointly
represents geometry, colour and semantics, so sparse click annotations
propagate to dense 2D/3D segmentations. Includes flat and hierarchical label
modes, uncertainty-driven automatic queries, labelled mesh export, and an
evaluation harness with a CLI.
"""

__version__ = "0.1.0"

from .field import EncodingConfig, FieldParams, encode_position, field_forward, init_params

__all__ = [
    "EncodingConfig",
    "FieldParams",
    "encode_position",
    "field_forward",
    "init_params",
    "__version__",
]
