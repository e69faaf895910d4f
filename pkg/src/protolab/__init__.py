"""protolab: desk-scale laboratory for prototype-based interpretable image classification.

Library layout:
    shapes      synthetic shapes benchmark (renderer, datasets, transforms)
    protopnet   prototype-part classifier (similarity layer, losses, training, projection)
    prototree   soft decision tree over prototypes (routing, paths, training)
    explain     heatmap upsampling and patch extraction
    prp         model-aware relevance backpropagation backend
    desiderata  automated prototype-quality metrics
    ood         distance-based out-of-distribution detection
    study       HTTP user-study service and statistics
    cli         command line entry point (`protolab <subcommand>`)
"""

__version__ = "0.1.0"

from . import desiderata, explain, ood, prototree, protopnet, prp, shapes, study  # noqa: F401
