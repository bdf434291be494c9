"""Shared setup for the demo scripts: a pretrained backbone and the user's data."""

import sys
from pathlib import Path

from saltlab.harness import ExperimentConfig, load_backbone, pretrain_backbone, user_data

OUT = Path(__file__).resolve().parent / "out"


def setup(argv=None):
    """Return (config, backbone, data); pretrains once into demos/out/ when no backbone is given."""
    argv = sys.argv[1:] if argv is None else argv
    path = Path(argv[0]) if argv else OUT / "backbone.smdl"
    cfg = ExperimentConfig(backbone_path=str(path), output_dir=str(OUT))
    if not path.exists():
        print(f"no backbone at {path}; pretraining one (about 20 s)")
        result = pretrain_backbone(cfg.dataset, cfg.data_seed, path, cfg.pretrain)
        print(f"  test accuracy on all 8 classes: {result.test_accuracy:.3f}")
    return cfg, load_backbone(path), user_data(cfg)
