"""Named network / training presets."""

from __future__ import annotations

from .errors import ConfigError


def _conv_block(c, pool=True):
    return [f"conv:{c}", "bn", "relu"] + (["maxpool:2"] if pool else [])


def _vgg16(classes):
    layers = []
    for width, reps in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for r in range(reps):
            layers += _conv_block(width, pool=r == reps - 1)
    return layers + ["flatten", "fc:512", "relu", "fc:512", "relu", f"fc:{classes}"]


# dataset: "moons" | "cifar10" | "random-images"
PRESETS = {
    "mlp-moons": {
        "layers": ["fc:16", "tanh", "fc:16", "tanh", "fc:2"],
        "input_shape": (2,),
        "classes": 2,
        "dataset": "moons",
        "samples": 500,
        "noise": 0.1,
        "hyper": {"lr": 0.1, "batch": 100, "epochs": 200, "lr_decay_every": 0},
    },
    "smallcnn-cifar10": {
        "layers": _conv_block(8) + _conv_block(16) + _conv_block(32) + ["flatten", "fc:128", "relu", "fc:10"],
        "input_shape": (3, 32, 32),
        "classes": 10,
        "dataset": "cifar10",
        "train_subset": 5000,
        "test_subset": 2000,
        "hyper": {"lr": 0.01, "batch": 100, "epochs": 30, "lr_decay_every": 40},
    },
    "vgg16-cifar": {
        "layers": _vgg16(10),
        "input_shape": (3, 32, 32),
        "classes": 10,
        "dataset": "cifar10",
        "hyper": {"lr": 0.01, "batch": 100, "epochs": 120, "lr_decay_every": 40},
    },
    "toy-cnn": {
        "layers": ["conv:3", "bn", "relu", "maxpool:2", "conv:4", "bn", "relu", "maxpool:2",
                   "flatten", "fc:6", "relu", "fc:10"],
        "input_shape": (3, 8, 8),
        "classes": 10,
        "precision": "float64",
        "dataset": "random-images",
        "samples": 4,
        "hyper": {"lr": 0.01, "batch": 4, "epochs": 1, "lr_decay_every": 0},
    },
}

# "small" / "large" learning-rate regimes, step decay x0.1 every 40 epochs
LR_REGIMES = {
    "small": {"lr": 0.01, "lr_decay_factor": 0.1, "lr_decay_every": 40},
    "large": {"lr": 0.1, "lr_decay_factor": 0.1, "lr_decay_every": 40},
}


def get_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    p = PRESETS[name]
    return {**p, "layers": list(p["layers"]), "hyper": dict(p["hyper"])}
