"""Model presets by name."""

from .base import EmptyModel, ModelPreset
from .cells import ProliferationModel, TumorModel
from .clustering import ClusteringModel
from .sir import SirModel

PRESETS: dict[str, type[ModelPreset]] = {
    "proliferation": ProliferationModel,
    "clustering": ClusteringModel,
    "sir": SirModel,
    "spheroid": TumorModel,
}


def get_preset(name: str, **overrides) -> ModelPreset:
    try:
        cls = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return cls(**overrides)


__all__ = ["PRESETS", "get_preset", "ModelPreset", "EmptyModel", "ProliferationModel", "TumorModel",
           "ClusteringModel", "SirModel"]
