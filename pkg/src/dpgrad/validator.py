"""Pre-training checks for layers that break per-sample privacy.

Three checks run, and only these: batch normalization (statistics mix
samples), instance normalization that tracks running statistics (state not
covered by the guarantee), and layer kinds without a per-sample gradient
rule. The checks are not exhaustive; a model that couples samples some other
way will pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

from .errors import DPGradError
from .grad_sample import DEFAULT_REGISTRY, GradSamplerRegistry
from .layers import Layer, LayerDescriptor, ModelGraph, Parameter

MAX_GROUPS = 32


@dataclass(frozen=True)
class Violation:
    layer_index: int
    kind: str
    reason: str
    fixable: bool = False
    suggested_replacement: Optional[LayerDescriptor] = None

    def __str__(self):
        return f"layer={self.layer_index} kind={self.kind} reason={self.reason}"


class ValidationError(DPGradError):
    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        super().__init__("\n".join(str(v) for v in self.violations))


def group_count(channels: int) -> int:
    """Largest divisor of ``channels`` not above 32 (equals min(32, channels) when that divides)."""
    for g in range(min(MAX_GROUPS, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _replacement(desc: LayerDescriptor) -> Optional[LayerDescriptor]:
    if desc.kind == "batch_norm":
        c = int(desc.hyper["num_features"])
        hyper = {"num_groups": group_count(c), "num_channels": c}
        if "eps" in desc.hyper:
            hyper["eps"] = desc.hyper["eps"]
        return LayerDescriptor("group_norm", hyper)
    if desc.kind == "instance_norm":
        return LayerDescriptor("instance_norm", {**desc.hyper, "track_running_stats": False})
    return None


def validate(model: ModelGraph, registry: Optional[GradSamplerRegistry] = None) -> List[Violation]:
    registry = registry or DEFAULT_REGISTRY
    found = []
    for i, desc in enumerate(model.descriptors()):
        if desc.kind == "batch_norm":
            found.append(Violation(i, desc.kind, "batch normalization shares information across "
                                   "samples of a batch", True, _replacement(desc)))
        elif desc.kind == "instance_norm" and desc.hyper.get("track_running_stats", False):
            found.append(Violation(i, desc.kind, "track_running_stats keeps statistics that are "
                                   "not covered by DP guarantees", True, _replacement(desc)))
        elif desc.kind not in registry:
            found.append(Violation(i, desc.kind, "no per-sample gradient rule registered for this "
                                   "layer kind", False))
    return found


def suggest_fix(model: ModelGraph, seed: int = 0) -> ModelGraph:
    """Rewrite fixable layers; untouched layers keep their parameters."""
    violations = {v.layer_index: v for v in validate(model) if v.fixable}
    if not violations:
        return model
    layers = []
    for i, layer in enumerate(model.layers):
        if i not in violations:
            layers.append(layer)
            continue
        new_desc = violations[i].suggested_replacement
        fresh = ModelGraph.build([new_desc], model.input_shape, seed=seed + i, dtype=model.dtype)
        params = {k: Parameter(f"{i}.{new_desc.kind}.{k}", p.data)
                  for k, p in fresh.layers[0].params.items()}
        layers.append(Layer(new_desc, params))
    return ModelGraph(layers, model.input_shape, model.dtype)
