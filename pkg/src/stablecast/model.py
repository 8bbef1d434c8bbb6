"""Generic N-BEATS: fully connected blocks joined by doubly residual stacking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .gradcore import DimensionError, ParameterSet, Tape, Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 20
    lookback: int = 36
    horizon: int = 6
    hidden_width: int = 256
    trunk_depth: int = 4

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.lookback < 2:
            raise ValueError("lookback must be >= 2")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.hidden_width < 1 or self.trunk_depth < 1:
            raise ValueError("hidden_width and trunk_depth must be positive")


class BlockOutput(NamedTuple):
    backcast: Tensor
    forecast: Tensor


def layer_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, int]]]:
    """(layer name, (fan_in, fan_out)) for every affine layer, in forward order."""
    shapes = []
    for k in range(config.num_blocks):
        fan_in = config.lookback
        for layer in range(config.trunk_depth):
            shapes.append((f"block{k}.fc{layer}", (fan_in, config.hidden_width)))
            fan_in = config.hidden_width
        shapes.append((f"block{k}.backcast", (fan_in, config.lookback)))
        shapes.append((f"block{k}.forecast", (fan_in, config.horizon)))
    return shapes


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, (fan_in, fan_out) in layer_shapes(config):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.bias"] = rng.uniform(-bound, bound, size=fan_out)
    return params


def zero_params(config: ModelConfig) -> ParameterSet:
    params = ParameterSet()
    for name, (fan_in, fan_out) in layer_shapes(config):
        params[f"{name}.weight"] = np.zeros((fan_in, fan_out))
        params[f"{name}.bias"] = np.zeros(fan_out)
    return params


def block_forward(tape: Tape, x: Tensor, nodes: dict, block: int, config: ModelConfig) -> BlockOutput:
    if x.values.ndim != 2 or x.values.shape[1] != config.lookback:
        raise DimensionError(f"block input must be (batch, {config.lookback}), got {x.values.shape}")
    h = x
    for layer in range(config.trunk_depth):
        p = f"block{block}.fc{layer}"
        h = tape.relu(tape.affine(h, nodes[f"{p}.weight"], nodes[f"{p}.bias"]))
    p = f"block{block}"
    backcast = tape.affine(h, nodes[f"{p}.backcast.weight"], nodes[f"{p}.backcast.bias"])
    forecast = tape.affine(h, nodes[f"{p}.forecast.weight"], nodes[f"{p}.forecast.bias"])
    return BlockOutput(backcast, forecast)


def forward(
    tape: Tape,
    x: Tensor,
    nodes: dict,
    config: ModelConfig,
    trace: Optional[list] = None,
) -> Tensor:
    """Full stack on ``tape``; ``nodes`` maps parameter names to tape leaves.

    If ``trace`` is a list, (block input, BlockOutput) pairs are appended to it.
    """
    residual = x
    total = None
    for k in range(config.num_blocks):
        out = block_forward(tape, residual, nodes, k, config)
        if trace is not None:
            trace.append((residual, out))
        total = out.forecast if total is None else tape.add(total, out.forecast)
        residual = tape.sub(residual, out.backcast)
    return total


def predict(params: ParameterSet, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Forecasts for a (batch, lookback) array, no gradients recorded."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return predict(params, config, x[None, :])[0]
    if x.shape[1] != config.lookback:
        raise DimensionError(f"input must have {config.lookback} columns, got {x.shape[1]}")
    residual, total = x, np.zeros((x.shape[0], config.horizon))
    for k in range(config.num_blocks):
        h = residual
        for layer in range(config.trunk_depth):
            p = f"block{k}.fc{layer}"
            h = np.maximum(h @ params[f"{p}.weight"] + params[f"{p}.bias"], 0.0)
        residual = residual - (h @ params[f"block{k}.backcast.weight"] + params[f"block{k}.backcast.bias"])
        total = total + (h @ params[f"block{k}.forecast.weight"] + params[f"block{k}.forecast.bias"])
    return total


# checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: ParameterSet, config: ModelConfig, extra: Optional[dict] = None) -> None:
    # float repr round-trips exactly, so JSON keeps float64 bit patterns
    doc = {
        "model": asdict(config),
        "parameters": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()} for name, arr in params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Tuple[ParameterSet, ModelConfig]:
    doc = json.loads(Path(path).read_text())
    config = ModelConfig(**doc["model"])
    params = ParameterSet()
    for name, entry in doc["parameters"].items():
        params[name] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return params, config
