"""Training loop with per-iteration loss weighting, plus seeded ensembles."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Sampler, SamplerConfig, SplitSpec, TimeSeries
from .dlw import DlwConfig, DlwInputs, cosine_similarity, make_policy
from .gradcore import AdamState, ContractError, ParameterSet, Tape, adam_step, backward
from .losses import loss_nodes
from .model import ModelConfig, forward, init_params, layer_shapes, predict

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = (
    "iteration",
    "L_error",
    "L_instability",
    "lambda",
    "composite",
    "grad_norm_error",
    "grad_norm_instability",
    "cosine_similarity",
)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 8000
    learning_rate: float = 1e-5
    model: ModelConfig = field(default_factory=ModelConfig)
    dlw: DlwConfig = field(default_factory=DlwConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")


@dataclass
class RunLog:
    records: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    params: Optional[ParameterSet] = None
    max_index_used: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.records], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for r in self.records:
                w.writerow(["" if r[c] is None else repr(r[c]) for c in RUNLOG_COLUMNS])


def derive_seeds(seed: int) -> Tuple[int, int, int]:
    """Independent (init, sampler, dlw) seeds from one run seed."""
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return int(a), int(b), int(c)


def _forward_losses(params: ParameterSet, batch, config: ModelConfig):
    tape = Tape()
    nodes = tape.parameters(params)
    B = batch.x_t.shape[0]
    x = tape.constant(np.concatenate([batch.x_t, batch.x_tm1], axis=0))
    out = forward(tape, x, nodes, config)
    f_t, f_tm1 = tape.rows(out, 0, B), tape.rows(out, B, 2 * B)
    err, ins = loss_nodes(tape, f_t, f_tm1, batch.y_t, batch.y_tm1, batch.scale)
    return tape, err, ins


def task_gradients(params: ParameterSet, batch, config: ModelConfig):
    """(L_error, L_instability, g_error, g_instability) for one batch."""
    tape, err, ins = _forward_losses(params, batch, config)
    return err.item(), ins.item(), backward(tape, err), backward(tape, ins)


def train(
    series: Sequence[TimeSeries],
    config: TrainConfig,
    final_fit: bool = False,
    split_spec: SplitSpec = SplitSpec(),
    hook: Optional[Callable[..., None]] = None,
    sampler: Optional[Sampler] = None,
) -> Tuple[ParameterSet, RunLog]:
    """Run ``config.iterations`` weighted-gradient Adam steps.

    ``hook(iteration, params_before, combined_grad, lam, params_after)`` is
    called after every update when given.
    """
    init_seed, sampler_seed, dlw_seed = derive_seeds(config.seed)
    mcfg = config.model
    if sampler is None:
        sampler = Sampler.from_series(
            series, mcfg.lookback, mcfg.horizon, replace(config.sampler, seed=sampler_seed),
            split_spec=split_spec, final_fit=final_fit,
        )
    params = init_params(mcfg, init_seed)
    policy = make_policy(replace(config.dlw, seed=dlw_seed), lr=config.learning_rate)
    adam = AdamState(lr=config.learning_rate)
    names = list(params)
    runlog = RunLog(max_index_used=sampler.max_index_used())
    initial = (None, None)
    started = time.perf_counter()

    for i in range(1, config.iterations + 1):
        batch = sampler.draw()
        l_err, l_ins, g_err, g_ins = task_gradients(params, batch, mcfg)
        flat_e = np.concatenate([g_err[k].reshape(-1) for k in names])
        flat_i = np.concatenate([g_ins[k].reshape(-1) for k in names])
        norm_e, norm_i = float(np.linalg.norm(flat_e)), float(np.linalg.norm(flat_i))
        cos = cosine_similarity(flat_e, flat_i)
        if not (np.isfinite(l_err) and np.isfinite(l_ins) and np.isfinite(norm_e) and np.isfinite(norm_i)):
            raise TrainingAborted(
                "non-finite loss or gradient",
                {"iteration": i, "lambda": policy.last, "L_error": l_err, "L_instability": l_ins,
                 "grad_norm_error": norm_e, "grad_norm_instability": norm_i},
            )
        if i == 1:
            initial = (l_err, l_ins)
        inputs = DlwInputs(i, l_err, l_ins, flat_e, flat_i, *initial)
        lam = policy.step(inputs)

        combined = ParameterSet((k, (1.0 - lam) * g_err[k] + lam * g_ins[k]) for k in names)
        extra = policy.extra_params()
        if extra:
            full = ParameterSet(params)
            full.update(extra)
            grads = dict(combined)
            grads.update(policy.extra_grads(inputs))
            updated = adam_step(full, grads, adam)
            policy.set_extra_params({k: updated.pop(k) for k in extra})
            new_params = ParameterSet((k, updated[k]) for k in names)
        else:
            new_params = adam_step(params, combined, adam)
        if hook is not None:
            hook(i, params, combined, lam, new_params)
        params = new_params

        runlog.records.append({
            "iteration": i,
            "L_error": l_err,
            "L_instability": l_ins,
            "lambda": lam,
            "composite": (1.0 - lam) * l_err + lam * l_ins,
            "grad_norm_error": norm_e,
            "grad_norm_instability": norm_i,
            "cosine_similarity": cos,
        })
        if i % config.log_every == 0 or i == config.iterations:
            log.info("iter %d  L_error %.5f  L_instability %.5f  lambda %.4f", i, l_err, l_ins, lam)

    runlog.wall_clock = time.perf_counter() - started
    runlog.params = params
    return params, runlog


def final_fit(series: Sequence[TimeSeries], config: TrainConfig, split_spec: SplitSpec = SplitSpec()):
    """Train on train + validation (test still held out)."""
    return train(series, config, final_fit=True, split_spec=split_spec)


def _train_member(args):
    series, config, final = args
    return train(series, config, final_fit=final)


def train_ensemble(
    series: Sequence[TimeSeries],
    config: TrainConfig,
    seeds: Sequence[int],
    final_fit: bool = True,
    workers: int = 1,
) -> List[Tuple[ParameterSet, RunLog]]:
    """One independent run per seed (initialization, sampling and DLW streams all vary)."""
    jobs = [(series, replace(config, seed=s), final_fit) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_train_member(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_member, jobs))


def check_members(members: Sequence[ParameterSet], config: ModelConfig) -> None:
    if not members:
        raise ContractError("ensemble needs at least one member")
    ref = {}
    for name, shape in layer_shapes(config):
        ref[f"{name}.weight"], ref[f"{name}.bias"] = shape, shape[1:]
    for m in members:
        if list(m) != list(ref) or any(m[k].shape != ref[k] for k in ref):
            raise ContractError("ensemble member does not match the model configuration")


def ensemble_forecast(members: Sequence[ParameterSet], config: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    """Elementwise median of member forecasts for a (batch, lookback) input."""
    check_members(members, config)
    preds = np.stack([predict(m, config, inputs) for m in members])
    return np.median(preds, axis=0)
