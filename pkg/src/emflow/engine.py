"""Inference engine: alternate a training phase (flow + online EM updates
with the imputation frozen) and a re-imputation phase (imputation refresh
with all parameters frozen), reinitializing the flow each outer iteration.

Everything is driven by keyed random substreams derived from the config
seed, so a run is bit-reproducible and can be resumed from a checkpoint at
any outer-iteration boundary without changing the result.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DataMatrix, ImputedDataset, MaskMatrix, initial_impute
from .exceptions import ConfigError, NonFiniteError, ValidationError
from .flow import FlowModel, composite_grad_step, nll_grad_step, reinit_flow
from .gaussian import GaussianParams, ensure_pd, impute_matrix
from .nets import Adam
from .online_em import EmConfig, OnlineEmState, em_update, init_from_batch
from .validation import as_float_matrix, as_mask_matrix, check_paired

# substream tags for keyed seed derivation
_SEED_INIT_IMPUTE = 1
_SEED_FLOW = 2
_SEED_SHUFFLE = 3

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Everything the engine needs besides the data itself."""

    outer_iterations: int = 5
    epochs_per_phase: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-4
    recon_weight: float = 1e6
    flow_depth: int = 6
    hidden_units: int | None = None
    initial_strategy: str = "random-observed"
    grid_shape: tuple | None = None
    em: EmConfig = field(default_factory=EmConfig)
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.outer_iterations < 0:
            problems.append(f"outer_iterations must be >= 0, got {self.outer_iterations}")
        if self.epochs_per_phase < 1:
            problems.append(f"epochs_per_phase must be >= 1, got {self.epochs_per_phase}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.recon_weight < 0:
            problems.append(f"recon_weight must be >= 0, got {self.recon_weight}")
        if self.flow_depth < 1:
            problems.append(f"flow_depth must be >= 1, got {self.flow_depth}")
        if self.hidden_units is not None and self.hidden_units < 1:
            problems.append(f"hidden_units must be >= 1, got {self.hidden_units}")
        problems.extend(self.em.validate())
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "em"}
        out["grid_shape"] = list(self.grid_shape) if self.grid_shape else None
        out["em"] = {
            "step_scale": self.em.step_scale,
            "step_decay": self.em.step_decay,
            "inflation_schedule": [list(e) for e in self.em.inflation_schedule],
            "superbatch_max": self.em.superbatch_max,
            "reinit_each_iteration": self.em.reinit_each_iteration,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        em = data.pop("em", {})
        em["inflation_schedule"] = tuple(
            tuple(e) for e in em.get("inflation_schedule", DEFAULT_EM.inflation_schedule)
        )
        if data.get("grid_shape"):
            data["grid_shape"] = tuple(data["grid_shape"])
        return cls(em=EmConfig(**em), **data)


DEFAULT_EM = EmConfig()


@dataclass
class ImputationRun:
    """Final imputation plus the fitted model and per-iteration trace."""

    imputed: ImputedDataset
    flow: FlowModel
    base: GaussianParams
    em_state: OnlineEmState
    trace: list[dict]
    holdout_imputed: ImputedDataset | None = None


def _seeded_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def training_phase(
    values: np.ndarray,
    masks: np.ndarray,
    flow: FlowModel,
    em_state: OnlineEmState | None,
    config: TrainConfig,
    outer_iteration: int = 1,
) -> tuple[OnlineEmState, dict]:
    """Run the per-batch update schedule for one outer iteration.

    For every shuffled mini-batch: one gradient step on the likelihood loss,
    embed the batch, one online EM update (imputing the embeddings), decode
    the imputed embeddings, one gradient step on the composite loss. The
    imputation itself stays fixed. The first batch ever seen bootstraps the
    EM state from its embeddings.

    Mutates ``flow`` in place; returns the (possibly new) EM state and the
    phase's loss statistics.
    """
    n = values.shape[0]
    batch_size = min(config.batch_size, n)
    rng = _seeded_rng(config.seed, _SEED_SHUFFLE, outer_iteration)
    optimizer = Adam(lr=config.learning_rate)
    epoch_l1: list[float] = []
    epoch_l2: list[float] = []
    for epoch in range(config.epochs_per_phase):
        order = rng.permutation(n)
        l1_sum = l2_sum = 0.0
        batches = range(0, n, batch_size)
        for start in batches:
            idx = order[start:start + batch_size]
            xb = values[idx]
            mb = masks[idx]
            try:
                if em_state is None:
                    z0, _ = flow.inverse(xb)
                    em_state = init_from_batch(z0, config.em, outer_iteration)
                l1 = nll_grad_step(flow, xb, em_state.params, optimizer)
                z, _ = flow.inverse(xb)
                em_state, z_hat = em_update(em_state, z, mb)
                l2 = composite_grad_step(
                    flow, z_hat, xb, mb, em_state.params,
                    config.recon_weight, optimizer,
                )
            except NonFiniteError as err:
                raise NonFiniteError(
                    f"training aborted at outer iteration {outer_iteration}, "
                    f"epoch {epoch}, batch {start // batch_size}"
                ) from err
            l1_sum += l1 * idx.size
            l2_sum += l2 * idx.size
        epoch_l1.append(l1_sum / n)
        epoch_l2.append(l2_sum / n)
    stats = {
        "l1_first_epoch": epoch_l1[0],
        "l1_last_epoch": epoch_l1[-1],
        "l1_mean": float(np.mean(epoch_l1)),
        "l2_mean": float(np.mean(epoch_l2)),
        "em_steps": em_state.t,
        "optimizer_steps": optimizer.t,
    }
    return em_state, stats


def reimputation_phase(
    values: np.ndarray,
    masks: np.ndarray,
    flow: FlowModel,
    base: GaussianParams,
) -> np.ndarray:
    """Refresh missing cells with all parameters frozen.

    Embed the current imputation, impute the embeddings by latent
    conditional means, decode, and splice the decoded values into the
    missing cells only. Observed cells pass through bit-identical.
    """
    values = as_float_matrix(values, "values")
    masks = as_mask_matrix(masks)
    check_paired(values, masks)
    z, _ = flow.inverse(values)
    z_hat, _ = impute_matrix(z, masks, base)
    reconstructed, _ = flow.forward(z_hat)
    return np.where(masks, reconstructed, values)


def run(
    data,
    masks,
    config: TrainConfig,
    truth=None,
    holdout=None,
    trace_path=None,
    resume_from=None,
) -> ImputationRun:
    """Full inference on min-max-scaled data.

    ``truth`` (optional) adds a per-iteration RMSE over missing cells to the
    trace. ``holdout`` (optional) is a (values, mask[, truth]) triple of
    already initially-imputed held-out rows that only pass through the
    re-imputation phase after each iteration. ``trace_path`` appends one JSON
    line per iteration as it completes, so partial traces survive aborts.
    ``resume_from`` continues a checkpointed run; the result is bit-identical
    to an uninterrupted one.
    """
    config.validate()
    if isinstance(data, DataMatrix):
        data = data.values
    values = as_float_matrix(data, "data")
    if isinstance(masks, MaskMatrix):
        masks = masks.mask
    masks = as_mask_matrix(masks)
    check_paired(values, masks)
    n, p = values.shape
    if p < 2:
        raise ValidationError(f"need p >= 2 features, got {p}")
    if truth is not None:
        truth = as_float_matrix(truth, "truth")
        check_paired(values, truth)

    holdout_values = holdout_masks = holdout_truth = None
    if holdout is not None:
        holdout_values = as_float_matrix(holdout[0], "holdout values")
        holdout_masks = as_mask_matrix(holdout[1], "holdout mask")
        check_paired(holdout_values, holdout_masks)
        if len(holdout) > 2 and holdout[2] is not None:
            holdout_truth = as_float_matrix(holdout[2], "holdout truth")

    trace: list[dict] = []
    start_iteration = 0
    em_state: OnlineEmState | None = None
    flow = reinit_flow(p, config.flow_depth, _derived_seed(config.seed, _SEED_FLOW, 1),
                       config.hidden_units)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        # everything but the total iteration target must match
        saved = state["config"].to_dict()
        wanted = config.to_dict()
        saved.pop("outer_iterations")
        wanted.pop("outer_iterations")
        if saved != wanted:
            raise ValidationError("checkpoint config does not match the requested config")
        imputed = state["imputed"]
        if not np.array_equal(state["mask"], masks):
            raise ValidationError("checkpoint mask does not match the provided mask")
        start_iteration = state["completed_iterations"]
        em_state = state["em_state"]
        flow = state["flow"]
        if holdout_values is not None and state.get("holdout_imputed") is not None:
            holdout_values = state["holdout_imputed"]
    else:
        imputed = initial_impute(
            DataMatrix(values), MaskMatrix(masks), config.initial_strategy,
            seed=_derived_seed(config.seed, _SEED_INIT_IMPUTE),
            grid_shape=config.grid_shape,
        ).values
        if trace_path is not None:
            open(trace_path, "w").close()

    def emit(record: dict) -> None:
        trace.append(record)
        if trace_path is not None:
            with open(trace_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    from .evaluate import rmse_missing  # local import to avoid a cycle

    for it in range(start_iteration + 1, config.outer_iterations + 1):
        tick = time.perf_counter()
        flow = reinit_flow(p, config.flow_depth, _derived_seed(config.seed, _SEED_FLOW, it),
                           config.hidden_units)
        if config.em.reinit_each_iteration:
            em_state = None  # next batch bootstraps moments and resets t
        if em_state is not None:
            em_state.outer_iteration = it
        em_state, stats = training_phase(imputed, masks, flow, em_state, config, it)
        imputed = reimputation_phase(imputed, masks, flow, em_state.params)
        record = {"iteration": it, **stats,
                  "seconds": time.perf_counter() - tick}
        if truth is not None and masks.any():
            record["rmse"] = rmse_missing(imputed, truth, masks)
        if holdout_values is not None:
            holdout_values = reimputation_phase(
                holdout_values, holdout_masks, flow, em_state.params
            )
            if holdout_truth is not None and holdout_masks.any():
                record["holdout_rmse"] = rmse_missing(
                    holdout_values, holdout_truth, holdout_masks
                )
        emit(record)

    if em_state is None:
        # outer_iterations == 0: expose moments of the naive imputation
        z0, _ = flow.inverse(imputed[: min(n, max(2, config.batch_size))])
        if z0.shape[0] >= 2:
            em_state = init_from_batch(z0, config.em, outer_iteration=1)
        else:
            em_state = OnlineEmState(
                params=GaussianParams(z0[0], ensure_pd(np.zeros((p, p)))),
                config=config.em,
            )

    holdout_imputed = None
    if holdout_values is not None:
        holdout_imputed = ImputedDataset(holdout_values, MaskMatrix(holdout_masks))
    return ImputationRun(
        imputed=ImputedDataset(imputed, MaskMatrix(masks)),
        flow=flow,
        base=em_state.params,
        em_state=em_state,
        trace=trace,
        holdout_imputed=holdout_imputed,
    )


def save_checkpoint(
    path,
    config: TrainConfig,
    flow: FlowModel,
    em_state: OnlineEmState,
    imputed: np.ndarray,
    mask: np.ndarray,
    completed_iterations: int,
    holdout_imputed: np.ndarray | None = None,
) -> None:
    """Write a resumable engine checkpoint (bit-exact arrays + JSON header)."""
    from .flow import save_flow  # reuse the flow container inside one npz

    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "completed_iterations": completed_iterations,
        "em_t": em_state.t,
        "em_outer_iteration": em_state.outer_iteration,
        "has_buffer": em_state.buffer_rows is not None,
        "has_holdout": holdout_imputed is not None,
    }
    flow_buf = io.BytesIO()
    save_flow(flow_buf, flow)
    arrays = {
        "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        "flow_npz": np.frombuffer(flow_buf.getvalue(), dtype=np.uint8),
        "imputed": imputed,
        "mask": mask.astype(np.int8),
        "base_mean": em_state.params.mean,
        "base_cov": em_state.params.cov,
    }
    if em_state.buffer_rows is not None:
        arrays["buffer_rows"] = em_state.buffer_rows
        arrays["buffer_masks"] = em_state.buffer_masks.astype(np.int8)
    if holdout_imputed is not None:
        arrays["holdout_imputed"] = holdout_imputed
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    from .flow import load_flow

    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta['version']}")
        config = TrainConfig.from_dict(meta["config"])
        flow, _ = load_flow(io.BytesIO(bytes(data["flow_npz"])))
        em_state = OnlineEmState(
            params=GaussianParams(data["base_mean"], data["base_cov"]),
            config=config.em,
            t=meta["em_t"],
            outer_iteration=meta["em_outer_iteration"],
        )
        if meta["has_buffer"]:
            em_state.buffer_rows = data["buffer_rows"]
            em_state.buffer_masks = data["buffer_masks"].astype(bool)
        out = {
            "config": config,
            "flow": flow,
            "em_state": em_state,
            "imputed": data["imputed"],
            "mask": data["mask"].astype(bool),
            "completed_iterations": meta["completed_iterations"],
        }
        if meta["has_holdout"]:
            out["holdout_imputed"] = data["holdout_imputed"]
    return out
