"""Model adapters, evaluation, and the four experiment training loops.

Every model is wrapped to map a block tensor [batch, B, d] to output blocks
[batch, N, d]; digit tasks read each output block directly as 10-class
logits, the image task applies a trainable affine head to one output block.

Randomness is split into independent streams (init, data, routing noise,
eval, probe) spawned from the config seed, so trials are bit-reproducible.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from ..nn import (
    Fnn, FnnConfig, Smfr, SmfrConfig,
    routing_regularization_loss, max_abs_routing_logit,
)
from ..transformer import Transformer, TransformerConfig
from ..optim import AdamState, adam_step, clip_global_norm
from ..checkpoint import save_checkpoint
from ..tasks.batches import TaskBatch, indicator_block
from ..tasks import addmul as addmul_task
from ..tasks import doubleadd as doubleadd_task
from ..tasks import algo as algo_task
from ..tasks import bpmnist as bpmnist_task
from ..tasks.mnist_io import load_mnist
from .config import ExperimentConfig, config_hash
from .metrics import MetricsWriter, results_path

__all__ = [
    "build_model",
    "ModelBundle",
    "evaluate_accuracy",
    "apply_smfr_bias",
    "run_trial",
]

TASK_SHAPES = {
    # experiment -> (input blocks, output blocks, block size)
    "addmul": (3, 1, 10),
    "doubleadd": (5, 1, 10),
    "algo": (6, 5, 10),
}


class SmfrAdapter:
    kind = "smfr"

    def __init__(self, cfg: ExperimentConfig, shape, rng):
        n_in, n_out, d = shape
        self.net = Smfr(SmfrConfig(
            block_size=d,
            input_blocks=n_in,
            output_blocks=n_out,
            stack_width=cfg.model.stack_width,
            stack_depth=cfg.model.stack_depth,
            fnn_hidden=list(cfg.model.fnn_hidden),
            attention=cfg.model.attention,
            no_context=cfg.variants.no_context,
            gumbel_temperature=cfg.model.gumbel_temperature,
        ), rng)

    def forward(self, inputs: np.ndarray, rng=None, eval_mode=False):
        return self.net.forward(Tensor(inputs), rng=rng, eval_mode=eval_mode)

    def parameters(self):
        return self.net.parameters()


class FnnAdapter:
    kind = "fnn"

    def __init__(self, cfg: ExperimentConfig, shape, rng):
        n_in, n_out, d = shape
        self.shape = shape
        self.net = Fnn(rng, FnnConfig(n_in * d, n_out * d, list(cfg.model.hidden_widths)))

    def forward(self, inputs: np.ndarray, rng=None, eval_mode=False):
        n_in, n_out, d = self.shape
        x = Tensor(inputs.reshape(inputs.shape[0], n_in * d))
        out = self.net.forward(x)
        return T.reshape(out, (inputs.shape[0], n_out, d)), []

    def parameters(self):
        return self.net.parameters()


class TransformerAdapter:
    kind = "transformer"

    def __init__(self, cfg: ExperimentConfig, shape, rng):
        n_in, n_out, d = shape
        self.net = Transformer(TransformerConfig(
            block_size=d,
            input_blocks=n_in,
            output_blocks=n_out,
            model_width=cfg.model.model_width,
            num_heads=cfg.model.num_heads,
            num_encoder_layers=cfg.model.encoder_layers,
            num_decoder_layers=cfg.model.decoder_layers,
            ffn_width=cfg.model.ffn_width,
        ), rng)

    def forward(self, inputs: np.ndarray, rng=None, eval_mode=False):
        return self.net.forward(Tensor(inputs)), []

    def parameters(self):
        return self.net.parameters()


_ADAPTERS = {"smfr": SmfrAdapter, "fnn": FnnAdapter, "transformer": TransformerAdapter}


class ModelBundle:
    """A wrapped model plus optional classifier head and its optimizer."""

    def __init__(self, cfg: ExperimentConfig, shape, init_rng):
        self.cfg = cfg
        self.shape = shape
        self.model = _ADAPTERS[cfg.model.kind](cfg, shape, init_rng)
        self.head = None
        if cfg.experiment == "bpmnist":
            d = shape[2]
            self.head = Fnn(init_rng, FnnConfig(d, 10, []), name="head")
        self.params = dict(self.model.parameters())
        if self.head is not None:
            self.params.update(self.head.parameters())
        self.opt = AdamState(
            list(self.params.values()),
            learning_rate=cfg.optimizer.learning_rate,
            beta1=cfg.optimizer.beta1,
            beta2=cfg.optimizer.beta2,
            epsilon=cfg.optimizer.epsilon,
        )

    def forward(self, inputs, rng=None, eval_mode=False):
        return self.model.forward(inputs, rng=rng, eval_mode=eval_mode)

    def logits(self, out_blocks: Tensor) -> Tensor:
        """Classification logits: blocks directly for digit tasks, affine head
        over one block for the image task."""
        if self.head is None:
            return out_blocks
        block = T.slice_axis(out_blocks, 1, self.cfg.bpmnist.head_from_block,
                             self.cfg.bpmnist.head_from_block + 1)
        flat = T.reshape(block, (out_blocks.shape[0], self.shape[2]))
        return self.head.forward(flat)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def step(self, loss: Tensor) -> None:
        loss.backward(params=list(self.params.values()))
        clip_global_norm(list(self.params.values()), self.cfg.clip_norm)
        adam_step(self.opt)


def build_model(cfg: ExperimentConfig, init_rng, shape=None) -> ModelBundle:
    if shape is None:
        if cfg.experiment == "bpmnist":
            n_in = 5 if cfg.bpmnist.indicator else 4
            shape = (n_in, 1, bpmnist_task.BLOCK_SIZE)
        else:
            shape = TASK_SHAPES[cfg.experiment]
    return ModelBundle(cfg, shape, init_rng)


def block_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean CE over every target block; logits [b, N, d] or [b, d]."""
    if len(logits.shape) == 3:
        b, n, d = logits.shape
        flat = T.reshape(logits, (b * n, d))
        return T.cross_entropy_loss(flat, targets.reshape(-1))
    return T.cross_entropy_loss(logits, targets.reshape(-1))


def predictions(logits: Tensor) -> np.ndarray:
    data = logits.data
    if data.ndim == 3:
        return np.argmax(data, axis=2)
    return np.argmax(data, axis=1)[:, None]


def evaluate_accuracy(predict_fn, batches, chunk: int = 2500) -> float:
    """Fraction of examples with every target block predicted correctly."""
    if isinstance(batches, TaskBatch):
        batches = [batches]
    total = 0
    correct = 0
    for batch in batches:
        n = batch.size
        if n == 0:
            continue
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            pred = predict_fn(batch.inputs[lo:hi])
            want = batch.targets[lo:hi]
            if pred.shape != want.shape:
                raise ValueError(f"prediction shape {pred.shape} vs target {want.shape}")
            correct += int(np.all(pred == want, axis=1).sum())
            total += hi - lo
    if total == 0:
        raise ValueError("evaluation set is empty")
    return correct / total


def make_predict(bundle: ModelBundle):
    def predict(inputs: np.ndarray) -> np.ndarray:
        out, _ = bundle.forward(inputs, eval_mode=True)
        return predictions(bundle.logits(out))
    return predict


def apply_smfr_bias(traces, perm_ids: np.ndarray, pset, step: int,
                    model_kind: str = "smfr") -> Tensor:
    """Routing bias for the image task, active for the first 300 steps.

    Cross-entropy pushing layer-0 Multiplexer columns n < 4 toward one-hot
    routing of input block perm^-1(n), the routing that undoes the band
    permutation.  Returns exactly zero from step 300 on.
    """
    if model_kind != "smfr":
        raise ValueError("the routing bias applies only to block-routing models")
    weights = traces[0].mux_weights
    b, m, n_out = weights.shape
    n_bias = min(n_out, bpmnist_task.NUM_BANDS)
    if step >= 300:
        return Tensor(np.zeros(()))
    target = np.zeros((b, m, n_out))
    inverses = {pid: np.argsort(pset.perms[pid]) for pid in np.unique(perm_ids)}
    for i, pid in enumerate(perm_ids):
        inv = inverses[int(pid)]
        for n in range(n_bias):
            target[i, inv[n], n] = 1.0
    picked = T.sum_all(Tensor(target) * T.log(weights + 1e-12))
    return picked * (-1.0 / (b * n_bias))


def _spawn_rngs(seed: int):
    streams = np.random.SeedSequence(seed).spawn(5)
    names = ("init", "data", "routing", "eval", "probe")
    return {name: np.random.default_rng(s) for name, s in zip(names, streams)}


def _train_forward(bundle: ModelBundle, inputs: np.ndarray, rngs):
    return bundle.forward(inputs, rng=rngs["routing"], eval_mode=False)


def _loss_with_regularization(cfg: ExperimentConfig, task_loss: Tensor, traces):
    if cfg.regularization.enabled and traces:
        reg = routing_regularization_loss(traces, cfg.regularization.threshold)
        return task_loss + reg, float(reg.data)
    return task_loss, 0.0


class _EarlyStop:
    """Stop after N consecutive full-accuracy evaluations; 0 disables."""

    def __init__(self, needed: int):
        self.needed = needed
        self.streak = 0

    def update(self, train_accuracy: float) -> bool:
        if self.needed == 0:
            return False
        self.streak = self.streak + 1 if train_accuracy >= 1.0 else 0
        return self.streak >= self.needed


def run_addmul(cfg: ExperimentConfig, writer: MetricsWriter) -> dict:
    rngs = _spawn_rngs(cfg.seed)
    bundle = build_model(cfg, rngs["init"])
    predict = make_predict(bundle)
    alt = cfg.variants.alternate_split

    stage1_set = addmul_task.exhaustive_batch(addmul_task.stage_training_set("preparation", alt))
    prep_pairs = addmul_task.preparation_only_pairs(alt)
    prep_set = addmul_task.exhaustive_batch([(a, b, "add") for a, b in prep_pairs])

    max_logit = 0.0
    switched_at = None
    step = 0
    # preparation stage: train until the exhaustive stage set clears threshold
    while step < cfg.max_steps:
        batch = addmul_task.gen_addmul_batch("preparation", cfg.batch_size, rngs["data"], alt)
        out, traces = _train_forward(bundle, batch.inputs, rngs)
        loss = block_cross_entropy(bundle.logits(out), batch.targets)
        total, reg_value = _loss_with_regularization(cfg, loss, traces)
        bundle.step(total)
        if traces:
            max_logit = max(max_logit, max_abs_routing_logit(traces))
        step += 1
        if step % cfg.eval_every == 0:
            acc = evaluate_accuracy(predict, stage1_set)
            writer.write({"record": "metrics", "step": step, "stage": "preparation",
                          "train_accuracy": acc, "loss": float(loss.data),
                          "regularization_loss": reg_value, "max_routing_logit": max_logit})
            if acc >= cfg.threshold:
                switched_at = step
                break
    if switched_at is None:
        final_prep = evaluate_accuracy(predict, prep_set)
        return {"completed": False, "reason": "threshold_not_reached",
                "preparation_data_accuracy": final_prep, "switched_at": None,
                "steps": step, "max_routing_logit": max_logit, "_bundle": bundle}

    # interference stage: fixed number of steps on the inverted distribution
    for k in range(cfg.interference_steps):
        batch = addmul_task.gen_addmul_batch("interference", cfg.batch_size, rngs["data"], alt)
        out, traces = _train_forward(bundle, batch.inputs, rngs)
        loss = block_cross_entropy(bundle.logits(out), batch.targets)
        total, reg_value = _loss_with_regularization(cfg, loss, traces)
        bundle.step(total)
        if traces:
            max_logit = max(max_logit, max_abs_routing_logit(traces))
        step += 1
        if (k + 1) % cfg.eval_every == 0 or k + 1 == cfg.interference_steps:
            prep_acc = evaluate_accuracy(predict, prep_set)
            writer.write({"record": "metrics", "step": step, "stage": "interference",
                          "preparation_data_accuracy": prep_acc, "loss": float(loss.data),
                          "regularization_loss": reg_value, "max_routing_logit": max_logit})
    final_prep = evaluate_accuracy(predict, prep_set)
    return {"completed": True, "reason": None, "preparation_data_accuracy": final_prep,
            "switched_at": switched_at, "steps": step, "max_routing_logit": max_logit,
            "_bundle": bundle}


def run_doubleadd(cfg: ExperimentConfig, writer: MetricsWriter) -> dict:
    rngs = _spawn_rngs(cfg.seed)
    bundle = build_model(cfg, rngs["init"])
    predict = make_predict(bundle)
    alt = cfg.variants.alternate_split

    train_set = doubleadd_task.doubleadd_train_set(alt)
    ood_set = doubleadd_task.doubleadd_ood_set(alt)
    out_of_range = ood_set.metadata["out_of_range"]
    ood_splits = {
        # exactly one digit outside its trained range vs. the swapped quadrant
        "ood_one_sided_accuracy": 1,
        "ood_swapped_accuracy": 2,
    }
    split_sets = {name: TaskBatch(ood_set.inputs[out_of_range == k],
                                  ood_set.targets[out_of_range == k])
                  for name, k in ood_splits.items()}

    stopper = _EarlyStop(cfg.early_stop_evals)
    max_logit = 0.0
    ood_curve = []
    train_acc = 0.0
    ood_acc = 0.0
    step = 0
    while step < cfg.max_steps:
        batch = doubleadd_task.gen_doubleadd_batch(cfg.batch_size, rngs["data"], alt)
        out, traces = _train_forward(bundle, batch.inputs, rngs)
        loss = block_cross_entropy(bundle.logits(out), batch.targets)
        total, reg_value = _loss_with_regularization(cfg, loss, traces)
        bundle.step(total)
        if traces:
            max_logit = max(max_logit, max_abs_routing_logit(traces))
        step += 1
        if step % cfg.eval_every == 0:
            train_acc = evaluate_accuracy(predict, train_set)
            ood_acc = evaluate_accuracy(predict, ood_set)
            ood_curve.append(ood_acc)
            writer.write({"record": "metrics", "step": step,
                          "train_accuracy": train_acc, "ood_accuracy": ood_acc,
                          "loss": float(loss.data), "regularization_loss": reg_value,
                          "max_routing_logit": max_logit})
            if stopper.update(train_acc):
                break
    # stability of generalization: once at 1.0, the curve must not fall back
    reached = [i for i, v in enumerate(ood_curve) if v >= 1.0]
    never_dropped = all(v >= 1.0 for v in ood_curve[reached[0]:]) if reached else True
    summary = {"completed": True, "reason": None, "steps": step,
               "train_accuracy": train_acc, "ood_accuracy": ood_acc,
               "ood_reached_one": bool(reached), "ood_never_dropped": never_dropped,
               "max_routing_logit": max_logit, "_bundle": bundle}
    for name, subset in split_sets.items():
        summary[name] = evaluate_accuracy(predict, subset)
    return summary


def _algo_unroll(bundle: ModelBundle, episode, rngs=None, eval_mode=False,
                 neuron_perm=None, loss_targets=None):
    """Run the model recurrently over an episode: raw output blocks feed back
    as the next state, the rule indicator is replaced each iteration.
    Returns (final blocks, per-step losses if requested, last traces)."""
    from ..tasks.batches import one_hot

    batch = episode.states.shape[0]
    perm_matrix = None
    if neuron_perm is not None:
        # scrambled[:, j] = flat[:, perm[j]], as a fixed matrix product
        perm_matrix = Tensor(np.eye(algo_task.INPUT_NEURONS)[:, neuron_perm].copy())
    state = Tensor(np.stack([one_hot(episode.initial[:, i], algo_task.BLOCK_SIZE)
                             for i in range(algo_task.NUM_VARS)], axis=1))
    losses = []
    traces = []
    for t in range(episode.num_iterations):
        ind = Tensor(indicator_block(episode.rule_ids[:, t], algo_task.NUM_RULES,
                                     algo_task.BLOCK_SIZE)[:, None, :])
        inputs = T.concat([state, ind], axis=1)
        if perm_matrix is not None:
            flat = T.reshape(inputs, (batch, algo_task.INPUT_NEURONS))
            inputs = T.reshape(T.matmul(flat, perm_matrix),
                               (batch, algo_task.NUM_VARS + 1, algo_task.BLOCK_SIZE))
        rng = None if eval_mode else (rngs["routing"] if rngs else None)
        out, tr = bundle_forward_tensor(bundle, inputs, rng, eval_mode)
        traces = tr
        if loss_targets is not None:
            losses.append(block_cross_entropy(out, loss_targets[:, t + 1]))
        state = out
    return state, losses, traces


def bundle_forward_tensor(bundle: ModelBundle, inputs: Tensor, rng, eval_mode):
    """Forward that keeps the input on the autodiff graph (recurrent reuse)."""
    model = bundle.model
    if isinstance(model, SmfrAdapter):
        return model.net.forward(inputs, rng=rng, eval_mode=eval_mode)
    if isinstance(model, FnnAdapter):
        n_in, n_out, d = model.shape
        out = model.net.forward(T.reshape(inputs, (inputs.shape[0], n_in * d)))
        return T.reshape(out, (inputs.shape[0], n_out, d)), []
    return model.net.forward(inputs), []


def run_algo(cfg: ExperimentConfig, writer: MetricsWriter) -> dict:
    rngs = _spawn_rngs(cfg.seed)
    bundle = build_model(cfg, rngs["init"])
    neuron_perm = (algo_task.draw_neuron_permutation(rngs["init"])
                   if cfg.variants.noisy_permutation else None)

    eval_episodes = {n: algo_task.gen_algo_episode(500, n, rngs["eval"]) for n in range(1, 10)}

    def eval_iteration(n: int) -> float:
        ep = eval_episodes[n]
        final, _, _ = _algo_unroll(bundle, ep, eval_mode=True, neuron_perm=neuron_perm)
        pred = np.argmax(final.data, axis=2)
        return float(np.all(pred == ep.final, axis=1).mean())

    stopper = _EarlyStop(cfg.early_stop_evals)
    max_logit = 0.0
    step = 0
    train_acc = 0.0
    while step < cfg.max_steps:
        episode = algo_task.gen_algo_episode(cfg.batch_size, 2, rngs["data"])
        loss_targets = episode.states if cfg.loss_per_step else None
        final, step_losses, traces = _algo_unroll(bundle, episode, rngs=rngs,
                                                  eval_mode=False, neuron_perm=neuron_perm,
                                                  loss_targets=loss_targets)
        if cfg.loss_per_step:
            loss = step_losses[0]
            for extra in step_losses[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(step_losses))
        else:
            loss = block_cross_entropy(final, episode.final)
        total, reg_value = _loss_with_regularization(cfg, loss, traces)
        bundle.step(total)
        if traces:
            max_logit = max(max_logit, max_abs_routing_logit(traces))
        step += 1
        if step % cfg.eval_every == 0:
            train_acc = eval_iteration(2)
            record = {"record": "metrics", "step": step, "train_accuracy": train_acc,
                      "accuracy_iter_4": eval_iteration(4), "loss": float(loss.data),
                      "regularization_loss": reg_value, "max_routing_logit": max_logit}
            if step % cfg.full_eval_every == 0:
                for n in range(1, 10):
                    record[f"accuracy_iter_{n}"] = eval_iteration(n)
            writer.write(record)
            if stopper.update(train_acc):
                break
    per_iter = {n: eval_iteration(n) for n in range(1, 10)}
    ood_even = float(np.mean([per_iter[n] for n in (4, 6, 8)]))
    ood_odd = float(np.mean([per_iter[n] for n in (1, 3, 5, 7, 9)]))
    summary = {"completed": True, "reason": None, "steps": step,
               "train_accuracy": per_iter[2], "ood_even": ood_even, "ood_odd": ood_odd,
               "validation_accuracy": per_iter[4], "max_routing_logit": max_logit,
               "_bundle": bundle}
    summary.update({f"accuracy_iter_{n}": v for n, v in per_iter.items()})
    return summary


def run_bpmnist(cfg: ExperimentConfig, writer: MetricsWriter, mnist=None,
                results_prefix: str | None = None) -> dict:
    from .. import inspection

    rngs = _spawn_rngs(cfg.seed)
    if mnist is None:
        mnist = load_mnist(cfg.data_dir or None)
    pset = bpmnist_task.build_permutation_set(rngs["init"])
    bundle = build_model(cfg, rngs["init"])
    predict = make_predict(bundle)
    indicator = cfg.bpmnist.indicator

    marks = sorted({min(cfg.max_steps, max(1, round(25000 * cfg.bpmnist.scale))),
                    min(cfg.max_steps, max(1, round(250000 * cfg.bpmnist.scale)))})
    last_step = marks[-1]

    val_sets = bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"], mnist["test_labels"],
                                              "validation", indicator)
    test_sets = bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"], mnist["test_labels"],
                                               "test", indicator)
    holdout_sets = bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"], mnist["test_labels"],
                                                  "holdout", indicator)
    sub_val = bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"], mnist["test_labels"],
                                             "validation", indicator,
                                             limit=cfg.bpmnist.eval_subset, rng=rngs["eval"])
    train_eval = bpmnist_task.gen_bpmnist_train_batch(
        pset, mnist["train_images"], mnist["train_labels"],
        min(cfg.bpmnist.eval_subset * 4, len(mnist["train_labels"])), rngs["eval"], indicator)
    probe = bpmnist_task.gen_bpmnist_train_batch(
        pset, mnist["train_images"], mnist["train_labels"],
        cfg.bpmnist.probe_size, rngs["probe"], indicator)

    def probe_difference() -> float:
        groups = bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"][:256],
                                                mnist["test_labels"][:256], "validation", indicator)
        groups += bpmnist_task.bpmnist_eval_sets(pset, mnist["test_images"][:256],
                                                 mnist["test_labels"][:256], "test", indicator)
        return inspection.permutation_difference(bundle, groups)

    indicator_rows = []
    initial_diff = probe_difference()
    checkpoint_metrics = {}
    max_logit = 0.0
    step = 0
    while step < last_step:
        batch = bpmnist_task.gen_bpmnist_train_batch(pset, mnist["train_images"],
                                                     mnist["train_labels"], cfg.batch_size,
                                                     rngs["data"], indicator)
        out, traces = _train_forward(bundle, batch.inputs, rngs)
        loss = block_cross_entropy(bundle.logits(out), batch.targets)
        total, reg_value = _loss_with_regularization(cfg, loss, traces)
        if cfg.variants.bias:
            bias = apply_smfr_bias(traces, batch.metadata["perm_id"], pset, step,
                                   cfg.model.kind)
            total = total + bias
        bundle.step(total)
        if traces:
            max_logit = max(max_logit, max_abs_routing_logit(traces))
        step += 1
        if step % cfg.eval_every == 0:
            train_acc = evaluate_accuracy(predict, train_eval)
            val_acc = evaluate_accuracy(predict, sub_val)
            writer.write({"record": "metrics", "step": step, "train_accuracy": train_acc,
                          "validation_accuracy": val_acc, "loss": float(loss.data),
                          "regularization_loss": reg_value, "max_routing_logit": max_logit})
        if step in marks:
            metrics = {
                "train_accuracy": evaluate_accuracy(predict, train_eval),
                "validation_accuracy": evaluate_accuracy(predict, val_sets),
                "test_accuracy": evaluate_accuracy(predict, test_sets),
                "holdout_accuracy": evaluate_accuracy(predict, holdout_sets),
                "permutation_difference": probe_difference(),
            }
            if cfg.model.kind == "smfr":
                trace = inspection.extract_routing_trace(bundle, probe.inputs)
                metrics["attention_sharpness"] = inspection.attention_sharpness(trace)
                metrics["attention_fairness"] = inspection.attention_fairness(trace)
                indicator_rows.append({"step": step,
                                       "sharpness": metrics["attention_sharpness"],
                                       "permutation_difference": metrics["permutation_difference"],
                                       "fairness": metrics["attention_fairness"],
                                       **inspection.gate_summary(trace, flat=True)})
            checkpoint_metrics[step] = metrics
            writer.write({"record": "checkpoint", "step": step, **metrics})
            if results_prefix:
                save_checkpoint(f"{results_prefix}_step{step}.ckpt", bundle.params,
                                {"config": cfg.to_dict(), "step": step})
    if results_prefix and indicator_rows:
        inspection.write_indicator_csv(f"{results_prefix}_indicators.csv", indicator_rows)
    early, late = marks[0], marks[-1]
    return {"completed": True, "reason": None, "steps": step,
            "scale": cfg.bpmnist.scale, "checkpoint_marks": marks,
            "initial_permutation_difference": initial_diff,
            "early": checkpoint_metrics.get(early, {}),
            "late": checkpoint_metrics.get(late, {}),
            "max_routing_logit": max_logit,
            "holdout_digits": {str(k): v for k, v in pset.holdout.items()},
            "_bundle": bundle}


_RUNNERS = {"addmul": run_addmul, "doubleadd": run_doubleadd,
            "algo": run_algo, "bpmnist": run_bpmnist}


def run_trial(cfg: ExperimentConfig, mnist=None) -> dict:
    """Run one seeded trial end to end, writing results/<exp>/<hash>/<seed>.jsonl.

    Returns the final summary record (also the last line of the file)."""
    cfg.validate()
    h = config_hash(cfg)
    path = results_path(cfg.results_dir, cfg.experiment, h, cfg.seed)
    writer = MetricsWriter(path)
    started = time.time()
    rngs = _spawn_rngs(cfg.seed)
    bundle = build_model(cfg, rngs["init"])
    header = {"record": "header", "config": cfg.to_dict(), "config_hash": h,
              "parameter_count": bundle.num_parameters()}
    del bundle, rngs
    writer.write(header)
    prefix = os.path.join(os.path.dirname(path), str(cfg.seed))
    try:
        if cfg.experiment == "bpmnist":
            summary = run_bpmnist(cfg, writer, mnist=mnist, results_prefix=prefix)
        else:
            summary = _RUNNERS[cfg.experiment](cfg, writer)
    except BaseException:
        writer.abort()
        raise
    bundle = summary.pop("_bundle", None)
    if bundle is not None:
        save_checkpoint(f"{prefix}_final.ckpt", bundle.params,
                        {"config": cfg.to_dict(), "step": summary.get("steps")})
    summary = {"record": "final", "config_hash": h, "seed": cfg.seed,
               "parameter_count": header["parameter_count"],
               "wall_time_s": round(time.time() - started, 3), **summary}
    writer.write(summary)
    writer.finalize()
    return summary
