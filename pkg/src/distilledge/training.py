"""Two-stage compression training.

Stage one pre-trains the full (teacher) classifier conventionally; stage two
trains the compressed (student) model under the weighted composite objective
with frozen-teacher supervision: per-token embedding mapping and final
latent mapping through two autoencoders, temperature-softened label
distillation, autoencoder reconstruction, and the aspect-based interpretable
term. Ablation switches drop individual terms.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Sequence

import torch

from . import losses as L
from .checkpoint import load_model
from .corpus import EncodedExample, RawExample, Vocabulary
from .errors import ConfigError, DistilledgeError
from .models import Autoencoder, ModelConfig, SequenceClassifier
from .utils import minibatch_indices, new_generator

logger = logging.getLogger(__name__)

# keeps the auxiliary (autoencoder) init stream independent of the student's
AUX_SEED_OFFSET = 7919

DESK_SCALE_MIN_FULL_DIM = 16

TASK_LOSSES = ("ce", "gce")


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.001
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 5  # early stopping on validation accuracy; 0 disables
    task_loss: str = "gce"
    use_embedding_map: bool = True
    use_latent_map: bool = True
    use_label_distill: bool = True
    use_autoencoder: bool = True
    use_interpretable: bool = True
    # epoch after which aspect embeddings are re-anchored to per-aspect mean
    # hidden states (0 disables); only active with the interpretable term
    aspect_anchor_epoch: int = 1
    head_only: bool = False
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("epochs/batch_size/patience out of range")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.task_loss not in TASK_LOSSES:
            raise ConfigError(f"task_loss must be one of {TASK_LOSSES}")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is wired up")

    def conventional(self) -> "TrainPlan":
        """A copy with every teacher-supervision term switched off."""
        return replace(
            self, use_embedding_map=False, use_latent_map=False,
            use_label_distill=False, use_autoencoder=False, use_interpretable=False,
        )


@dataclass
class TrainingRun:
    model: SequenceClassifier
    history: list[dict]
    best_epoch: int | None
    best_val_accuracy: float
    diverged: bool = False
    stopped_early: bool = False


def tensorize(examples: Sequence[EncodedExample]):
    """Stack encoded examples into (ids, lengths, labels, aspects) tensors.

    Absent aspects become -1.
    """
    if not examples:
        raise ValueError("no examples to tensorize")
    width = len(examples[0].token_ids)
    if any(len(ex.token_ids) != width for ex in examples):
        raise ValueError("examples must share one padded width")
    ids = torch.tensor([ex.token_ids for ex in examples], dtype=torch.long)
    lengths = torch.tensor([ex.length for ex in examples], dtype=torch.long)
    labels = torch.tensor([ex.label for ex in examples], dtype=torch.long)
    aspects = torch.tensor(
        [-1 if ex.aspect is None else ex.aspect for ex in examples], dtype=torch.long
    )
    return ids, lengths, labels, aspects


@torch.no_grad()
def accuracy(model: SequenceClassifier, examples: Sequence[EncodedExample],
             batch_size: int = 256) -> float:
    ids, lengths, labels, _ = tensorize(examples)
    correct = 0
    for start in range(0, len(examples), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.predict_logits(ids[sl], lengths[sl])
        correct += int((logits.argmax(dim=1) == labels[sl]).sum())
    return correct / len(examples)


def _task_loss(plan: TrainPlan, logits, labels):
    if plan.task_loss == "ce":
        return L.ce_loss(logits, labels)
    return L.gce_loss(logits, labels, plan.weights.alpha)


@torch.no_grad()
def _anchor_aspect_embeddings(model: SequenceClassifier, ids, lengths, aspects) -> None:
    """Anchor each aspect embedding to the mean hidden state of its examples.

    Slot-j attention is permutation-symmetric under the interpretable loss
    alone; anchoring ties slot j to the examples annotated with aspect j so
    that the hit-ratio measures alignment against the ground-truth indexing.
    """
    hidden = []
    for start in range(0, len(ids), 256):
        sl = slice(start, start + 256)
        hidden.append(model.forward(ids[sl], lengths[sl]).hidden)
    hidden = torch.cat(hidden)
    for j in range(model.config.num_aspects):
        mask = aspects == j
        if bool(mask.any()):
            model.aspect_embeddings[j] = hidden[mask].mean(dim=0)


def _fit(
    config: ModelConfig,
    plan: TrainPlan,
    train_data: Sequence[EncodedExample],
    val_data: Sequence[EncodedExample] | None,
    teacher: SequenceClassifier | None = None,
    initial_state: dict | None = None,
) -> TrainingRun:
    """Shared training loop for both stages.

    Without a teacher the objective is the plain task loss (conventional
    training); with one it is the weighted composite over the active
    ablation flags. The best-validation-accuracy state is restored at the
    end; on a non-finite loss the run aborts with the last finite epoch
    retained.
    """
    model = SequenceClassifier(config, new_generator(config.seed))
    if initial_state is not None:
        model.load_state_dict(copy.deepcopy(initial_state))

    ids, lengths, labels, aspects = tensorize(train_data)

    want_embedding = teacher is not None and (plan.use_embedding_map or plan.use_autoencoder)
    want_latent = teacher is not None and (plan.use_latent_map or plan.use_autoencoder)
    need_teacher = teacher is not None and (
        plan.use_embedding_map or plan.use_latent_map
        or plan.use_label_distill or plan.use_autoencoder
    )
    ae_embed = ae_latent = None
    if teacher is not None:
        aux = new_generator(config.seed + AUX_SEED_OFFSET)
        if want_embedding:
            ae_embed = Autoencoder(teacher.config.embedding_dim, config.embedding_dim, aux)
        if want_latent:
            ae_latent = Autoencoder(teacher.config.hidden_size, config.hidden_size, aux)

    use_interp = (
        teacher is not None and plan.use_interpretable
        and config.has_aspect_head and bool((aspects >= 0).any())
    )

    if plan.head_only:
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith("head_"))
    trainable = [p for p in model.parameters() if p.requires_grad]
    for ae in (ae_embed, ae_latent):
        if ae is not None:
            trainable.extend(ae.parameters())
    optimizer = torch.optim.Adam(trainable, lr=plan.learning_rate)

    batch_rng = new_generator(plan.seed)
    history: list[dict] = []
    best_state = None
    best_epoch = None
    best_val = -math.inf
    epochs_since_best = 0
    diverged = False
    stopped_early = False
    last_good_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, plan.epochs + 1):
        sums = {name: 0.0 for name in L.LossBreakdown.TERMS}
        seen = 0
        for batch in minibatch_indices(len(train_data), plan.batch_size, batch_rng):
            b_ids, b_len, b_lab = ids[batch], lengths[batch], labels[batch]
            b_asp = aspects[batch]
            out = model.forward(b_ids, b_len, with_aspects=use_interp)
            task = _task_loss(plan, out.logits, b_lab)

            em = lm = ld = ae = interp = 0.0
            if need_teacher:
                with torch.no_grad():
                    t_out = teacher.forward(b_ids, b_len)
                live = (torch.arange(b_ids.shape[1])[None, :] < b_len[:, None])
                if want_embedding:
                    z_e = ae_embed.encode(t_out.embeddings)
                    if plan.use_embedding_map:
                        em = L.feature_map_loss(z_e[live], out.embeddings[live])
                if want_latent:
                    z_h = ae_latent.encode(t_out.hidden)
                    if plan.use_latent_map:
                        lm = L.feature_map_loss(z_h, out.hidden)
                if plan.use_label_distill:
                    ld = L.distill_loss(t_out.logits, out.logits, plan.weights.temperature)
                if plan.use_autoencoder:
                    ae = L.ae_loss(
                        t_out.embeddings[live], ae_embed.decode(z_e)[live],
                        t_out.hidden, ae_latent.decode(z_h),
                    )
            if use_interp:
                interp = L.interpretable_loss(out.aspect_feature, out.hidden, b_asp >= 0)

            if teacher is not None:
                breakdown = L.composite_loss(task, em, lm, ld, ae, interp, plan.weights)
            else:
                breakdown = L.LossBreakdown(task, 0.0, 0.0, 0.0, 0.0, 0.0, task)

            total = breakdown.total
            if not torch.isfinite(total):
                logger.warning("non-finite loss at epoch %d; aborting with last finite epoch", epoch)
                model.load_state_dict(last_good_state)
                diverged = True
                break
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            n_b = len(batch)
            seen += n_b
            for name, value in breakdown.floats().items():
                sums[name] += value * n_b
        if diverged:
            break

        # anchoring before validation so the epoch snapshot includes it
        if use_interp and teacher is not None and plan.aspect_anchor_epoch == epoch:
            _anchor_aspect_embeddings(model, ids, lengths, aspects)

        row = {"epoch": epoch}
        row.update({name: sums[name] / max(seen, 1) for name in L.LossBreakdown.TERMS})
        val_acc = accuracy(model, val_data) if val_data else None
        row["val_accuracy"] = val_acc
        history.append(row)

        if val_acc is not None:
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if plan.patience and epochs_since_best >= plan.patience:
                    stopped_early = True
        last_good_state = copy.deepcopy(model.state_dict())
        if stopped_early:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainingRun(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_accuracy=best_val if best_state is not None else float("nan"),
        diverged=diverged,
        stopped_early=stopped_early,
    )


def train_conventional(
    config: ModelConfig,
    plan: TrainPlan,
    train_data: Sequence[EncodedExample],
    val_data: Sequence[EncodedExample] | None,
) -> TrainingRun:
    """Plain task-loss training, the 'conventional training scheme' baseline."""
    return _fit(config, plan, train_data, val_data, teacher=None)


def pretrain_full(
    config: ModelConfig,
    plan: TrainPlan,
    train_data: Sequence[EncodedExample],
    val_data: Sequence[EncodedExample] | None,
) -> TrainingRun:
    """Stage one: conventionally pre-train the full (teacher) model."""
    if config.embedding_dim != config.hidden_size:
        raise ConfigError("the full preset uses equal embedding and hidden sizes")
    if config.hidden_size < DESK_SCALE_MIN_FULL_DIM:
        raise ConfigError(
            f"full model needs embedding_dim = hidden_size >= {DESK_SCALE_MIN_FULL_DIM}"
        )
    return train_conventional(config, plan, train_data, val_data)


def train_compressed(
    full_ckpt: str | Path | SequenceClassifier,
    config: ModelConfig,
    plan: TrainPlan,
    train_data: Sequence[EncodedExample],
    val_data: Sequence[EncodedExample] | None,
) -> TrainingRun:
    """Stage two: train the compressed model against the frozen teacher."""
    teacher = full_ckpt if isinstance(full_ckpt, SequenceClassifier) else load_model(full_ckpt)
    if teacher.config.vocab_size != config.vocab_size:
        raise DistilledgeError(
            "teacher/student vocab mismatch: "
            f"{teacher.config.vocab_size} vs {config.vocab_size} (shared vocabulary required)"
        )
    if teacher.config.num_classes != config.num_classes:
        raise DistilledgeError("teacher and student must share the class set")
    if teacher.config.max_len != config.max_len:
        raise DistilledgeError("teacher and student must share max_len")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return _fit(config, plan, train_data, val_data, teacher=teacher)


DEFAULT_ABLATION_VARIANTS: dict[str, dict] = {
    "w/o Embedding": {"use_embedding_map": False},
    "w/o Latent": {"use_latent_map": False},
    "w/o Label": {"use_label_distill": False},
    "All": {},
}


def _ablation_cell(args: tuple) -> dict:
    (name, flags, seed, ckpt_path, config, plan, train_data, val_data, test_data,
     raw_test, vocab_tokens, attack, attack_kwargs, n_attack_samples) = args
    torch.set_num_threads(1)
    cell_plan = replace(plan, seed=seed, **flags)
    cell_config = replace(config, seed=seed)
    run = train_compressed(ckpt_path, cell_config, cell_plan, train_data, val_data)

    from .evalreport import evaluate, evaluate_adversarial

    clean = evaluate(run.model, test_data)
    row = {
        "variant": name, "seed": seed,
        "accuracy": clean.accuracy, "macro_f1": clean.macro_f1,
        "adv_accuracy": None, "adv_f1": None, "attack": attack,
    }
    if attack is not None:
        from .attacks import AttackTarget, run_attack_suite

        vocab = Vocabulary(vocab_tokens)
        target = AttackTarget(run.model, vocab)
        suite = run_attack_suite(
            target, raw_test, attack, n_samples=n_attack_samples, seed=seed,
            **(attack_kwargs or {}),
        )
        adv = evaluate_adversarial(run.model, vocab, suite.examples, suite.meta)
        row["adv_accuracy"] = adv.accuracy
        row["adv_f1"] = adv.macro_f1
    return row


def run_ablation(
    full_ckpt: str | Path,
    config: ModelConfig,
    plan: TrainPlan,
    train_data: Sequence[EncodedExample],
    val_data: Sequence[EncodedExample],
    test_data: Sequence[EncodedExample],
    seeds: Sequence[int],
    variants: dict[str, dict] | None = None,
    raw_test: Sequence[RawExample] | None = None,
    vocab: Vocabulary | None = None,
    attack: str | None = None,
    attack_kwargs: dict | None = None,
    n_attack_samples: int = 200,
    jobs: int = 1,
) -> list[dict]:
    """Train and score every (variant, seed) cell of the ablation grid."""
    if variants is None:
        variants = DEFAULT_ABLATION_VARIANTS
    if not variants:
        raise ValueError("empty ablation grid")
    if len(seeds) < 2:
        raise ValueError("run_ablation needs at least 2 seeds")
    if attack is not None and (raw_test is None or vocab is None):
        raise ValueError("adversarial ablation needs raw_test and vocab")

    cells = [
        (name, flags, seed, str(full_ckpt), config, plan, list(train_data),
         list(val_data), list(test_data), None if raw_test is None else list(raw_test),
         None if vocab is None else vocab.tokens, attack, attack_kwargs, n_attack_samples)
        for name, flags in variants.items()
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_cell, cells))
    else:
        rows = [_ablation_cell(cell) for cell in cells]
    return rows


def write_history_csv(history: list[dict], path: str | Path) -> None:
    columns = ["epoch", *L.LossBreakdown.TERMS, "val_accuracy"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k) for k in columns})


def plan_to_dict(plan: TrainPlan) -> dict:
    obj = asdict(plan)
    obj["weights"] = asdict(plan.weights)
    return obj
