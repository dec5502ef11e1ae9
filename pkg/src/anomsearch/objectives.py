"""Training objectives: contrastive alignment, hard-negative-enhanced
image-text matching, masked-token prediction, and the training loop that
optimizes their unweighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import MASK_ID, N_SPECIAL_TOKENS, save_checkpoint
from .tensor import Tensor, concat, log, log_softmax, matmul, select_positions, softmax, swapaxes

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class TrainingBatch:
    """N aligned positives plus per-pair hard negatives and masked copies.

    Token arrays share one padded length. Hard-negative slots are always
    populated; the fallback flags mark pairs where the identity lacked an
    opposite-variant counterpart and a random negative was substituted.
    """

    images: np.ndarray          # [N, H, W, C]
    poses: np.ndarray           # [N, H, W, K]
    tokens: np.ndarray          # [N, L]
    hn_text_tokens: np.ndarray  # [N, L]
    hn_images: np.ndarray       # [N, H, W, C]
    hn_poses: np.ndarray        # [N, H, W, K]
    hn_text_fallback: np.ndarray   # [N] bool
    hn_image_fallback: np.ndarray  # [N] bool
    masked_tokens: np.ndarray   # [N, L]
    mask_rows: np.ndarray       # [M] row index of each masked position
    mask_cols: np.ndarray       # [M] column index
    mask_targets: np.ndarray    # [M] original token ids

    @property
    def n_pairs(self):
        return self.images.shape[0]


@dataclass
class LossReport:
    l_cl: float
    l_itm: float
    l_mlm: float

    @property
    def l_total(self):
        return self.l_cl + self.l_itm + self.l_mlm


# -- contrastive -------------------------------------------------------------


def similarity_matrix(f_v, f_t, tau):
    """Temperature-softmaxed cosine-similarity matrices.

    Rows of S_I2T are images normalized over texts; rows of S_T2I are texts
    normalized over images. Inputs must be unit-norm, so the raw similarity
    is a plain dot product.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    logits = matmul(f_v, swapaxes(f_t, -1, -2)) * (1.0 / tau)
    s_i2t = softmax(logits, axis=-1)
    s_t2i = softmax(swapaxes(logits, -1, -2), axis=-1)
    return s_i2t, s_t2i


def contrastive_loss(s_i2t, s_t2i):
    """Mean over the batch of -1/2 (log S_I2T[ii] + log S_T2I[ii])."""
    n = s_i2t.shape[0]
    idx = np.arange(n)
    diag_i2t = select_positions(log(s_i2t), idx, idx)
    diag_t2i = select_positions(log(s_t2i), idx, idx)
    return (diag_i2t.mean() + diag_t2i.mean()) * -0.5


# -- image-text matching -----------------------------------------------------


def itm_loss(predictions):
    """Mean binary cross-entropy over (p_hat, label) pairs.

    Saturated predictions opposing their label are clamped at 1e-12 and
    logged rather than producing infinities.
    """
    total = 0.0
    for p_hat, p in predictions:
        clamped = min(max(p_hat, 1e-12), 1.0 - 1e-12)
        if clamped != p_hat:
            logger.warning("itm_loss: clamped saturated prediction %r", p_hat)
        total += -(p * np.log(clamped) + (1.0 - p) * np.log(1.0 - clamped))
    return total / len(predictions)


def itm_loss_from_logits(itm_logits, labels):
    """Differentiable ITM loss on raw 2-way head outputs."""
    lp = log_softmax(itm_logits, axis=-1)
    picked = select_positions(lp, np.arange(len(labels)), np.asarray(labels))
    return -picked.mean()


# -- masked language modeling ------------------------------------------------


def mask_tokens(tokens, rate=0.25, rng=None, vocab_size=512, n_special=N_SPECIAL_TOKENS):
    """Apply the 80/10/10 masking scheme to one token sequence.

    Each non-special token is selected independently with probability `rate`;
    of the selected, 80% become [MASK], 10% a random non-special token, and
    10% stay unchanged. Returns (masked, positions, original_ids).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    tokens = np.asarray(tokens)
    masked = tokens.copy()
    maskable = tokens >= n_special
    selected = maskable & (rng.random(tokens.shape) < rate)
    positions = np.flatnonzero(selected)
    action = rng.random(positions.shape)
    for pos, a in zip(positions, action):
        if a < 0.8:
            masked[pos] = MASK_ID
        elif a < 0.9:
            masked[pos] = rng.integers(n_special, vocab_size)
        # else: keep the original token
    return masked, positions, tokens[positions]


def mlm_loss(mlm_logits, positions, targets):
    """Mean cross-entropy at the masked positions of one sequence.

    Returns 0 for an empty position set (a low masking rate can select
    nothing in a short sequence).
    """
    positions = np.asarray(positions)
    if positions.size == 0:
        return Tensor(0.0)
    lp = log_softmax(mlm_logits, axis=-1)
    picked = select_positions(lp, positions, np.asarray(targets))
    return -picked.mean()


# -- combined objective ------------------------------------------------------


def total_loss(model, batch: TrainingBatch, rng=None):
    """Forward the whole batch and return (scalar loss Tensor, LossReport).

    The matching term scores the positives, the per-pair hard negatives on
    both sides, and one random in-batch negative per positive. The three
    terms combine as an unweighted sum.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = batch.n_pairs
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs per batch")

    f_v_tokens = model.embed_images(batch.images, batch.poses)
    f_t_tokens = model.encode_text(batch.tokens)
    f_v = model.pool_image(f_v_tokens)
    f_t = model.pool_text(f_t_tokens)

    s_i2t, s_t2i = similarity_matrix(f_v, f_t, model.config.tau)
    l_cl = contrastive_loss(s_i2t, s_t2i)

    # ITM: positives, text-side and image-side hard negatives, and one
    # random in-batch mismatched caption per positive.
    hn_v_tokens = model.embed_images(batch.hn_images, batch.hn_poses)
    shuffle = (np.arange(n) + 1 + rng.integers(0, n - 1, size=n)) % n
    itm_visual = concat([f_v_tokens, f_v_tokens, hn_v_tokens, f_v_tokens], axis=0)
    itm_text = np.concatenate(
        [batch.tokens, batch.hn_text_tokens, batch.tokens, batch.tokens[shuffle]], axis=0
    )
    labels = np.concatenate([np.ones(n, dtype=int), np.zeros(3 * n, dtype=int)])
    itm_logits, _ = model.cross_from_text(model.encode_text(itm_text), itm_visual,
                                          want_mlm=False)
    l_itm = itm_loss_from_logits(itm_logits, labels)

    _, mlm_logits = model.cross_from_text(model.encode_text(batch.masked_tokens),
                                          f_v_tokens, want_itm=False)
    seq_len = batch.masked_tokens.shape[1]
    flat_logits = mlm_logits.reshape((n * seq_len, model.config.vocab_size))
    flat_pos = batch.mask_rows * seq_len + batch.mask_cols
    l_mlm = mlm_loss(flat_logits, flat_pos, batch.mask_targets)

    loss = l_cl + l_itm + l_mlm
    loss.assert_finite("total loss")
    report = LossReport(l_cl=l_cl.item(), l_itm=l_itm.item(), l_mlm=l_mlm.item())
    return loss, report


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                    + self.weight_decay * p.data)

    def state_arrays(self):
        arrays = {}
        for name in self.params:
            arrays[f"opt.m.{name}"] = self.m[name]
            arrays[f"opt.v.{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays, t):
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = arrays[f"opt.v.{name}"].astype(self.v[name].dtype)
        self.t = t


def linear_lr(step, total_steps, warmup, lr_start, lr_end):
    """Linear warm-up to lr_start, then linear decay to lr_end."""
    if warmup > 0 and step < warmup:
        return lr_start * (step + 1) / warmup
    decay_steps = max(total_steps - warmup, 1)
    frac = min((step - warmup) / decay_steps, 1.0)
    return lr_start + (lr_end - lr_start) * frac


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 22
    epochs: int = 30
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    weight_decay: float = 0.01
    warmup: int = 500
    mask_rate: float = 0.25
    ihnm: bool = True
    seed: int = 0


def train(records, pair_index, model, cfg: TrainConfig, checkpoint_dir=None,
          resume_state=None, progress=None):
    """Run the optimization loop over an identity-indexed corpus.

    Returns a history of per-epoch rows (epoch, loss terms, lr). Batches are
    rebuilt each epoch from a shuffle keyed on (seed, epoch), so resuming
    from a saved epoch reproduces the remaining schedule exactly.
    """
    from .corpus import build_training_batch  # local import to avoid a cycle

    if len(records) < cfg.batch_size:
        raise ValueError(
            f"corpus has {len(records)} pairs, fewer than batch size {cfg.batch_size}"
        )
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    history = []
    start_epoch = 0
    if resume_state is not None:
        opt.load_state_arrays(resume_state["arrays"], resume_state["meta"]["step"])
        start_epoch = resume_state["meta"]["epoch"] + 1
        history = list(resume_state["meta"].get("history", []))

    batches_per_epoch = len(records) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    step = opt.t

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        order = rng.permutation(len(records))
        epoch_report = np.zeros(3)
        lr = 0.0
        for b in range(batches_per_epoch):
            chunk = [records[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            batch = build_training_batch(
                chunk, records, pair_index, rng,
                ihnm=cfg.ihnm, mask_rate=cfg.mask_rate,
                vocab_size=model.config.vocab_size,
            )
            try:
                loss, report = total_loss(model, batch, rng=rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}: {exc}"
                ) from exc
            opt.zero_grad()
            loss.backward()
            lr = linear_lr(step, total_steps, cfg.warmup, cfg.lr_start, cfg.lr_end)
            opt.step(lr)
            step += 1
            epoch_report += [report.l_cl, report.l_itm, report.l_mlm]
        epoch_report /= max(batches_per_epoch, 1)
        row = {
            "epoch": epoch,
            "l_cl": float(epoch_report[0]),
            "l_itm": float(epoch_report[1]),
            "l_mlm": float(epoch_report[2]),
            "l_total": float(epoch_report.sum()),
            "lr": lr,
        }
        history.append(row)
        if progress is not None:
            progress(row)
        if checkpoint_dir is not None:
            save_checkpoint(
                checkpoint_dir, model,
                extra_arrays=opt.state_arrays(),
                extra_meta={"epoch": epoch, "step": step, "history": history,
                            "train_config": vars(cfg)},
            )
    return history


def write_loss_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,l_cl,l_itm,l_mlm,l_total,lr\n")
        for row in history:
            f.write(f"{row['epoch']},{row['l_cl']:.6f},{row['l_itm']:.6f},"
                    f"{row['l_mlm']:.6f},{row['l_total']:.6f},{row['lr']:.8f}\n")
